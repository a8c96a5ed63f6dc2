"""Flat key=value experiment configuration.

One UTF-8 file, '#' comments, unknown keys rejected. Command-line overrides
take precedence; every run writes its fully-resolved config next to its
outputs so it can be replayed exactly.
"""

from __future__ import annotations

from pathlib import Path

from .losses import LossWeights
from .nets import NetConfig
from .synthdata import AugmentationSpec, ConfigurationError, DatasetConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, object] = {
    # dataset
    "seed": 7,
    "n_source": 16,
    "n_target": 16,
    "grid": 64,
    "depth": 16,
    "n_classes": 5,
    "val_scans": 4,  # per domain, taken from the end of each scan list
    # training
    "source_epochs": 25,
    "uda_epochs": 40,
    "oracle_epochs": 20,
    "batch_size": 16,
    "lr": 5e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    "lambda_rec": 1.0,
    "lambda_kl": 0.1,
    "lambda_seg": 1.0,
    "lambda_adv": 1.0,
    "lambda_cyc": 10.0,
    "background_weight": 0.2,
    "disable_kl": False,
    "disable_adv": False,
    "eval_every": 1,
    "early_stop_patience": 0,
    "test_time_latent": "mu",
    "kl_reduction": "mean",
    "adv_mode": "non_saturating",
    "disc_steps": 1,
    "target_scans": 1,
    # augmentation
    "aug_rotation_deg": 10.0,
    "aug_translate_px": 3.0,
    "aug_shear": 0.05,
    "aug_elastic_spacing": 16.0,
    "aug_elastic_sigma": 1.5,
    "aug_gamma_lo": 0.8,
    "aug_gamma_hi": 1.25,
    "aug_intensity_norm": "none",
    # networks
    "base_channels": 16,
    "latent_channels": 32,
    "seg_channels": 24,
    "disc_channels": 16,
    # metrics
    "metric_filtering": "pred",  # pred | none
    "metric_connectivity": 26,
}


def _parse_value(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"bad boolean for {key}: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> dict:
    """Defaults, updated from an optional file, then from overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            if key not in DEFAULTS:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, value.strip())
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        cfg[key] = value if not isinstance(value, str) else _parse_value(key, value)
    return cfg


def write_config(cfg: dict, path: str | Path) -> None:
    lines = [f"{k}={str(cfg[k]).lower() if isinstance(cfg[k], bool) else cfg[k]}"
             for k in DEFAULTS]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def dataset_config(cfg: dict) -> DatasetConfig:
    return DatasetConfig(grid=cfg["grid"], depth=cfg["depth"],
                         n_classes=cfg["n_classes"])


def augmentation_spec(cfg: dict) -> AugmentationSpec:
    return AugmentationSpec(
        rotation_deg=cfg["aug_rotation_deg"],
        translate_px=cfg["aug_translate_px"],
        shear=cfg["aug_shear"],
        elastic_spacing=cfg["aug_elastic_spacing"],
        elastic_sigma=cfg["aug_elastic_sigma"],
        gamma_range=(cfg["aug_gamma_lo"], cfg["aug_gamma_hi"]),
        intensity_norm=cfg["aug_intensity_norm"],
    )


def net_config(cfg: dict) -> NetConfig:
    return NetConfig(
        n_classes=cfg["n_classes"],
        base_channels=cfg["base_channels"],
        latent_channels=cfg["latent_channels"],
        seg_channels=cfg["seg_channels"],
        disc_channels=cfg["disc_channels"],
    )


def train_config(cfg: dict, deterministic: bool = False) -> TrainConfig:
    return TrainConfig(
        source_epochs=cfg["source_epochs"],
        uda_epochs=cfg["uda_epochs"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        betas=(cfg["beta1"], cfg["beta2"]),
        seed=cfg["seed"],
        weights=LossWeights(
            lambda_rec=cfg["lambda_rec"], lambda_kl=cfg["lambda_kl"],
            lambda_seg=cfg["lambda_seg"], lambda_adv=cfg["lambda_adv"],
            lambda_cyc=cfg["lambda_cyc"],
        ),
        background_weight=cfg["background_weight"],
        n_classes=cfg["n_classes"],
        disable_kl=cfg["disable_kl"],
        disable_adv=cfg["disable_adv"],
        eval_every=cfg["eval_every"],
        early_stop_patience=cfg["early_stop_patience"],
        test_time_latent=cfg["test_time_latent"],
        kl_reduction=cfg["kl_reduction"],
        adv_mode=cfg["adv_mode"],
        disc_steps=cfg["disc_steps"],
        augmentation=augmentation_spec(cfg),
        deterministic=deterministic,
    )
