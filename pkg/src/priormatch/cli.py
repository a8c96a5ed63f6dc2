"""Command-line surface: dataset synthesis, the two training phases, the
oracle fine-tuning bound, evaluation, and plot emission.

Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
Set DETERMINISTIC=1 to force 64-bit deterministic mode.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import nets, plotting, synthdata, trainer as trainmod
from .losses import NonFiniteLossError
from .metrics import evaluate_scans
from .nets import NetworkSet
from .synthdata import ConfigurationError, Volume
from .trainer import Trainer, infer

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _deterministic() -> bool:
    return os.environ.get("DETERMINISTIC", "0") == "1"


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigurationError(
            f"output directory {out_dir} is not empty (use --force to reuse)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_cfg(args, **overrides) -> dict:
    ov = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    return cfgmod.load_config(args.config, ov)


def _split(volumes: list[Volume], val_scans: int) -> tuple[list[Volume], list[Volume]]:
    """Training scans first, the last val_scans held out."""
    if val_scans >= len(volumes):
        raise ConfigurationError(
            f"val_scans={val_scans} leaves no training volumes out of {len(volumes)}")
    return volumes[:len(volumes) - val_scans], volumes[len(volumes) - val_scans:]


def _load_dataset(path: str) -> tuple[list[Volume], list[Volume], dict]:
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    if not manifest.exists():
        raise ConfigurationError(f"dataset manifest not found: {manifest}")
    return synthdata.load_dataset(manifest)


def _write_eval_outputs(report, out_dir: Path, stem: str = "metrics") -> None:
    report.write_per_scan_csv(out_dir / f"{stem}_per_scan.csv")
    report.write_summary_csv(out_dir / f"{stem}_summary.csv")
    (out_dir / f"{stem}_table.txt").write_text(report.format_table() + "\n",
                                               encoding="utf-8")
    plotting.plot_dice_bars([out_dir / f"{stem}_summary.csv"],
                            out_dir / f"{stem}_dice_bars.svg")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out_dir = _prepare_out(args.out, args.force)
    if args.n_target is not None:
        cfg["n_target"] = args.n_target
    source, target, manifest = synthdata.generate_dataset(
        cfg["seed"], cfg["n_source"], cfg["n_target"], cfgmod.dataset_config(cfg))
    manifest["val_scans"] = cfg["val_scans"]
    synthdata.save_dataset(source, target, manifest, out_dir)
    cfgmod.write_config(cfg, out_dir / "resolved_config.txt")
    print(f"wrote {len(source)} source + {len(target)} target volumes to {out_dir}")
    return EXIT_OK


def _eval_writer(out_dir: Path, name: str):
    f = open(out_dir / name, "w", newline="", encoding="utf-8")
    w = csv.writer(f)
    w.writerow(["epoch", "mean_dice"])
    return f, w


def cmd_train_source(args) -> int:
    cfg = _load_cfg(args)
    out_dir = _prepare_out(args.out, args.force)
    source, _, _ = _load_dataset(args.dataset)
    train_vols, val_vols = _split(source, cfg["val_scans"])
    tc = cfgmod.train_config(cfg, deterministic=_deterministic())
    if args.resume:
        tr = Trainer.load_checkpoint(args.resume, tc)
    else:
        net = NetworkSet(cfgmod.net_config(cfg), dtype=tc.dtype, seed=cfg["seed"])
        tr = Trainer(net, tc)
    tr.open_log(out_dir / "train_source_log.csv")
    eval_file, eval_writer = _eval_writer(out_dir, "source_val_dice.csv")
    try:
        tr.train_source(train_vols, val_vols, eval_log=eval_writer)
    finally:
        tr.close_log()
        eval_file.close()
    tr.save_checkpoint(out_dir / "source.ckpt")
    report = _evaluate_volumes(tr.net, val_vols, tc, cfg)
    _write_eval_outputs(report, out_dir, stem="source_val")
    cfgmod.write_config(cfg, out_dir / "resolved_config.txt")
    print(f"source model: validation mean Dice {report.mean_dice:.4f}")
    return EXIT_OK


def _evaluate_volumes(net, volumes, tc, cfg, route=None):
    preds = [infer(net, v, tc, route=route) for v in volumes]
    return evaluate_scans(
        preds, [v.labels for v in volumes], cfg["n_classes"],
        scan_ids=[v.scan_id for v in volumes],
        connectivity=cfg["metric_connectivity"],
        filter_pred=cfg["metric_filtering"] == "pred",
    )


def _pick_few_shot_volume(volume: Volume, n_classes: int) -> Volume:
    """Clip a volume to 3 consecutive slices each intersecting >= 3 labels."""
    for iz in range(volume.depth - 2):
        ok = all(
            len(np.setdiff1d(np.unique(volume.labels[z]), [0])) >= min(3, n_classes - 1)
            for z in range(iz, iz + 3)
        )
        if ok:
            return Volume(images=volume.images[iz:iz + 3].copy(),
                          labels=volume.labels[iz:iz + 3].copy(),
                          modality_id=volume.modality_id,
                          scan_id=volume.scan_id + "_fewshot", seed=volume.seed)
    raise ConfigurationError(
        f"{volume.scan_id}: no 3 consecutive slices intersect 3 labels")


def cmd_adapt(args) -> int:
    cfg = _load_cfg(args, target_scans=args.target_scans)
    if args.ablate == "kl":
        cfg["disable_kl"] = True
    elif args.ablate == "adv":
        cfg["disable_adv"] = True
    out_dir = _prepare_out(args.out, args.force)
    source, target, _ = _load_dataset(args.dataset)
    source_train, _ = _split(source, cfg["val_scans"])
    target_pool, target_val = _split(target, cfg["val_scans"])
    n_runs = args.seeds
    run_dice = []
    for run in range(n_runs):
        run_dir = out_dir if n_runs == 1 else out_dir / f"run_{run:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        run_cfg = dict(cfg)
        run_cfg["seed"] = cfg["seed"] + run
        tc = cfgmod.train_config(run_cfg, deterministic=_deterministic())
        if args.few_shot and tc.early_stop_patience == 0:
            tc = dataclasses.replace(tc, early_stop_patience=10)
        rng = np.random.default_rng(run_cfg["seed"])
        picks = rng.choice(len(target_pool), size=min(cfg["target_scans"],
                                                      len(target_pool)),
                           replace=False)
        chosen = [target_pool[i] for i in sorted(picks)]
        if args.few_shot:
            chosen = [_pick_few_shot_volume(chosen[0], cfg["n_classes"])]
        net, _, _ = nets.load_checkpoint(args.source_checkpoint, dtype=tc.dtype)
        tr = Trainer(net, tc)
        tr.open_log(run_dir / "adapt_log.csv")
        eval_file, eval_writer = _eval_writer(run_dir, "target_val_dice.csv")
        try:
            tr.adapt(source_train, chosen, target_val, eval_log=eval_writer)
        finally:
            tr.close_log()
            eval_file.close()
        tr.save_checkpoint(run_dir / "adapted.ckpt")
        report = _evaluate_volumes(tr.net, target_val, tc, run_cfg)
        _write_eval_outputs(report, run_dir, stem="target_val")
        cfgmod.write_config(run_cfg, run_dir / "resolved_config.txt")
        run_dice.append(report.mean_dice)
        print(f"run {run}: target scans {[v.scan_id for v in chosen]}, "
              f"target mean Dice {report.mean_dice:.4f}")
    if n_runs > 1:
        with open(out_dir / "pooled_summary.csv", "w", newline="",
                  encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["run", "mean_dice"])
            for i, d in enumerate(run_dice):
                w.writerow([i, f"{d:.6f}"])
            w.writerow(["mean", f"{np.mean(run_dice):.6f}"])
            w.writerow(["std", f"{np.std(run_dice):.6f}"])
    return EXIT_OK


def cmd_finetune_oracle(args) -> int:
    cfg = _load_cfg(args)
    out_dir = _prepare_out(args.out, args.force)
    _, target, _ = _load_dataset(args.dataset)
    target_pool, target_val = _split(target, cfg["val_scans"])
    tc = cfgmod.train_config(cfg, deterministic=_deterministic())
    net, _, _ = nets.load_checkpoint(args.source_checkpoint, dtype=tc.dtype)
    tr = Trainer(net, tc)
    tr.open_log(out_dir / "oracle_log.csv")
    eval_file, eval_writer = _eval_writer(out_dir, "target_val_dice.csv")
    try:
        tr.finetune_oracle(target_pool, target_val, epochs=cfg["oracle_epochs"],
                           eval_log=eval_writer)
    finally:
        tr.close_log()
        eval_file.close()
    tr.save_checkpoint(out_dir / "oracle.ckpt")
    report = _evaluate_volumes(tr.net, target_val, tc, cfg)
    _write_eval_outputs(report, out_dir, stem="target_val")
    cfgmod.write_config(cfg, out_dir / "resolved_config.txt")
    print(f"oracle: target mean Dice {report.mean_dice:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args, metric_filtering=args.metric_filtering)
    out_dir = _prepare_out(args.out, args.force)
    source, target, _ = _load_dataset(args.dataset)
    if args.split == "target-test":
        _, volumes = _split(target, cfg["val_scans"])
    elif args.split == "source-val":
        _, volumes = _split(source, cfg["val_scans"])
    elif args.split == "all-target":
        volumes = target
    else:
        volumes = source
    tc = cfgmod.train_config(cfg, deterministic=_deterministic())
    net, _, _ = nets.load_checkpoint(args.checkpoint, dtype=tc.dtype)
    report = _evaluate_volumes(net, volumes, tc, cfg, route=args.route)
    _write_eval_outputs(report, out_dir, stem="metrics")
    cfgmod.write_config(cfg, out_dir / "resolved_config.txt")
    print(report.format_table())
    print(f"mean Dice {report.mean_dice:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out_dir = _prepare_out(args.out, args.force)
    loss_logs, dice_logs, summaries = [], [], []
    for raw in args.logs:
        path = Path(raw)
        if not path.exists():
            raise ConfigurationError(f"log file not found: {path}")
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if len(rows) < 2:
            raise ConfigurationError(f"{path}: empty or header-only CSV")
        header = rows[0]
        if "wall_ms" in header:
            loss_logs.append(path)
        elif "mean_dice" in header:
            dice_logs.append(path)
        elif "dice_mean" in header:
            summaries.append(path)
        else:
            raise ConfigurationError(f"{path}: unrecognized CSV header {header}")
    written = []
    if loss_logs:
        written.append(plotting.plot_loss_curves(loss_logs, out_dir / "loss_curves.svg"))
    if dice_logs:
        written.append(plotting.plot_dice_curves(dice_logs, out_dir / "dice_curves.svg"))
    if summaries:
        written.append(plotting.plot_dice_bars(summaries, out_dir / "dice_bars.svg"))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priormatch",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        if dataset:
            p.add_argument("--dataset", required=True,
                           help="dataset directory or manifest path")

    p = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    common(p, dataset=False)
    p.add_argument("--n-target", type=int, help="override target volume count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-source", help="supervised source pretraining")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="unsupervised domain adaptation")
    common(p)
    p.add_argument("--source-checkpoint", required=True)
    p.add_argument("--seeds", type=int, default=1,
                   help="number of repeated runs with shifted seeds")
    p.add_argument("--ablate", choices=["kl", "adv"],
                   help="disable prior matching or adversarial training")
    p.add_argument("--few-shot", action="store_true",
                   help="adapt with 3 consecutive target slices only")
    p.add_argument("--target-scans", type=int,
                   help="number of target scans drawn from the pool")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("finetune-oracle",
                       help="supervised target fine-tuning upper bound")
    common(p)
    p.add_argument("--source-checkpoint", required=True)
    p.set_defaults(func=cmd_finetune_oracle)

    p = sub.add_parser("evaluate", help="Dice/ASSD evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target-test",
                   choices=["target-test", "source-val", "all-target", "all-source"])
    p.add_argument("--route", choices=["source", "target"],
                   help="force an encoder route (default: volume modality)")
    p.add_argument("--metric-filtering", choices=["pred", "none"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render loss/Dice figures from CSV logs")
    p.add_argument("logs", nargs="+", help="training or evaluation CSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
