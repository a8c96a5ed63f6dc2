"""Synthetic two-modality dataset generator.

Phantoms are stacks of rasterized geometric structures (ellipse / annulus /
capsule), rendered into a "source" and a "target" appearance from the same
label geometry. Source and target datasets use disjoint phantom seeds, so the
domains are unpaired. All generation is a pure function of seeds and configs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage


class ConfigurationError(ValueError):
    """Invalid generation or training configuration."""


MIN_STRUCTURE_PIXELS = 16
DEFAULT_GRID = 64
DEFAULT_DEPTH = 16
DEFAULT_N_CLASSES = 5


# ---------------------------------------------------------------------------
# Phantom geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Structure:
    kind: str  # ellipse | annulus | capsule
    center: tuple[float, float]  # (y, x) pixels
    radii: tuple[float, float]  # (a, b) pixels
    orientation: float  # radians
    inner_frac: float = 0.5  # annulus only


@dataclass
class Phantom:
    seed: int
    grid: int
    structures: list[Structure]
    label_map: np.ndarray  # (grid, grid) uint8, later structure wins overlaps


def _rasterize(structures: list[Structure], grid: int) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    label = np.zeros((grid, grid), dtype=np.uint8)
    for k, s in enumerate(structures, start=1):
        cy, cx = s.center
        a, b = s.radii
        dy = yy - cy
        dx = xx - cx
        cos_t, sin_t = np.cos(s.orientation), np.sin(s.orientation)
        u = cos_t * dx + sin_t * dy
        v = -sin_t * dx + cos_t * dy
        if s.kind == "ellipse":
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        elif s.kind == "annulus":
            r2 = (u / a) ** 2 + (v / b) ** 2
            inside = (r2 <= 1.0) & (r2 >= s.inner_frac**2)
        elif s.kind == "capsule":
            # segment of half-length a along u, thickness b
            du = np.clip(u, -a, a)
            inside = (u - du) ** 2 + v**2 <= b**2
        else:
            raise ConfigurationError(f"unknown structure kind {s.kind!r}")
        label[inside] = k
    return label


def _sample_structures(rng: np.random.Generator, grid: int, n_fg: int) -> list[Structure]:
    # one structure roughly per quadrant so classes rarely obliterate each other
    kinds = ["ellipse", "annulus", "capsule", "ellipse"]
    anchors = [(0.32, 0.32), (0.32, 0.68), (0.68, 0.34), (0.66, 0.68)]
    structures = []
    for k in range(n_fg):
        ay, ax = anchors[k % len(anchors)]
        cy = grid * (ay + rng.uniform(-0.06, 0.06))
        cx = grid * (ax + rng.uniform(-0.06, 0.06))
        a = grid * rng.uniform(0.10, 0.17)
        b = grid * rng.uniform(0.07, 0.13)
        structures.append(
            Structure(
                kind=kinds[k % len(kinds)],
                center=(cy, cx),
                radii=(a, b),
                orientation=rng.uniform(0, np.pi),
                inner_frac=rng.uniform(0.4, 0.6),
            )
        )
    return structures


def generate_phantom(seed: int, grid: int = DEFAULT_GRID,
                     n_classes: int = DEFAULT_N_CLASSES) -> Phantom:
    """Deterministic phantom; regenerates until every class has >= 16 pixels."""
    if grid < 16:
        raise ConfigurationError(f"grid size {grid} < 16")
    n_fg = n_classes - 1
    for attempt in range(64):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        structures = _sample_structures(rng, grid, n_fg)
        label = _rasterize(structures, grid)
        counts = np.bincount(label.ravel(), minlength=n_classes)
        if all(counts[1:n_classes] >= MIN_STRUCTURE_PIXELS):
            return Phantom(seed=seed, grid=grid, structures=structures, label_map=label)
    raise ConfigurationError(f"could not place {n_fg} structures on {grid}x{grid} grid")


def _phantom_stack(phantom: Phantom, depth: int) -> np.ndarray:
    """Label volume (depth, grid, grid): radii shrink toward the stack ends."""
    labels = np.zeros((depth, phantom.grid, phantom.grid), dtype=np.uint8)
    rng = np.random.default_rng(np.random.SeedSequence([phantom.seed, 0xDEE]))
    drift = rng.uniform(-0.15, 0.15, size=(len(phantom.structures), 2))
    for iz in range(depth):
        t = (iz + 0.5) / depth * 2.0 - 1.0  # in (-1, 1)
        scale = float(np.sqrt(max(1.0 - 0.75 * t * t, 0.05)))
        slab = [
            replace(
                s,
                radii=(s.radii[0] * scale, s.radii[1] * scale),
                center=(s.center[0] + drift[k, 0] * iz, s.center[1] + drift[k, 1] * iz),
            )
            for k, s in enumerate(phantom.structures)
        ]
        labels[iz] = _rasterize(slab, phantom.grid)
    return labels


# ---------------------------------------------------------------------------
# Modality rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModalityRendering:
    modality_id: str  # "source" | "target"
    intensity_table: tuple[float, ...]
    gamma: float = 1.0
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.05
    texture_scale: float = 8.0
    edge_sigma: float = 0.7
    # per-volume appearance variability (scanner-to-scanner): multiplicative
    # gain drawn from 1 +/- gain_jitter and gamma scaled by exp(+/- gamma_jitter)
    gain_jitter: float = 0.0
    gamma_jitter: float = 0.0


def _target_class_permutation(n_fg: int) -> np.ndarray:
    # half-rotation: every foreground class changes its brightness rank
    return (np.arange(n_fg) + max(1, n_fg // 2)) % n_fg


def default_rendering(modality_id: str, n_classes: int = DEFAULT_N_CLASSES) -> ModalityRendering:
    base = np.linspace(0.35, 0.95, n_classes - 1)
    if modality_id == "source":
        table = (0.10, *base.tolist())
        return ModalityRendering("source", table, gamma=1.0,
                                 noise_sigma=0.03, bias_amplitude=0.05, texture_scale=8.0)
    if modality_id == "target":
        # inverted, gamma-compressed, and with the class brightness ordering
        # permuted relative to the source, so the cross-modality map is not a
        # pointwise intensity function: an unadapted source model collapses on
        # this domain, and matching classes across domains needs shape context
        permuted = base[_target_class_permutation(n_classes - 1)]
        table = tuple((1.0 - v) for v in (0.10, *permuted.tolist()))
        # gain/gamma jitter makes target appearance vary volume-to-volume, so
        # adapting on a single unlabelled volume must not overfit its look
        return ModalityRendering("target", table, gamma=0.55,
                                 noise_sigma=0.06, bias_amplitude=0.08, texture_scale=3.0,
                                 gain_jitter=0.15, gamma_jitter=0.3)
    raise ConfigurationError(f"unknown modality {modality_id!r}")


def render(labels: np.ndarray, rendering: ModalityRendering,
           rng: np.random.Generator) -> np.ndarray:
    """Render a label volume (D, H, W) to intensities in [0, 1]."""
    table = np.asarray(rendering.intensity_table, dtype=np.float64)
    if labels.max() >= len(table):
        raise ConfigurationError("intensity table shorter than class count")
    gamma = rendering.gamma
    gain = 1.0
    if rendering.gain_jitter > 0 or rendering.gamma_jitter > 0:
        gain = 1.0 + float(rng.uniform(-rendering.gain_jitter,
                                       rendering.gain_jitter))
        gamma = gamma * float(np.exp(rng.uniform(-rendering.gamma_jitter,
                                                 rendering.gamma_jitter)))
    img = table[labels] * gain
    if rendering.edge_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, rendering.edge_sigma, rendering.edge_sigma))
    if rendering.bias_amplitude > 0:
        bias = rng.standard_normal(labels.shape)
        bias = ndimage.gaussian_filter(bias, sigma=(0, rendering.texture_scale, rendering.texture_scale))
        scale = np.abs(bias).max()
        if scale > 0:
            img = img + rendering.bias_amplitude * bias / scale
    img = img + rng.standard_normal(labels.shape) * rendering.noise_sigma
    img = np.clip(img, 0.0, 1.0) ** gamma
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Volumes and dataset generation
# ---------------------------------------------------------------------------

@dataclass
class Volume:
    images: np.ndarray  # (D, H, W) float32 in [0, 1]
    labels: np.ndarray  # (D, H, W) uint8
    modality_id: str
    scan_id: str
    seed: int

    def __post_init__(self):
        if self.images.shape != self.labels.shape:
            raise ConfigurationError("image/label shape mismatch")

    @property
    def depth(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class DatasetConfig:
    grid: int = DEFAULT_GRID
    depth: int = DEFAULT_DEPTH
    n_classes: int = DEFAULT_N_CLASSES
    source_rendering: ModalityRendering | None = None
    target_rendering: ModalityRendering | None = None

    def rendering(self, modality_id: str) -> ModalityRendering:
        custom = self.source_rendering if modality_id == "source" else self.target_rendering
        return custom if custom is not None else default_rendering(modality_id, self.n_classes)


def make_volume(phantom_seed: int, modality_id: str, scan_id: str,
                config: DatasetConfig) -> Volume:
    phantom = generate_phantom(phantom_seed, config.grid, config.n_classes)
    labels = _phantom_stack(phantom, config.depth)
    rng = np.random.default_rng(
        np.random.SeedSequence([phantom_seed, zlib.crc32(modality_id.encode())])
    )
    images = render(labels, config.rendering(modality_id), rng)
    return Volume(images=images, labels=labels, modality_id=modality_id,
                  scan_id=scan_id, seed=phantom_seed)


def generate_dataset(
    seed: int, n_source: int, n_target: int,
    config: DatasetConfig | None = None,
) -> tuple[list[Volume], list[Volume], dict]:
    """Generate n_source + n_target volumes with disjoint phantom seeds."""
    if n_source < 1 or n_target < 1:
        raise ConfigurationError("need at least one volume per domain")
    config = config or DatasetConfig()
    if config.grid < 16:
        raise ConfigurationError(f"grid size {config.grid} < 16")
    rng = np.random.default_rng(seed)
    phantom_seeds: list[int] = []
    while len(phantom_seeds) < n_source + n_target:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in phantom_seeds:
            phantom_seeds.append(s)
    source = [
        make_volume(phantom_seeds[i], "source", f"source_{i:03d}", config)
        for i in range(n_source)
    ]
    target = [
        make_volume(phantom_seeds[n_source + i], "target", f"target_{i:03d}", config)
        for i in range(n_target)
    ]
    manifest = {
        "seed": seed,
        "n_source": n_source,
        "n_target": n_target,
        "grid": config.grid,
        "depth": config.depth,
        "n_classes": config.n_classes,
        "source_seeds": phantom_seeds[:n_source],
        "target_seeds": phantom_seeds[n_source:],
    }
    return source, target, manifest


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: float = 10.0
    translate_px: float = 3.0
    shear: float = 0.05
    elastic_spacing: float = 16.0
    elastic_sigma: float = 1.5  # displacement magnitude, pixels
    gamma_range: tuple[float, float] = (0.8, 1.25)
    intensity_norm: str = "none"  # none | rescale


IDENTITY_AUGMENTATION = AugmentationSpec(
    rotation_deg=0.0, translate_px=0.0, shear=0.0,
    elastic_spacing=16.0, elastic_sigma=0.0, gamma_range=(1.0, 1.0),
)


def augment(
    image: np.ndarray, label: np.ndarray,
    spec: AugmentationSpec, rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one sampled augmentation; same warp for image and label.

    Image is warped bilinearly, label nearest-neighbor; gamma and intensity
    normalization touch the image only. Output stays in [0, 1].
    """
    if image.shape != label.shape:
        raise ConfigurationError("image/label shape mismatch")
    h, w = image.shape
    theta = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    ty = rng.uniform(-spec.translate_px, spec.translate_px)
    tx = rng.uniform(-spec.translate_px, spec.translate_px)
    shear = rng.uniform(-spec.shear, spec.shear)
    gamma = rng.uniform(*spec.gamma_range)

    identity_warp = (theta == 0.0 and ty == 0.0 and tx == 0.0 and shear == 0.0
                     and spec.elastic_sigma == 0.0)
    if identity_warp:
        out_img = image.astype(np.float64)
        out_lbl = label.copy()
    else:
        # forward map: p -> Shear(R p) + t around the image center; resampling
        # needs the inverse applied to output coordinates
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
        shr = np.array([[1.0, shear], [0.0, 1.0]])
        fwd = shr @ rot
        inv = np.linalg.inv(fwd)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy = yy - cy - ty
        dx = xx - cx - tx
        sy = inv[0, 0] * dy + inv[0, 1] * dx + cy
        sx = inv[1, 0] * dy + inv[1, 1] * dx + cx
        if spec.elastic_sigma > 0:
            n_ctrl = max(int(round(h / spec.elastic_spacing)), 2)
            disp = rng.normal(0.0, spec.elastic_sigma, size=(2, n_ctrl, n_ctrl))
            zoom = (h / n_ctrl, w / n_ctrl)
            field = np.stack([
                ndimage.zoom(ndimage.gaussian_filter(disp[i], 1.0), zoom, order=1)
                for i in range(2)
            ])
            sy = sy + field[0][:h, :w]
            sx = sx + field[1][:h, :w]
        coords = np.stack([sy, sx])
        out_img = ndimage.map_coordinates(image.astype(np.float64), coords,
                                          order=1, mode="nearest")
        out_lbl = ndimage.map_coordinates(label, coords, order=0, mode="nearest")

    out_img = np.clip(out_img, 0.0, 1.0) ** gamma
    if spec.intensity_norm == "rescale":
        lo, hi = out_img.min(), out_img.max()
        if hi > lo:
            out_img = (out_img - lo) / (hi - lo)
    return np.clip(out_img, 0.0, 1.0).astype(np.float32), out_lbl.astype(label.dtype)


# ---------------------------------------------------------------------------
# Batch iteration
# ---------------------------------------------------------------------------

def _sample_rng(seed: int, scan_id: str, slice_idx: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(scan_id.encode()), slice_idx, epoch])
    )


def iterate_batches(
    volumes: list[Volume], batch_size: int, seed: int, epoch: int,
    spec: AugmentationSpec | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Epoch-deterministic shuffled 2D slice batches.

    Yields (images (B, 1, H, W) float32, labels (B, H, W) int64). Each
    sample's augmentation stream depends only on (seed, scan_id, slice index,
    epoch), never on iteration order.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if not volumes:
        raise ConfigurationError("no volumes to iterate")
    index = [(vi, si) for vi, v in enumerate(volumes) for si in range(v.depth)]
    order = np.random.default_rng(
        np.random.SeedSequence([seed, epoch, 0x5F0E])
    ).permutation(len(index))
    for start in range(0, len(index), batch_size):
        chunk = [index[i] for i in order[start:start + batch_size]]
        imgs, lbls = [], []
        for vi, si in chunk:
            vol = volumes[vi]
            img, lbl = vol.images[si], vol.labels[si]
            if spec is not None:
                rng = _sample_rng(seed, vol.scan_id, si, epoch)
                img, lbl = augment(img, lbl, spec, rng)
            imgs.append(img)
            lbls.append(lbl)
        yield (np.stack(imgs)[:, None].astype(np.float32),
               np.stack(lbls).astype(np.int64))


# ---------------------------------------------------------------------------
# On-disk format: raw rasters + UTF-8 key=value sidecars
# ---------------------------------------------------------------------------

def _write_meta(path: Path, fields: dict) -> None:
    lines = [f"{k}={v}" for k, v in fields.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_meta(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def save_volume(volume: Volume, out_dir: str | Path) -> Path:
    """Write <scan_id>.img.f32 (LE float32), <scan_id>.lbl.u8, <scan_id>.meta."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = out_dir / volume.scan_id
    volume.images.astype("<f4").tofile(base.with_suffix(".img.f32"))
    volume.labels.astype(np.uint8).tofile(base.with_suffix(".lbl.u8"))
    d, h, w = volume.images.shape
    _write_meta(base.with_suffix(".meta"), {
        "dims": f"{d},{h},{w}",
        "modality": volume.modality_id,
        "scan_id": volume.scan_id,
        "seed": volume.seed,
    })
    return base


def load_volume(base: str | Path) -> Volume:
    base = Path(base)
    meta = _read_meta(base.with_suffix(".meta"))
    d, h, w = (int(x) for x in meta["dims"].split(","))
    images = np.fromfile(base.with_suffix(".img.f32"), dtype="<f4").reshape(d, h, w)
    labels = np.fromfile(base.with_suffix(".lbl.u8"), dtype=np.uint8).reshape(d, h, w)
    return Volume(images=images, labels=labels, modality_id=meta["modality"],
                  scan_id=meta["scan_id"], seed=int(meta["seed"]))


def save_dataset(source: list[Volume], target: list[Volume], manifest: dict,
                 out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for vol in [*source, *target]:
        base = save_volume(vol, out_dir)
        paths.append(base.name)
    fields = {k: (",".join(str(s) for s in v) if isinstance(v, list) else v)
              for k, v in manifest.items()}
    fields["volumes"] = ";".join(paths)
    manifest_path = out_dir / "manifest.txt"
    _write_meta(manifest_path, fields)
    return manifest_path


def load_dataset(manifest_path: str | Path) -> tuple[list[Volume], list[Volume], dict]:
    manifest_path = Path(manifest_path)
    meta = _read_meta(manifest_path)
    root = manifest_path.parent
    source, target = [], []
    for name in meta["volumes"].split(";"):
        vol = load_volume(root / name)
        (source if vol.modality_id == "source" else target).append(vol)
    return source, target, meta
