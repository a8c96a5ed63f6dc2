"""Segmentation evaluation: per-class Dice and ASSD on 3D volumes.

ASSD is computed between 6-neighborhood surface voxel sets; predictions are
optionally reduced to their largest connected component first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

ASSD_UNDEFINED = float("nan")


def dice_3d(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P∩G| / (|P|+|G|) of two binary volumes.

    Both masks empty returns 1.0 by convention.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest connected component of a binary volume.

    Size ties are broken by the component containing the lexicographically
    smallest (z, y, x) voxel. Empty input returns an empty mask.
    """
    m = mask.astype(bool)
    if not m.any():
        return np.zeros_like(m)
    labels, n = ndimage.label(m, structure=_connectivity_structure(connectivity))
    if n == 1:
        return labels == 1
    sizes = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if len(best) > 1:
        # tie: keep the component whose first voxel in raster (z, y, x) order
        # comes earliest
        flat = labels.ravel()
        firsts = {int(lab): int(np.flatnonzero(flat == lab)[0]) for lab in best}
        winner = min(firsts, key=firsts.get)
    else:
        winner = int(best[0])
    return labels == winner


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (z, y, x) of mask voxels with a 6-neighbor outside the mask.

    Out-of-bounds counts as outside, so voxels on the array border are surface.
    """
    m = mask.astype(bool)
    if not m.any():
        return np.zeros((0, 3), dtype=np.int64)
    interior = ndimage.binary_erosion(
        m, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    return np.argwhere(m & ~interior)


def assd(
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> float:
    """Average symmetric surface distance between two binary volumes.

    Returns NaN (undefined) when either surface is empty.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    sp = surface_voxels(pred).astype(np.float64) * np.asarray(spacing)
    sg = surface_voxels(gt).astype(np.float64) * np.asarray(spacing)
    if len(sp) == 0 or len(sg) == 0:
        return ASSD_UNDEFINED
    d_pg, _ = cKDTree(sg).query(sp)
    d_gp, _ = cKDTree(sp).query(sg)
    return float((d_pg.sum() + d_gp.sum()) / (len(sp) + len(sg)))


@dataclass
class MetricsReport:
    """Per-scan, per-class Dice/ASSD with mean/std aggregation."""

    scan_ids: list[str]
    class_ids: list[int]
    dice: dict[tuple[str, int], float] = field(default_factory=dict)
    assd_: dict[tuple[str, int], float] = field(default_factory=dict)

    def class_dice(self, c: int) -> np.ndarray:
        return np.array([self.dice[(s, c)] for s in self.scan_ids])

    def class_assd(self, c: int) -> np.ndarray:
        vals = np.array([self.assd_[(s, c)] for s in self.scan_ids])
        return vals[~np.isnan(vals)]

    def scan_mean_dice(self, s: str) -> float:
        return float(np.mean([self.dice[(s, c)] for c in self.class_ids]))

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.scan_mean_dice(s) for s in self.scan_ids]))

    def summary(self) -> dict[str, dict[str, float]]:
        """Aggregate mean/std per class plus overall row. Population std."""
        out: dict[str, dict[str, float]] = {}
        all_dice = []
        all_assd = []
        for c in self.class_ids:
            d = self.class_dice(c)
            a = self.class_assd(c)
            out[f"class_{c}"] = {
                "dice_mean": float(d.mean()),
                "dice_std": float(d.std()),
                "assd_mean": float(a.mean()) if len(a) else ASSD_UNDEFINED,
                "assd_std": float(a.std()) if len(a) else ASSD_UNDEFINED,
                "assd_undefined_count": float(len(self.scan_ids) - len(a)),
            }
            all_dice.append(d)
            all_assd.append(a)
        d = np.concatenate(all_dice)
        a = np.concatenate(all_assd)
        out["overall"] = {
            "dice_mean": float(d.mean()),
            "dice_std": float(d.std()),
            "assd_mean": float(a.mean()) if len(a) else ASSD_UNDEFINED,
            "assd_std": float(a.std()) if len(a) else ASSD_UNDEFINED,
            "assd_undefined_count": float(len(all_dice) * len(self.scan_ids) - len(a)),
        }
        return out

    def write_per_scan_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scan_id", "class", "dice", "assd"])
            for s in self.scan_ids:
                for c in self.class_ids:
                    a = self.assd_[(s, c)]
                    w.writerow([s, c, f"{self.dice[(s, c)]:.6f}",
                                "undefined" if np.isnan(a) else f"{a:.6f}"])

    def write_summary_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["row", "dice_mean", "dice_std", "assd_mean", "assd_std",
                        "assd_undefined_count"])
            for row, vals in self.summary().items():
                w.writerow([row] + [f"{vals[k]:.6f}" for k in
                                    ("dice_mean", "dice_std", "assd_mean", "assd_std")]
                           + [int(vals["assd_undefined_count"])])

    def format_table(self) -> str:
        """Plain-text table, one row per class plus overall, 'mean (std.)'."""
        lines = [f"{'row':<10} {'Dice':>16} {'ASSD [voxel]':>18}"]
        for row, v in self.summary().items():
            if np.isnan(v["assd_mean"]):
                a = "undefined"
            else:
                a = f"{v['assd_mean']:.2f} ({v['assd_std']:.2f})"
            lines.append(
                f"{row:<10} {v['dice_mean']*100:6.2f} ({v['dice_std']*100:.2f}) {a:>18}"
            )
        return "\n".join(lines)


def evaluate_scans(
    preds: list[np.ndarray],
    gts: list[np.ndarray],
    n_classes: int,
    scan_ids: list[str] | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    connectivity: int = 26,
    filter_pred: bool = True,
) -> MetricsReport:
    """Evaluate predicted label volumes against ground truth.

    For each foreground class the prediction is binarized and (by default)
    reduced to its largest connected component before Dice and ASSD.
    """
    if len(preds) != len(gts):
        raise ValueError("pred/gt scan counts differ")
    if scan_ids is None:
        scan_ids = [f"scan_{i:03d}" for i in range(len(preds))]
    class_ids = list(range(1, n_classes))
    report = MetricsReport(scan_ids=list(scan_ids), class_ids=class_ids)
    for sid, pred, gt in zip(scan_ids, preds, gts):
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch on {sid}: {pred.shape} vs {gt.shape}")
        for c in class_ids:
            p = pred == c
            g = gt == c
            if filter_pred:
                p = largest_component(p, connectivity=connectivity)
            report.dice[(sid, c)] = dice_3d(p, g)
            report.assd_[(sid, c)] = assd(p, g, spacing=spacing)
    return report
