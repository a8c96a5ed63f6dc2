"""Training loss terms: VAE reconstruction + KL prior, segmentation
(soft Dice + weighted cross-entropy), adversarial, one-sided cycle and
task-consistency, and the weighted total objective.

All functions are pure and differentiable through their tensor arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DICE_EPS = 1e-5
PROB_FLOOR = 1e-12


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN or inf; names the offending term."""


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_kl: float = 0.1
    lambda_seg: float = 1.0
    lambda_adv: float = 1.0
    lambda_cyc: float = 10.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


def make_class_weights(n_classes: int, background_weight: float = 0.2,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Per-class CE weights: down-weighted background, normalized to mean 1."""
    w = torch.ones(n_classes, dtype=dtype)
    w[0] = background_weight
    return w / w.mean()


def recon_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over batch and pixels (Laplace log-likelihood)."""
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return (x_hat - x).abs().mean()


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor,
            reduction: str = "sum") -> torch.Tensor:
    """KL(q || N(0, I)) for a diagonal Gaussian posterior.

    Elementwise 0.5 * (mu^2 + sigma^2 - log sigma^2 - 1). With
    reduction="sum", summed over all latent axes and averaged over the
    batch; with reduction="mean", averaged over every element.
    """
    per_elem = 0.5 * (mu.pow(2) + log_var.exp() - log_var - 1.0)
    if reduction == "sum":
        return per_elem.reshape(per_elem.shape[0], -1).sum(dim=1).mean()
    if reduction == "mean":
        return per_elem.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def soft_dice(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean soft Dice over foreground classes, pooled over batch and pixels."""
    n_classes = probs.shape[1]
    one_hot = torch.nn.functional.one_hot(y, n_classes).permute(0, 3, 1, 2)
    one_hot = one_hot.to(probs.dtype)
    p = probs[:, 1:].transpose(0, 1).reshape(n_classes - 1, -1)
    g = one_hot[:, 1:].transpose(0, 1).reshape(n_classes - 1, -1)
    inter = (p * g).sum(dim=1)
    dice = (2 * inter + DICE_EPS) / (p.sum(dim=1) + g.sum(dim=1) + DICE_EPS)
    return dice.mean()


def seg_loss(probs: torch.Tensor, y: torch.Tensor,
             class_weights: torch.Tensor) -> torch.Tensor:
    """(1 - soft Dice over foreground classes) + weighted cross-entropy."""
    if probs.dim() != 4 or y.dim() != 3:
        raise ValueError("expected probs (B, K, H, W) and labels (B, H, W)")
    n_classes = probs.shape[1]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels out of range [0, {n_classes})")
    dice_term = 1.0 - soft_dice(probs, y)
    log_p = torch.log(probs.clamp_min(PROB_FLOOR))
    picked = log_p.gather(1, y.unsqueeze(1)).squeeze(1)
    w = class_weights.to(probs.dtype)[y]
    ce_term = -(w * picked).mean()
    return dice_term + ce_term


def _check_scores(scores: torch.Tensor, name: str) -> None:
    if scores.numel() and ((scores <= 0).any() or (scores >= 1).any()):
        raise ValueError(f"{name} scores must lie strictly in (0, 1)")


def adv_loss_disc(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: negated E[log D(real)] + E[log(1 - D(fake))]."""
    _check_scores(scores_real, "real")
    _check_scores(scores_fake, "fake")
    return -(torch.log(scores_real).mean() + torch.log1p(-scores_fake).mean())


def adv_loss_gen(scores_fake: torch.Tensor, mode: str = "non_saturating") -> torch.Tensor:
    """Generator-side adversarial loss.

    Non-saturating -E[log D(fake)] by default; "minimax" gives the literal
    E[log(1 - D(fake))] form.
    """
    _check_scores(scores_fake, "fake")
    if mode == "non_saturating":
        return -torch.log(scores_fake).mean()
    if mode == "minimax":
        return torch.log1p(-scores_fake).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def cycle_loss(x_back: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """L1 between the round-trip translation and the original image."""
    return recon_loss(x_back, x)


def task_consistency_loss(probs_st: torch.Tensor, y_s: torch.Tensor,
                          class_weights: torch.Tensor) -> torch.Tensor:
    """Segmentation loss on latents of source images translated to the target
    domain, against the original source labels."""
    return seg_loss(probs_st, y_s, class_weights)


TOTAL_LOSS_TERMS = ("rec_s", "rec_t", "kl_s", "kl_t", "seg", "task_cyc",
                    "adv_s", "adv_t", "cyc_t")


def total_loss(terms: dict[str, torch.Tensor | float],
               weights: LossWeights) -> torch.Tensor | float:
    """Weighted training objective over all component terms.

    Missing terms count as zero. Raises NonFiniteLossError naming the first
    non-finite term.
    """
    vals = {}
    for name in TOTAL_LOSS_TERMS:
        v = terms.get(name, 0.0)
        scalar = float(v) if not torch.is_tensor(v) else float(v.detach())
        if not math.isfinite(scalar):
            raise NonFiniteLossError(f"loss term {name!r} is non-finite ({scalar})")
        vals[name] = v
    w = weights
    return (
        w.lambda_rec * (vals["rec_s"] + vals["rec_t"])
        + w.lambda_kl * (vals["kl_s"] + vals["kl_t"])
        + w.lambda_seg * (vals["seg"] + vals["task_cyc"])
        + w.lambda_adv * (vals["adv_s"] + vals["adv_t"])
        + w.lambda_cyc * vals["cyc_t"]
    )
