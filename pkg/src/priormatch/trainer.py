"""Two-phase training: supervised source pretraining, then domain adaptation
where only the target-specific front and tail are updated by target-route
losses. Each loss term back-propagates into exactly its documented parameter
set via requires-grad masking, and generator/discriminator updates alternate.
"""

from __future__ import annotations

import copy
import csv
import itertools
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses, nets, synthdata
from .losses import LossWeights, NonFiniteLossError, total_loss
from .metrics import evaluate_scans
from .nets import SOURCE, TARGET, NetworkSet
from .synthdata import AugmentationSpec, ConfigurationError, Volume

LOG_COLUMNS = ["step", "epoch", *losses.TOTAL_LOSS_TERMS, "disc", "total", "wall_ms"]

# parameter sets each objective term may update (generator side)
UPDATE_SETS = {
    "rec_s": {"e_s", "e_z", "d_z", "d_s"},
    "kl_s": {"e_s", "e_z"},
    "seg": {"seg", "e_z"},
    "adv_s": {"e_s", "e_z", "d_z", "d_s"},
    "rec_t": {"e_t", "d_t"},
    "kl_t": {"e_t"},
    "adv_t": {"e_t"},  # x_TS goes through the frozen shared/source decoders
    "cyc_t": {"e_t", "d_t"},
    "task_cyc": {"seg", "e_z"},
    "disc": {"disc"},
}


@dataclass
class TrainConfig:
    source_epochs: int = 25
    uda_epochs: int = 40
    batch_size: int = 16
    lr: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    background_weight: float = 0.2
    n_classes: int = 5
    disable_kl: bool = False
    disable_adv: bool = False
    eval_every: int = 1
    early_stop_patience: int = 0  # 0 disables early stopping
    test_time_latent: str = "mu"  # mu | sample
    kl_reduction: str = "mean"  # "sum" dominates training at this latent size
    adv_mode: str = "non_saturating"
    disc_steps: int = 1
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.source_epochs < 0 or self.uda_epochs < 0:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.test_time_latent not in ("mu", "sample"):
            raise ConfigurationError(f"bad test_time_latent {self.test_time_latent!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.deterministic else torch.float32

    def effective_weights(self) -> LossWeights:
        w = self.weights
        if self.disable_kl:
            w = replace(w, lambda_kl=0.0)
        if self.disable_adv:
            w = replace(w, lambda_adv=0.0)
        return w


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    loss_history: list[dict] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)
    best_val: float = -1.0
    best_epoch: int = -1


class Trainer:
    """Owns a NetworkSet, its optimizers, and the phase loops."""

    def __init__(self, net: NetworkSet, config: TrainConfig):
        self.net = net
        self.config = config
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        net.to(config.dtype)
        gen_params = [p for name, comp in net.components.items() if name != "disc"
                      for p in comp.parameters()]
        self.opt_gen = torch.optim.Adam(gen_params, lr=config.lr, betas=config.betas)
        self.opt_disc = torch.optim.Adam(net.disc.parameters(), lr=config.lr,
                                         betas=config.betas)
        self.class_weights = losses.make_class_weights(
            config.n_classes, config.background_weight, dtype=config.dtype)
        self.eps_rng = torch.Generator().manual_seed(config.seed)
        self.state = TrainState()
        self._log_writer = None
        self._log_file = None

    # -- plumbing ---------------------------------------------------------

    def open_log(self, path: str | Path) -> None:
        self._log_file = open(path, "w", newline="", encoding="utf-8")
        self._log_writer = csv.writer(self._log_file)
        self._log_writer.writerow(LOG_COLUMNS)

    def close_log(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
            self._log_writer = None

    def _log_row(self, terms: dict[str, float], disc_val: float, total: float,
                 wall_ms: float) -> None:
        row = {
            "step": self.state.step, "epoch": self.state.epoch,
            **{k: terms.get(k, 0.0) for k in losses.TOTAL_LOSS_TERMS},
            "disc": disc_val, "total": total, "wall_ms": wall_ms,
        }
        self.state.loss_history.append(row)
        if self._log_writer is not None:
            self._log_writer.writerow([f"{row[c]:.6f}" if isinstance(row[c], float)
                                       else row[c] for c in LOG_COLUMNS])
            self._log_file.flush()

    @contextmanager
    def _mask(self, allowed: set[str]):
        """Restrict which components receive gradients; restore afterwards."""
        for name, comp in self.net.components.items():
            comp.requires_grad_(name in allowed)
        try:
            yield
        finally:
            for comp in self.net.components.values():
                comp.requires_grad_(True)

    def _to_tensors(self, batch: tuple[np.ndarray, np.ndarray]
                    ) -> tuple[torch.Tensor, torch.Tensor]:
        imgs, lbls = batch
        return (torch.from_numpy(imgs).to(self.config.dtype),
                torch.from_numpy(lbls).long())

    def _sample(self, post: nets.LatentPosterior) -> torch.Tensor:
        return nets.sample(post, generator=self.eps_rng)

    # -- per-term computation --------------------------------------------

    def _source_terms(self, x_s: torch.Tensor, y_s: torch.Tensor,
                      include_adv: bool, terms: dict, fakes: list) -> None:
        """Eq. 1-3 on the source route, masked per term group."""
        with self._mask(UPDATE_SETS["rec_s"]):
            post = nets.encode(self.net, x_s, SOURCE)
            z_s = self._sample(post)
            x_ss = nets.decode(self.net, z_s, SOURCE)
            terms["rec_s"] = losses.recon_loss(x_ss, x_s)
            terms["kl_s"] = losses.kl_loss(post.mu, post.log_var,
                                           self.config.kl_reduction)
            if include_adv:
                terms["adv_s"] = losses.adv_loss_gen(
                    nets.discriminate(self.net, x_ss), self.config.adv_mode)
            fakes.append(x_ss.detach())
        with self._mask(UPDATE_SETS["seg"]):
            post = nets.encode(self.net, x_s, SOURCE)
            probs = nets.segment(self.net, self._sample(post))
            terms["seg"] = losses.seg_loss(probs, y_s, self.class_weights)

    def _target_terms(self, x_t: torch.Tensor, include_adv: bool,
                      terms: dict, fakes: list) -> None:
        """Eq. 4-6: target VAE, adversarial and cycle; only e_t/d_t updated."""
        with self._mask(UPDATE_SETS["rec_t"]):
            post_t = nets.encode(self.net, x_t, TARGET)
            z_t = self._sample(post_t)
            x_tt = nets.decode(self.net, z_t, TARGET)
            terms["rec_t"] = losses.recon_loss(x_tt, x_t)
            terms["kl_t"] = losses.kl_loss(post_t.mu, post_t.log_var,
                                           self.config.kl_reduction)
            x_ts = nets.decode(self.net, z_t, SOURCE)
            if include_adv:
                terms["adv_t"] = losses.adv_loss_gen(
                    nets.discriminate(self.net, x_ts), self.config.adv_mode)
            post_back = nets.encode(self.net, x_ts, SOURCE)
            x_tst = nets.decode(self.net, self._sample(post_back), TARGET)
            terms["cyc_t"] = losses.cycle_loss(x_tst, x_t)
            fakes.append(x_ts.detach())

    def _task_consistency_term(self, x_s: torch.Tensor, y_s: torch.Tensor,
                               terms: dict) -> None:
        """Eq. 7: segment latents of source images translated to the target
        domain; updates seg and the shared encoder tail."""
        with self._mask(UPDATE_SETS["task_cyc"]):
            post_s = nets.encode(self.net, x_s, SOURCE)
            x_st = nets.decode(self.net, self._sample(post_s), TARGET)
            post_st = nets.encode(self.net, x_st, TARGET)
            probs = nets.segment(self.net, self._sample(post_st))  # fresh eps
            terms["task_cyc"] = losses.task_consistency_loss(
                probs, y_s, self.class_weights)

    def _oracle_terms(self, x_t: torch.Tensor, y_t: torch.Tensor,
                      terms: dict) -> None:
        """Supervised Eq. 1+2 through the target route (fine-tuning bound)."""
        with self._mask({"e_t", "e_z", "d_z", "d_t"}):
            post = nets.encode(self.net, x_t, TARGET)
            z_t = self._sample(post)
            x_tt = nets.decode(self.net, z_t, TARGET)
            terms["rec_t"] = losses.recon_loss(x_tt, x_t)
            terms["kl_t"] = losses.kl_loss(post.mu, post.log_var,
                                           self.config.kl_reduction)
        with self._mask(UPDATE_SETS["seg"] | {"e_t"}):
            post = nets.encode(self.net, x_t, TARGET)
            probs = nets.segment(self.net, self._sample(post))
            terms["seg"] = losses.seg_loss(probs, y_t, self.class_weights)

    def _disc_step(self, x_real: torch.Tensor, fakes: list) -> float:
        if not fakes:
            return 0.0
        value = 0.0
        for _ in range(self.config.disc_steps):
            with self._mask(UPDATE_SETS["disc"]):
                self.opt_disc.zero_grad(set_to_none=True)
                scores_real = nets.discriminate(self.net, x_real)
                scores_fake = nets.discriminate(self.net, torch.cat(fakes))
                loss_d = losses.adv_loss_disc(scores_real, scores_fake)
                loss_d.backward()
                self.opt_disc.step()
            value = float(loss_d.detach())
        return value

    # -- one optimization step -------------------------------------------

    def _step(self, compute_terms, x_real_for_disc: torch.Tensor | None,
              adversarial: bool) -> None:
        t0 = time.perf_counter()
        weights = self.config.effective_weights()
        terms: dict[str, torch.Tensor] = {}
        fakes: list[torch.Tensor] = []
        self.opt_gen.zero_grad(set_to_none=True)
        compute_terms(terms, fakes)
        total = total_loss(terms, weights)  # raises on non-finite terms
        total.backward()
        self.opt_gen.step()
        disc_val = 0.0
        if adversarial and x_real_for_disc is not None:
            disc_val = self._disc_step(x_real_for_disc, fakes)
        self.state.step += 1
        scalars = {k: float(v.detach()) for k, v in terms.items()}
        self._log_row(scalars, disc_val, float(total.detach()),
                      (time.perf_counter() - t0) * 1000.0)

    # -- evaluation and early stopping -----------------------------------

    def evaluate(self, volumes: list[Volume]) -> float:
        preds = [infer(self.net, v, self.config) for v in volumes]
        gts = [v.labels for v in volumes]
        report = evaluate_scans(preds, gts, self.config.n_classes,
                                scan_ids=[v.scan_id for v in volumes])
        return report.mean_dice

    def _phase_loop(self, epochs: int, make_step, val_volumes, eval_log=None):
        """Run epochs of make_step(epoch), with periodic validation and
        optional early stopping (restores the best snapshot)."""
        cfg = self.config
        best_snapshot = None
        stale = 0
        start = self.state.epoch
        next_epoch = start
        for epoch in range(start, start + epochs):
            self.state.epoch = epoch
            make_step(epoch)
            next_epoch = epoch + 1
            if val_volumes and (epoch + 1) % cfg.eval_every == 0:
                dice = self.evaluate(val_volumes)
                self.state.eval_history.append((epoch, dice))
                if eval_log is not None:
                    eval_log.writerow([epoch, f"{dice:.6f}"])
                if dice > self.state.best_val:
                    self.state.best_val = dice
                    self.state.best_epoch = epoch
                    stale = 0
                    if cfg.early_stop_patience > 0:
                        best_snapshot = copy.deepcopy(self.net.state_dict())
                else:
                    stale += 1
                    if cfg.early_stop_patience > 0 and stale >= cfg.early_stop_patience:
                        break
        self.state.epoch = next_epoch
        if best_snapshot is not None:
            self.net.load_state_dict(best_snapshot)

    # -- phases -----------------------------------------------------------

    def train_source(self, source_volumes: list[Volume],
                     val_volumes: list[Volume] | None = None,
                     eval_log=None) -> TrainState:
        """Supervised source phase: Eq. 1 + 2 + 3 with discriminator
        pretraining on real-vs-reconstructed source images."""
        cfg = self.config

        def run_epoch(epoch: int):
            for batch in synthdata.iterate_batches(
                    source_volumes, cfg.batch_size, cfg.seed, epoch,
                    cfg.augmentation):
                x_s, y_s = self._to_tensors(batch)
                adv = not cfg.disable_adv

                def compute(terms, fakes):
                    self._source_terms(x_s, y_s, include_adv=adv,
                                       terms=terms, fakes=fakes)

                self._step(compute, x_s, adversarial=adv)

        self._phase_loop(cfg.source_epochs, run_epoch, val_volumes, eval_log)
        return self.state

    def adapt(self, source_volumes: list[Volume], target_volumes: list[Volume],
              val_volumes: list[Volume] | None = None,
              eval_log=None) -> TrainState:
        """UDA phase: Eq. 1-7 combined per Eq. 8; target-route losses update
        only the target front/tail, task-consistency updates seg + shared
        encoder, and the discriminator sees {x_S} vs {x_SS} u {x_TS}."""
        cfg = self.config
        if not target_volumes or sum(v.depth for v in target_volumes) == 0:
            raise ConfigurationError("adaptation needs at least one target volume")

        def run_epoch(epoch: int):
            source_batches = synthdata.iterate_batches(
                source_volumes, cfg.batch_size, cfg.seed, epoch, cfg.augmentation)
            target_batches = itertools.cycle(list(synthdata.iterate_batches(
                target_volumes, cfg.batch_size, cfg.seed + 1, epoch,
                cfg.augmentation)))
            for sbatch in source_batches:
                x_s, y_s = self._to_tensors(sbatch)
                x_t, _ = self._to_tensors(next(target_batches))
                adv = not cfg.disable_adv

                def compute(terms, fakes):
                    self._source_terms(x_s, y_s, include_adv=adv,
                                       terms=terms, fakes=fakes)
                    self._target_terms(x_t, include_adv=adv,
                                       terms=terms, fakes=fakes)
                    self._task_consistency_term(x_s, y_s, terms)

                self._step(compute, x_s, adversarial=adv)

        self._phase_loop(cfg.uda_epochs, run_epoch, val_volumes, eval_log)
        return self.state

    def finetune_oracle(self, target_volumes: list[Volume],
                        val_volumes: list[Volume] | None = None,
                        epochs: int | None = None, eval_log=None) -> TrainState:
        """Supervised fine-tuning on labelled target volumes (upper bound)."""
        cfg = self.config
        n_epochs = cfg.uda_epochs if epochs is None else epochs

        def run_epoch(epoch: int):
            for batch in synthdata.iterate_batches(
                    target_volumes, cfg.batch_size, cfg.seed, epoch,
                    cfg.augmentation):
                x_t, y_t = self._to_tensors(batch)

                def compute(terms, fakes):
                    self._oracle_terms(x_t, y_t, terms)

                self._step(compute, None, adversarial=False)

        self._phase_loop(n_epochs, run_epoch, val_volumes, eval_log)
        return self.state

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        extra = {
            "opt_gen": self.opt_gen.state_dict(),
            "opt_disc": self.opt_disc.state_dict(),
            "eps_rng": self.eps_rng.get_state(),
            "epoch": self.state.epoch,
            "best_val": self.state.best_val,
            "best_epoch": self.state.best_epoch,
        }
        nets.save_checkpoint(self.net, path, step=self.state.step, extra=extra)

    @classmethod
    def load_checkpoint(cls, path: str | Path, config: TrainConfig) -> "Trainer":
        net, step, extra = nets.load_checkpoint(path, dtype=config.dtype)
        trainer = cls(net, config)
        trainer.opt_gen.load_state_dict(extra["opt_gen"])
        trainer.opt_disc.load_state_dict(extra["opt_disc"])
        trainer.eps_rng.set_state(extra["eps_rng"])
        trainer.state.step = step
        trainer.state.epoch = int(extra.get("epoch", 0))
        trainer.state.best_val = float(extra.get("best_val", -1.0))
        trainer.state.best_epoch = int(extra.get("best_epoch", -1))
        return trainer


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer(net: NetworkSet, volume: Volume, config: TrainConfig,
          route: str | None = None,
          generator: torch.Generator | None = None) -> np.ndarray:
    """Predict a 3D label volume slice by slice.

    Routes through the encoder matching the volume's modality unless
    overridden. Uses the posterior mean by default (deterministic).
    """
    domain = route or volume.modality_id
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"unknown route {domain!r}")
    dtype = config.dtype
    out = np.zeros(volume.labels.shape, dtype=np.uint8)
    with torch.no_grad():
        for iz in range(volume.depth):
            x = torch.from_numpy(volume.images[iz]).to(dtype)[None, None]
            post = nets.encode(net, x, domain)
            if config.test_time_latent == "mu":
                z = post.mu
            else:
                z = nets.sample(post, generator=generator)
            probs = nets.segment(net, z)
            out[iz] = probs.argmax(dim=1)[0].numpy().astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# Spec-level convenience wrappers
# ---------------------------------------------------------------------------

def train_source(net: NetworkSet, source_volumes: list[Volume],
                 config: TrainConfig,
                 val_volumes: list[Volume] | None = None) -> TrainState:
    trainer = Trainer(net, config)
    return trainer.train_source(source_volumes, val_volumes)


def adapt(net: NetworkSet, source_volumes: list[Volume],
          target_volumes: list[Volume], config: TrainConfig,
          val_volumes: list[Volume] | None = None) -> TrainState:
    trainer = Trainer(net, config)
    return trainer.adapt(source_volumes, target_volumes, val_volumes)


def finetune_oracle(net: NetworkSet, target_volumes: list[Volume],
                    config: TrainConfig,
                    val_volumes: list[Volume] | None = None) -> TrainState:
    trainer = Trainer(net, config)
    return trainer.finetune_oracle(target_volumes, val_volumes)
