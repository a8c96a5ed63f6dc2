"""Network components: domain encoders/decoders around a shared latent VAE,
a dilated residual segmenter on the latent space, and a patch discriminator.

A forward pass routes through exactly one domain front (source or target) plus
the shared tail, so domain-specific and shared parameters stay disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

SOURCE = "source"
TARGET = "target"

LOG_VAR_CLAMP = 10.0


@dataclass(frozen=True)
class NetConfig:
    image_channels: int = 1
    n_classes: int = 5
    base_channels: int = 16
    latent_channels: int = 32
    seg_channels: int = 24
    seg_dilations: tuple[int, ...] = (1, 1, 2, 2, 4, 4, 1, 1)
    disc_channels: int = 16
    disc_layers: int = 3


TINY_CONFIG = NetConfig(base_channels=4, latent_channels=4, seg_channels=4,
                        seg_dilations=(1, 2), disc_channels=4, disc_layers=2)


@dataclass
class LatentPosterior:
    """Diagonal Gaussian over the latent map: mu and log-variance, same shape."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu/log_var shape mismatch")


class ResBlock(nn.Module):
    def __init__(self, channels: int, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class DomainEncoder(nn.Module):
    """Two strided conv stages, x4 spatial downsample."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv2d(cfg.image_channels, c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class SharedEncoder(nn.Module):
    """Residual tail ending in parallel 1x1 mu / log-var heads."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = 2 * cfg.base_channels
        self.blocks = nn.Sequential(ResBlock(c), ResBlock(c))
        self.mu_head = nn.Conv2d(c, cfg.latent_channels, 1)
        self.log_var_head = nn.Conv2d(c, cfg.latent_channels, 1)

    def forward(self, h) -> LatentPosterior:
        h = self.blocks(h)
        mu = self.mu_head(h)
        log_var = torch.clamp(self.log_var_head(h), -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return LatentPosterior(mu=mu, log_var=log_var)


class SharedDecoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = 2 * cfg.base_channels
        self.inp = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, c, 3, padding=1),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(ResBlock(c), ResBlock(c))

    def forward(self, z):
        return self.blocks(self.inp(z))


class DomainDecoder(nn.Module):
    """Two transposed-conv stages, sigmoid-bounded output in [0, 1]."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c, c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, cfg.image_channels, 3, padding=1),
        )

    def forward(self, h):
        return torch.sigmoid(self.net(h))


class DilatedSegmenter(nn.Module):
    """Dilated residual blocks at latent resolution, classifier, x4 upsample."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.seg_channels
        self.inp = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, c, 3, padding=1),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResBlock(c, d) for d in cfg.seg_dilations])
        self.classifier = nn.Conv2d(c, cfg.n_classes, 1)

    def forward(self, z):
        logits = self.classifier(self.blocks(self.inp(z)))
        return F.interpolate(logits, scale_factor=4, mode="bilinear", align_corners=False)


class Discriminator(nn.Module):
    """Strided conv stack to a per-image realness score in (0, 1).

    No normalization in the first layer.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.disc_channels
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.image_channels, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = c
        for _ in range(cfg.disc_layers - 1):
            layers += [
                nn.Conv2d(ch, 2 * c, 4, stride=2, padding=1),
                nn.InstanceNorm2d(2 * c, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = 2 * c
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.net(x).mean(dim=(1, 2, 3)))


class NetworkSet(nn.Module):
    """All eight trainable components, with disjoint parameter sets."""

    def __init__(self, cfg: NetConfig | None = None,
                 dtype: torch.dtype = torch.float32, seed: int = 0):
        super().__init__()
        self.cfg = cfg or NetConfig()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.e_s = DomainEncoder(self.cfg)
            self.e_t = DomainEncoder(self.cfg)
            self.e_z = SharedEncoder(self.cfg)
            self.d_z = SharedDecoder(self.cfg)
            self.d_s = DomainDecoder(self.cfg)
            self.d_t = DomainDecoder(self.cfg)
            self.seg = DilatedSegmenter(self.cfg)
            self.disc = Discriminator(self.cfg)
        self.to(dtype)

    @property
    def components(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name)
                for name in ("e_s", "e_t", "e_z", "d_z", "d_s", "d_t", "seg", "disc")}


def _front(net: NetworkSet, domain: str) -> nn.Module:
    if domain == SOURCE:
        return net.e_s
    if domain == TARGET:
        return net.e_t
    raise ValueError(f"unknown domain {domain!r}")


def encode(net: NetworkSet, x: torch.Tensor, domain: str) -> LatentPosterior:
    """Posterior over the latent map at x4 downsampled resolution."""
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ValueError(f"spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
    return net.e_z(_front(net, domain)(x))


def sample(post: LatentPosterior, generator: torch.Generator | None = None,
           eps: torch.Tensor | None = None) -> torch.Tensor:
    """Reparameterized draw z = mu + exp(log_var / 2) * eps, eps ~ N(0, I).

    Pass eps explicitly to pin the noise (eps=0 returns mu exactly).
    """
    if eps is None:
        eps = torch.randn(post.mu.shape, generator=generator,
                          dtype=post.mu.dtype, device=post.mu.device)
    return post.mu + torch.exp(0.5 * post.log_var) * eps


def decode(net: NetworkSet, z: torch.Tensor, domain: str) -> torch.Tensor:
    """Image in [0, 1] at full resolution from a latent-resolution tensor."""
    if z.shape[1] != net.cfg.latent_channels:
        raise ValueError(f"expected {net.cfg.latent_channels} latent channels, "
                         f"got {z.shape[1]}")
    tail = net.d_s if domain == SOURCE else net.d_t if domain == TARGET else None
    if tail is None:
        raise ValueError(f"unknown domain {domain!r}")
    return tail(net.d_z(z))


def segment_logits(net: NetworkSet, z: torch.Tensor) -> torch.Tensor:
    return net.seg(z)


def segment(net: NetworkSet, z: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities at full resolution (softmax over classes)."""
    return torch.softmax(segment_logits(net, z), dim=1)


def discriminate(net: NetworkSet, x: torch.Tensor) -> torch.Tensor:
    """Realness score strictly in (0, 1), one scalar per sample."""
    return net.disc(x)


def grad_check(component: nn.Module, loss_fn, n_params: int = 50,
               step: float = 1e-5, generator: torch.Generator | None = None) -> float:
    """Central finite differences vs autograd on randomly chosen parameters.

    loss_fn takes no arguments and returns a scalar tensor through the
    component's current parameters. Returns the max relative error. Use a
    float64 component for tight tolerances.
    """
    params = [p for p in component.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    flat_grads = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in params
    ])
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    idx = torch.randperm(total, generator=generator)[:min(n_params, total)]
    max_rel = 0.0
    with torch.no_grad():
        flats = [p.reshape(-1) for p in params]
        offsets = torch.cumsum(torch.tensor([0] + sizes), 0)
        for i in idx.tolist():
            pi = int(torch.searchsorted(offsets, i, right=True)) - 1
            j = i - int(offsets[pi])
            orig = flats[pi][j].item()
            flats[pi][j] = orig + step
            up = loss_fn().item()
            flats[pi][j] = orig - step
            down = loss_fn().item()
            flats[pi][j] = orig
            fd = (up - down) / (2 * step)
            ad = flat_grads[i].item()
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# Checkpointing: binary parameter blob + UTF-8 manifest
# ---------------------------------------------------------------------------

def save_checkpoint(net: NetworkSet, path: str | Path, step: int = 0,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "cfg": net.cfg.__dict__,
        "state": net.state_dict(),
        "step": step,
        "extra": extra or {},
    }
    torch.save(payload, path)
    lines = [f"step={step}"]
    for name, comp in net.components.items():
        n = sum(p.numel() for p in comp.parameters())
        shapes = ";".join("x".join(map(str, p.shape)) for p in comp.parameters())
        lines.append(f"{name}.params={n}")
        lines.append(f"{name}.shapes={shapes}")
    for k, v in (extra or {}).items():
        if isinstance(v, (str, int, float)):
            lines.append(f"{k}={v}")
    path.with_suffix(path.suffix + ".manifest").write_text(
        "\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32
                    ) -> tuple[NetworkSet, int, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    net = NetworkSet(NetConfig(**payload["cfg"]), dtype=dtype)
    net.load_state_dict(payload["state"])
    net.to(dtype)
    return net, int(payload["step"]), payload["extra"]
