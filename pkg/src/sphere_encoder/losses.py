"""Training losses: smooth-L1 + perceptual pixel terms and the latent cosine term."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, DegenerateLatent


@dataclass(frozen=True)
class LossWeights:
    pix_recon_l1: float = 1.0
    pix_recon_perceptual: float = 1.0
    pix_con_l1: float = 0.5
    pix_con_perceptual: float = 0.5
    lat_con: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")


class FeatureExtractor(nn.Module):
    """Frozen random convolutional pyramid used as a perceptual feature map.

    Three stride-2 3x3 convolutions (16, 32, 64 channels) with GELU. Weights are
    drawn from a private generator seeded with ``seed`` and never trained.
    """

    widths = (16, 32, 64)

    def __init__(self, channels: int = 3, seed: int = 0):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c_in = channels
        for c_out in self.widths:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            self.convs.append(conv)
            c_in = c_out
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list:
        """Feature maps of every stage for NHWC images."""
        h = x.permute(0, 3, 1, 2)
        feats = []
        for conv in self.convs:
            h = F.gelu(conv(h))
            feats.append(h)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially averaged features concatenated over stages, ``(batch, 112)``."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self(x)], dim=1)


def _as_tensor(a):
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(a)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def smooth_l1(a, b, beta: float = 1.0) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b)
    return F.smooth_l1_loss(a, b, beta=beta)


def perceptual(a, b, fx) -> torch.Tensor:
    """Sum over feature stages of the mean squared feature difference.

    ``fx`` is any callable mapping an image batch to a list of feature tensors.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b)
    return sum(torch.mean((fa - fb) ** 2) for fa, fb in zip(fx(a), fx(b)))


def _pixel_loss(pred, target, w_l1, w_perceptual, fx):
    loss = pred.new_zeros(())
    if w_l1:
        loss = loss + w_l1 * smooth_l1(pred, target)
    if w_perceptual:
        loss = loss + w_perceptual * perceptual(pred, target, fx)
    return loss


def pix_recon_loss(x_hat_noisy, x, weights: LossWeights, fx) -> torch.Tensor:
    """Decode of the lightly-noised latent against the input image."""
    return _pixel_loss(x_hat_noisy, x, weights.pix_recon_l1, weights.pix_recon_perceptual, fx)


def pix_con_loss(x_hat_NOISY, x_hat_noisy, weights: LossWeights, fx) -> torch.Tensor:
    """Decode of the heavily-noised latent against the stop-gradient light decode."""
    return _pixel_loss(x_hat_NOISY, x_hat_noisy.detach(), weights.pix_con_l1, weights.pix_con_perceptual, fx)


def lat_con_loss(v, re_encoded) -> torch.Tensor:
    """Batch mean of ``1 - cos`` between flattened clean latents and re-encodings."""
    v, re_encoded = _as_tensor(v), _as_tensor(re_encoded)
    a = v.reshape(v.shape[0], -1) if v.dim() > 1 else v[None]
    b = re_encoded.reshape(re_encoded.shape[0], -1) if re_encoded.dim() > 1 else re_encoded[None]
    _check_shapes(a, b)
    nb = b.norm(dim=1)
    if torch.any(nb < 1e-12):
        raise DegenerateLatent("re-encoded latent has zero norm")
    cos = (a * b).sum(dim=1) / (a.norm(dim=1) * nb)
    return torch.mean(1.0 - cos)


def total_loss(terms: dict, weights: LossWeights) -> torch.Tensor:
    """Sum of the three terms; the pixel terms arrive already weighted."""
    return terms["pix_recon"] + terms["pix_con"] + weights.lat_con * terms["lat_con"]
