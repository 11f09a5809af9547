"""Transformer encoder/decoder pair for the spherical latent autoencoder.

Images are NHWC tensors in ``[-1, 1]``; latents are ``(batch, h, w, d)`` grids
where ``h = w = image_size / patch_size``. Both networks are ViT stacks with
AdaLN-Zero conditioning, 2-D rotary attention and additive 2-D sinusoidal
position embeddings. MLP-Mixer layers sit at the tail of the encoder and the
head of the decoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, ConfigMismatch, DegenerateLatent, InvalidClass

NULL_CLASS = -1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 24
    channels: int = 3
    patch_size: int = 2
    hidden_size: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    mixer_depth: int = 2
    latent_channels: int = 8
    n_classes: int = 3
    cfg_null_drop_prob: float = 0.1
    mlp_ratio: float = 4.0
    rope_theta: float = 100.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.hidden_size % self.n_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by n_heads {self.n_heads}")
        if self.hidden_size % 4:
            raise ConfigError("hidden_size must be divisible by 4 for 2-D sinusoidal embeddings")
        if (self.hidden_size // self.n_heads) % 4:
            raise ConfigError("head dimension must be divisible by 4 for 2-D rotary embeddings")
        if self.n_classes < 0 or self.latent_channels < 1 or self.mixer_depth < 0 or self.n_blocks < 0:
            raise ConfigError("n_classes, latent_channels, mixer_depth and n_blocks must be non-negative")
        if not 0.0 <= self.cfg_null_drop_prob <= 1.0:
            raise ConfigError("cfg_null_drop_prob must lie in [0, 1]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def latent_shape(self) -> tuple:
        return (self.grid, self.grid, self.latent_channels)

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.latent_channels

    @property
    def compression_ratio(self) -> float:
        return self.image_size * self.image_size * self.channels / self.latent_dim

    @property
    def conditional(self) -> bool:
        return self.n_classes > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# positional encodings


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """``(grid*grid, dim)`` table; half the channels encode the row, half the column."""
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)


def rope_2d_tables(head_dim: int, grid: int, theta: float = 100.0):
    """Rotation angles for each token and rotated channel pair.

    The first half of the channel pairs rotate with the row index, the second
    half with the column index.
    """
    quarter = head_dim // 4
    freqs = 1.0 / theta ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    angles = np.concatenate([np.outer(rows.reshape(-1), freqs), np.outer(cols.reshape(-1), freqs)], axis=1)
    return np.cos(angles), np.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs of ``x`` (..., tokens, head_dim)."""
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack([out_even, out_odd], dim=-1).flatten(-2)


def build_positional(config: ModelConfig):
    """Sinusoidal absolute table and per-head rotary (cos, sin) tables for ``config``."""
    head_dim = config.hidden_size // config.n_heads
    cos, sin = rope_2d_tables(head_dim, config.grid, config.rope_theta)
    return sincos_2d(config.hidden_size, config.grid), cos, sin


# ---------------------------------------------------------------------------
# building blocks


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True) + self.eps)
        return x / rms * self.weight


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, rope):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        cos, sin = rope
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class AdaLNBlock(nn.Module):
    """Pre-norm transformer block with AdaLN-Zero modulation.

    The modulation projection is zero-initialized, so a fresh block returns its
    input unchanged whatever the condition.
    """

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ada = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, c, rope):
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.ada(F.silu(c)).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a), rope)
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


class MixerLayer(nn.Module):
    """Token-mixing MLP followed by channel-mixing MLP, both residual."""

    def __init__(self, n_tokens: int, dim: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.token_mlp = Mlp(n_tokens, n_tokens)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.channel_mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.token_mlp(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mlp(self.norm2(x))


def bound_norm(z: torch.Tensor, radius: float) -> torch.Tensor:
    """Rescale samples whose flattened norm exceeds ``radius``; others pass through."""
    norms = z.flatten(1).norm(dim=1)
    scale = torch.clamp(radius / norms.clamp_min(1e-30), max=1.0)
    return z * scale.view(-1, *([1] * (z.dim() - 1)))


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(t: torch.Tensor, p: int, grid: int, channels: int) -> torch.Tensor:
    B = t.shape[0]
    x = t.reshape(B, grid, grid, p, p, channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, grid * p, grid * p, channels)


class _Stack(nn.Module):
    """State shared by encoder and decoder: condition table and positional buffers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n_embed = config.n_classes + 1 if config.conditional else 1
        self.class_embed = nn.Embedding(n_embed, config.hidden_size)
        nn.init.normal_(self.class_embed.weight, std=0.02)
        pos, cos, sin = build_positional(config)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float()[None], persistent=False)
        self.register_buffer("rope_cos", torch.from_numpy(cos).float(), persistent=False)
        self.register_buffer("rope_sin", torch.from_numpy(sin).float(), persistent=False)
        self.blocks = nn.ModuleList(
            AdaLNBlock(config.hidden_size, config.n_heads, config.mlp_ratio) for _ in range(config.n_blocks)
        )

    def condition(self, y, batch: int) -> torch.Tensor:
        """Condition vectors for class ids ``y`` (``None`` or ``NULL_CLASS`` = null)."""
        cfg = self.config
        weight = self.class_embed.weight
        if not cfg.conditional:
            if y is not None and torch.any(torch.as_tensor(y) != NULL_CLASS):
                raise InvalidClass("unconditional model accepts no class ids")
            return weight[0].expand(batch, -1)
        if y is None:
            idx = torch.full((batch,), cfg.n_classes, dtype=torch.long)
        else:
            idx = torch.as_tensor(y, dtype=torch.long).reshape(-1).clone()
            if idx.numel() == 1 and batch > 1:
                idx = idx.expand(batch).clone()
            if idx.numel() != batch:
                raise ConfigMismatch(f"{idx.numel()} class ids for a batch of {batch}")
            bad = (idx < NULL_CLASS) | (idx >= cfg.n_classes)
            if torch.any(bad):
                raise InvalidClass(f"class ids must lie in [0, {cfg.n_classes}) or be {NULL_CLASS}")
            idx[idx == NULL_CLASS] = cfg.n_classes
        return self.class_embed(idx.to(weight.device))

    def run_blocks(self, h, c):
        rope = (self.rope_cos.to(h.dtype), self.rope_sin.to(h.dtype))
        for block in self.blocks:
            h = block(h, c, rope)
        return h


class Encoder(_Stack):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        p = config.patch_size
        self.patch_embed = nn.Linear(p * p * config.channels, config.hidden_size)
        self.mixers = nn.ModuleList(
            MixerLayer(config.n_tokens, config.hidden_size, config.mlp_ratio) for _ in range(config.mixer_depth)
        )
        self.to_latent = nn.Linear(config.hidden_size, config.latent_channels)
        self.latent_norm = RMSNorm(config.latent_channels)

    def forward(self, x, c):
        cfg = self.config
        h = self.patch_embed(patchify(x, cfg.patch_size)) + self.pos_embed.to(x.dtype)
        h = self.run_blocks(h, c)
        for mixer in self.mixers:
            h = mixer(h)
        z = self.latent_norm(self.to_latent(h))
        z = bound_norm(z, math.sqrt(cfg.latent_dim))
        return z.reshape(x.shape[0], *cfg.latent_shape)


class Decoder(_Stack):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        p = config.patch_size
        self.from_latent = nn.Linear(config.latent_channels, config.hidden_size)
        self.mixers = nn.ModuleList(
            MixerLayer(config.n_tokens, config.hidden_size, config.mlp_ratio) for _ in range(config.mixer_depth)
        )
        self.norm_out = nn.LayerNorm(config.hidden_size, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Linear(config.hidden_size, 2 * config.hidden_size)
        self.head = nn.Linear(config.hidden_size, p * p * config.channels)
        for layer in (self.ada_out, self.head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, v, c):
        cfg = self.config
        h = self.from_latent(v.reshape(v.shape[0], cfg.n_tokens, cfg.latent_channels))
        for mixer in self.mixers:
            h = mixer(h)
        h = self.run_blocks(h + self.pos_embed.to(h.dtype), c)
        shift, scale = self.ada_out(F.silu(c)).chunk(2, dim=-1)
        out = self.head(modulate(self.norm_out(h), shift, scale))
        return torch.tanh(unpatchify(out, cfg.patch_size, cfg.grid, cfg.channels))


class SphereAutoencoder(nn.Module):
    """Encoder ``E`` and decoder ``D`` with separate class embeddings."""

    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def _check_images(self, x):
        cfg = self.config
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigMismatch(f"expected images of shape (batch, {expected}), got {tuple(x.shape)}")

    def _check_latents(self, v):
        shape = tuple(self.config.latent_shape)
        if v.dim() == 2 and v.shape[1] == self.config.latent_dim:
            return v.reshape(v.shape[0], *shape)
        if v.dim() != 4 or tuple(v.shape[1:]) != shape:
            raise ConfigMismatch(f"expected latents of shape (batch, {shape}), got {tuple(v.shape)}")
        return v

    def encode(self, x, y=None, cond=None):
        """Pre-spherify latent grid ``z`` with flattened norm at most ``sqrt(L)``."""
        self._check_images(x)
        c = self.encoder.condition(y, x.shape[0]) if cond is None else cond
        return self.encoder(x, c.to(x.dtype))

    def decode(self, v, y=None, cond=None):
        v = self._check_latents(v)
        c = self.decoder.condition(y, v.shape[0]) if cond is None else cond
        return self.decoder(v, c.to(v.dtype))

    def forward(self, x, y=None):
        return self.decode(spherify_t(self.encode(x, y)), y)


def spherify_t(z: torch.Tensor) -> torch.Tensor:
    """Differentiable per-sample spherify for ``(batch, ...)`` tensors."""
    flat = z.flatten(1)
    norms = flat.norm(dim=1, keepdim=True)
    if torch.any(norms < 1e-12):
        raise DegenerateLatent("latent norm below 1e-12")
    return (flat * (math.sqrt(flat.shape[1]) / norms)).reshape(z.shape)


def noisy_spherify_t(v: torch.Tensor, e: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-sample ``spherify(v + sigma * e)``; rows with ``sigma == 0`` return ``v`` as is."""
    s = sigma.reshape(-1, *([1] * (v.dim() - 1))).to(v.dtype)
    out = spherify_t(v + s * e)
    keep = (sigma == 0).reshape(-1, *([1] * (v.dim() - 1)))
    return torch.where(keep, v, out)
