"""One-step and few-step generation, reconstruction and training-free editing.

All entry points take the model in inference mode, draw randomness from
``numpy.random.default_rng(plan.seed)`` and return NHWC float32 arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import geometry
from .exceptions import ConfigMismatch, InvalidClass, NonFiniteSample
from .network import NULL_CLASS, SphereAutoencoder, noisy_spherify_t, spherify_t

CFG_POSITIONS = ("none", "enc", "dec", "combo")


@dataclass(frozen=True)
class SamplerPlan:
    """Few-step sampling schedule.

    Defaults follow the best reported scheme: fixed noise strength (``gamma=0``)
    with one noise vector shared by every refinement step.
    """

    steps: int = 1
    gamma: float = 0.0
    share_noise: bool = True
    cfg_scale: float = 1.0
    cfg_position: str = "none"
    truncation: Optional[float] = None
    r_override: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.cfg_position not in CFG_POSITIONS:
            raise ValueError(f"cfg_position must be one of {CFG_POSITIONS}")

    @property
    def enc_cfg(self) -> bool:
        return self.cfg_position in ("enc", "combo")

    @property
    def dec_cfg(self) -> bool:
        return self.cfg_position in ("dec", "combo")

    @property
    def position_scale(self) -> float:
        """Scale applied at each active position (square root of the total for combo)."""
        return math.sqrt(self.cfg_scale) if self.cfg_position == "combo" else self.cfg_scale

    @property
    def nfe(self) -> int:
        """Network forward passes: one decoder pass per step, one encoder pass per
        refinement step, each doubled where guidance is active."""
        return self.steps * (1 + self.dec_cfg) + (self.steps - 1) * (1 + self.enc_cfg)


@dataclass(frozen=True)
class StitchSpec:
    """Hard pixel stitch: ``a`` on the left/top, ``b`` on the right/bottom."""

    split: str = "left-right"
    boundary: float = 0.5

    def __post_init__(self):
        if self.split not in ("left-right", "top-bottom"):
            raise ValueError("split must be 'left-right' or 'top-bottom'")
        if not 0.0 <= self.boundary <= 1.0:
            raise ValueError("boundary must lie in [0, 1]")


_EDIT_DEFAULTS = {
    "manipulate": {"r": 1.0, "gamma": 0.0, "steps": 4},
    "crossover": {"r": 0.25, "gamma": 1.0, "steps": 10},
}


@dataclass(frozen=True)
class EditPlan:
    mode: str = "manipulate"
    target_class: Optional[int] = None
    steps: Optional[int] = None
    r: Optional[float] = None
    gamma: Optional[float] = None
    share_noise: bool = True
    stitch: StitchSpec = field(default_factory=StitchSpec)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _EDIT_DEFAULTS:
            raise ValueError(f"edit mode must be one of {tuple(_EDIT_DEFAULTS)}")
        for key, value in _EDIT_DEFAULTS[self.mode].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.mode == "crossover" and self.steps > 10:
            raise ValueError("crossover uses at most 10 steps")


def decay_r(t: int, T: int, gamma: float) -> float:
    """Noise strength at refinement step ``t`` (2..T) of a ``T``-step run."""
    if T < 2:
        raise ValueError("decay schedule needs T >= 2")
    if not 2 <= t <= T:
        raise ValueError(f"step t={t} outside [2, {T}]")
    return (1.0 - (t - 1) / (T - 1)) ** gamma


def apply_cfg(cond, uncond, s: float):
    """``uncond + s * (cond - uncond)``; exact passthrough at ``s`` of 1 or 0."""
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    if s == 1:
        return cond
    if s == 0:
        return uncond
    return uncond + s * (cond - uncond)


# ---------------------------------------------------------------------------
# core loop


@dataclass
class _Conditions:
    enc: torch.Tensor
    dec: torch.Tensor
    enc_null: Optional[torch.Tensor] = None
    dec_null: Optional[torch.Tensor] = None


def _conditions(model: SphereAutoencoder, y, n: int, need_null: bool) -> _Conditions:
    if y is not None and not model.config.conditional:
        if np.any(np.asarray(y) != NULL_CLASS):
            raise InvalidClass("unconditional model accepts no class ids")
        y = None
    if y is not None:
        y = torch.as_tensor(np.broadcast_to(np.asarray(y, np.int64), (n,)).copy())
    c = _Conditions(model.encoder.condition(y, n), model.decoder.condition(y, n))
    if need_null:
        if not model.config.conditional:
            raise ConfigMismatch("classifier-free guidance needs a class-conditional model")
        c.enc_null = model.encoder.condition(None, n)
        c.dec_null = model.decoder.condition(None, n)
    return c


def _decode(model, v, cond: _Conditions, plan_scale: float, guided: bool):
    x = model.decode(v, cond=cond.dec)
    if guided:
        x = apply_cfg(x, model.decode(v, cond=cond.dec_null), plan_scale)
    return x


def _encode(model, x, cond: _Conditions, plan_scale: float, guided: bool):
    z = model.encode(x, cond=cond.enc)
    if guided:
        z = apply_cfg(z, model.encode(x, cond=cond.enc_null), plan_scale)
    return z


def _refine(model, x, cond, n_steps, sigma_max, r_of_step, noise, enc_cfg=False, dec_cfg=False, scale=1.0,
            callback=None, first_t=2):
    """``n_steps`` rounds of encode -> noisy spherify -> decode.

    ``noise(t)`` returns the noise tensor for step ``t``; ``r_of_step(t)`` the strength.
    """
    for k in range(n_steps):
        t = first_t + k
        z = _encode(model, x, cond, scale, enc_cfg)
        r = r_of_step(t)
        e = noise(t)
        if callback is not None:
            callback(t, e, r)
        v = spherify_t(z)
        sigma = torch.full((v.shape[0],), r * sigma_max, dtype=v.dtype)
        v = noisy_spherify_t(v, e.reshape(v.shape).to(v.dtype), sigma)
        x = _decode(model, v, cond, scale, dec_cfg)
    return x


def _check_finite(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().cpu().numpy().astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteSample("model produced non-finite pixels")
    return arr


def _noise_source(L, rng, n, share, first):
    drawn = {}

    def noise(t):
        if share:
            return first
        if t not in drawn:
            drawn[t] = torch.from_numpy(geometry.sample_prior(L, rng, size=n)).float()
        return drawn[t]

    return noise


def generate(model: SphereAutoencoder, n: int, y=None, plan: SamplerPlan = SamplerPlan(),
             sigma_max: float = geometry.angle_to_sigma(80.0), batch_size: int = 128,
             callback: Optional[Callable] = None) -> np.ndarray:
    """Decode random sphere points and optionally refine them ``plan.steps - 1`` times.

    ``y`` is ``None`` (null / unconditional), one class id for every sample, or one
    id per sample. ``callback(t, e, r)`` sees the noise tensor and strength of every
    refinement step.
    """
    model.eval()
    rng = np.random.default_rng(plan.seed)
    cfg = model.config
    L = cfg.latent_dim
    y_all = None if y is None else np.broadcast_to(np.asarray(y, np.int64), (n,))
    out = []
    need_null = plan.cfg_position != "none"
    scale = plan.position_scale

    def r_of_step(t):
        if plan.r_override is not None:
            return plan.r_override
        return decay_r(t, plan.steps, plan.gamma)

    with torch.no_grad():
        for start in range(0, n, batch_size):
            m = min(batch_size, n - start)
            cond = _conditions(model, None if y_all is None else y_all[start:start + m], m, need_null)
            e = torch.from_numpy(geometry.sample_prior(L, rng, size=m, truncation=plan.truncation)).float()
            v = spherify_t(e).reshape(m, *cfg.latent_shape)
            x = _decode(model, v, cond, scale, plan.dec_cfg)
            noise = _noise_source(L, rng, m, plan.share_noise, e)
            x = _refine(model, x, cond, plan.steps - 1, sigma_max, r_of_step, noise,
                        plan.enc_cfg, plan.dec_cfg, scale, callback)
            out.append(_check_finite(x))
    return np.concatenate(out) if out else np.empty((0, cfg.image_size, cfg.image_size, cfg.channels), np.float32)


def encode_sphere(model: SphereAutoencoder, x, y=None, batch_size: int = 256) -> np.ndarray:
    """Sphere latents ``spherify(E(x, y))`` as ``(n, L)``; ``y=None`` uses the null embedding."""
    model.eval()
    x = np.asarray(x, np.float32)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = torch.from_numpy(x[start:start + batch_size])
            yb = None if y is None else torch.as_tensor(np.broadcast_to(np.asarray(y, np.int64), (len(x),))[start:start + len(xb)].copy())
            out.append(spherify_t(model.encode(xb, yb)).reshape(len(xb), -1).numpy())
    return np.concatenate(out)


def decode_sphere(model: SphereAutoencoder, v, y=None, batch_size: int = 256) -> np.ndarray:
    model.eval()
    v = np.asarray(v, np.float32)
    out = []
    with torch.no_grad():
        for start in range(0, len(v), batch_size):
            vb = torch.from_numpy(v[start:start + batch_size])
            yb = None if y is None else torch.as_tensor(np.broadcast_to(np.asarray(y, np.int64), (len(v),))[start:start + len(vb)].copy())
            out.append(_check_finite(model.decode(vb, yb)))
    return np.concatenate(out)


def reconstruct(model: SphereAutoencoder, x, batch_size: int = 256) -> np.ndarray:
    """``D(spherify(E(x)))`` with null conditioning and no noise."""
    return decode_sphere(model, encode_sphere(model, x, batch_size=batch_size), batch_size=batch_size)


# ---------------------------------------------------------------------------
# editing


def _edit_loop(model, x, y, plan: EditPlan, sigma_max):
    model.eval()
    n = len(x)
    rng = np.random.default_rng(plan.seed)
    L = model.config.latent_dim
    first = torch.from_numpy(geometry.sample_prior(L, rng, size=n)).float()
    noise = _noise_source(L, rng, n, plan.share_noise, first)
    T = plan.steps + 1

    def r_of_step(t):
        return plan.r * decay_r(t, T, plan.gamma)

    with torch.no_grad():
        cond = _conditions(model, y, n, need_null=False)
        out = _refine(model, torch.from_numpy(np.asarray(x, np.float32)), cond, plan.steps, sigma_max,
                      r_of_step, noise)
    return _check_finite(out)


def manipulate(model: SphereAutoencoder, x, target_class: Optional[int] = None, plan: Optional[EditPlan] = None,
               sigma_max: float = geometry.angle_to_sigma(80.0)) -> np.ndarray:
    """Repeatedly encode and decode a real image under ``target_class``, without guidance."""
    plan = plan or EditPlan("manipulate")
    target = plan.target_class if target_class is None else target_class
    if not model.config.conditional:
        raise InvalidClass("conditional manipulation needs a class-conditional model")
    if target is None or target == NULL_CLASS:
        raise InvalidClass("manipulation needs a target class")
    return _edit_loop(model, x, target, plan, sigma_max)


def stitch(a, b, spec: StitchSpec) -> np.ndarray:
    a = np.asarray(a, np.float32)
    b = np.asarray(b, np.float32)
    if a.shape != b.shape:
        raise ValueError(f"crossover sources must share a shape, got {a.shape} and {b.shape}")
    out = a.copy()
    if spec.split == "left-right":
        cut = int(round(spec.boundary * a.shape[-2]))
        out[..., cut:, :] = b[..., cut:, :]
    else:
        cut = int(round(spec.boundary * a.shape[-3]))
        out[..., cut:, :, :] = b[..., cut:, :, :]
    return out


def crossover(model: SphereAutoencoder, a, b, plan: Optional[EditPlan] = None,
              sigma_max: float = geometry.angle_to_sigma(80.0)) -> np.ndarray:
    """Harmonize a hard-stitched composite of ``a`` and ``b`` by iterative encode/decode."""
    plan = plan or EditPlan("crossover")
    composite = stitch(a, b, plan.stitch)
    if composite.ndim == 3:
        composite = composite[None]
    if plan.steps == 0:
        return composite
    y = plan.target_class if model.config.conditional else None
    return _edit_loop(model, composite, y, plan, sigma_max)
