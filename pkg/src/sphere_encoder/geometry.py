"""Spherical latent geometry.

Every function here is pure numpy. Randomness always comes from an explicit
``numpy.random.Generator`` so that identical seeds give bit-identical results.

Array conventions
-----------------
A rank-1 array is a single latent vector. For rank >= 2 the leading axis is the
batch and every remaining axis is flattened into the latent dimension ``L``,
so a ``(batch, h, w, d)`` latent grid is handled per sample. Outputs keep the
input shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .exceptions import DegenerateLatent, InvalidAngle

DEGENERATE_NORM = 1e-12

SIGMA_UNIFORM = "sigma-uniform"
ANGLE_UNIFORM = "angle-uniform"


def _flat(z):
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    if z.ndim == 0:
        raise ValueError("latent must have at least one dimension")
    if z.ndim == 1:
        return z[None, :], True
    return z.reshape(z.shape[0], -1), False


def latent_norm(z):
    """Euclidean norm of each latent (a scalar for a single vector)."""
    flat, single = _flat(z)
    norms = np.linalg.norm(flat, axis=1)
    return norms[0] if single else norms


def spherify(z):
    """Project latents onto the sphere of radius ``sqrt(L)`` by RMS normalization."""
    z = np.asarray(z)
    flat, single = _flat(z)
    z_shape = flat.shape if single else z.shape
    L = flat.shape[1]
    if L < 1:
        raise ValueError("latent dimension must be >= 1")
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM):
        bad = np.flatnonzero(norms[:, 0] < DEGENERATE_NORM).tolist()
        raise DegenerateLatent(f"latent norm below {DEGENERATE_NORM} for sample(s) {bad}")
    out = flat * (math.sqrt(L) / norms)
    return out[0] if single else out.reshape(z_shape)


def sample_sphere_uniform(L: int, rng: np.random.Generator, size: Optional[int] = None,
                          truncation: Optional[float] = None):
    """Draw points uniformly on the radius-``sqrt(L)`` sphere.

    The prior is ``N(0, I)``; with ``truncation`` each coordinate is drawn from the
    standard normal truncated to ``[-truncation, truncation]`` instead. Use
    :func:`sample_prior` when the raw draw is needed as well.
    """
    return spherify(sample_prior(L, rng, size=size, truncation=truncation))


def sample_prior(L: int, rng: np.random.Generator, size: Optional[int] = None,
                 truncation: Optional[float] = None):
    """Gaussian (optionally truncated) noise vectors of length ``L``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    shape = (L,) if size is None else (size, L)
    while True:
        if truncation is None:
            e = rng.standard_normal(shape)
        else:
            if truncation <= 0:
                raise ValueError("truncation must be > 0")
            lo = ndtr(-truncation)
            u = rng.uniform(lo, 1.0 - lo, size=shape)
            e = ndtri(u)
        norms = np.linalg.norm(e.reshape(-1, L), axis=1)
        # all-zero draws have probability zero; resample if one ever happens
        if np.all(norms >= DEGENERATE_NORM):
            return e


def noisy_spherify(v, e, sigma):
    """Perturb the direction of ``v`` with ``sigma * e`` and re-project.

    ``sigma`` may be a scalar or a per-sample array. Samples with ``sigma == 0``
    are returned unchanged (no renormalization round-off).
    """
    v = np.asarray(v)
    e = np.asarray(e)
    if e.shape != v.shape:
        raise ValueError(f"noise shape {e.shape} does not match latent shape {v.shape}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    if sigma.ndim == 0:
        if sigma == 0:
            return v.copy()
        return spherify(v + float(sigma) * e)
    if v.ndim < 2 or sigma.shape != (v.shape[0],):
        raise ValueError("per-sample sigma needs one value per batch entry")
    s = sigma.reshape((-1,) + (1,) * (v.ndim - 1))
    out = spherify(v + s * e)
    keep = sigma == 0
    out[keep] = v[keep]
    return out


# ---------------------------------------------------------------------------
# noise magnitude


def angle_to_sigma(alpha_deg):
    """Noise magnitude (equivalently the noise-to-signal ratio) for a perturbation angle."""
    a = np.asarray(alpha_deg, dtype=np.float64)
    if np.any(a < 0) or np.any(a >= 90):
        raise InvalidAngle(f"angle must lie in [0, 90) degrees, got {alpha_deg}")
    out = np.tan(np.deg2rad(a))
    return float(out) if out.ndim == 0 else out


def sigma_to_angle(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("sigma must be >= 0")
    out = np.rad2deg(np.arctan(s))
    return float(out) if out.ndim == 0 else out


def angle_between(a, b):
    """Angle in degrees between latents, per sample."""
    fa, single = _flat(a)
    fb, _ = _flat(b)
    cos = np.sum(fa * fb, axis=1) / (np.linalg.norm(fa, axis=1) * np.linalg.norm(fb, axis=1))
    out = np.rad2deg(np.arccos(np.clip(cos, -1.0, 1.0)))
    return out[0] if single else out


@dataclass(frozen=True)
class NoisePolicy:
    """How the training noise magnitude is jittered.

    In angle-uniform mode an angle is drawn uniformly from ``base_angle_range``
    (or, with probability ``mix_probability``, from ``mix_angle_range``) and
    converted with ``tan``. In sigma-uniform mode ``sigma = r * sigma_max`` with
    ``r ~ U[0, 1]``.
    """

    mode: str = ANGLE_UNIFORM
    base_angle_range: tuple = (0.0, 80.0)
    mix_angle_range: Optional[tuple] = (80.0, 85.0)
    mix_probability: float = 0.1
    sigma_max_value: Optional[float] = None

    def __post_init__(self):
        if self.mode not in (SIGMA_UNIFORM, ANGLE_UNIFORM):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        lo, hi = self.base_angle_range
        if not 0 <= lo < hi < 90:
            raise InvalidAngle(f"base angle range must satisfy 0 <= lo < hi < 90, got {self.base_angle_range}")
        if self.mix_angle_range is not None:
            mlo, mhi = self.mix_angle_range
            if not hi <= mlo < mhi < 90:
                raise InvalidAngle(f"mix angle range {self.mix_angle_range} must sit above {hi} and below 90")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ValueError("mix_probability must lie in [0, 1]")
        if self.mode == SIGMA_UNIFORM and (self.sigma_max_value is None or self.sigma_max_value <= 0):
            raise ValueError("sigma-uniform mode needs sigma_max_value > 0")

    @property
    def sigma_max(self) -> float:
        if self.mode == SIGMA_UNIFORM:
            return float(self.sigma_max_value)
        return angle_to_sigma(self.base_angle_range[1])


@dataclass
class NoiseDraw:
    direction: np.ndarray
    sigma: np.ndarray | float
    sigma_sub: np.ndarray | float


def draw_noise(policy: NoisePolicy, L: int, rng: np.random.Generator, size: Optional[int] = None,
               r=None, s=None) -> NoiseDraw:
    """Draw the shared noise direction and the large/small noise magnitudes.

    ``r`` (sigma-uniform mode) and ``s`` force the respective uniform variates.
    The RNG is consumed in a fixed order: direction, magnitude, mix decision,
    mix magnitude, ``s``.
    """
    n = 1 if size is None else size
    e = rng.standard_normal((n, L))
    if policy.mode == SIGMA_UNIFORM:
        u = rng.uniform(0.0, 1.0, n)
        if r is not None:
            u = np.full(n, float(r))
        sigma = u * policy.sigma_max
    else:
        lo, hi = policy.base_angle_range
        alpha = rng.uniform(lo, hi, n)
        if policy.mix_angle_range is not None and policy.mix_probability > 0:
            use_mix = rng.uniform(0.0, 1.0, n) < policy.mix_probability
            mix = rng.uniform(*policy.mix_angle_range, n)
            alpha = np.where(use_mix, mix, alpha)
        sigma = np.tan(np.deg2rad(alpha))
    frac = rng.uniform(0.0, 0.5, n)
    if s is not None:
        frac = np.full(n, float(s))
    sigma_sub = frac * sigma
    if size is None:
        return NoiseDraw(e[0], float(sigma[0]), float(sigma_sub[0]))
    return NoiseDraw(e, sigma, sigma_sub)


# ---------------------------------------------------------------------------
# interpolation and projections


def lerp_latents(a, b, t: float):
    """Linear interpolation followed by one spherify."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("latents must share a shape")
    if t == 0:
        return spherify(a)
    if t == 1:
        return spherify(b)
    return spherify((1.0 - t) * a + t * b)


def bilerp_latents(corners: Sequence, u: float, t: float):
    """Bilinear interpolation over corners ``(top_left, top_right, bottom_left, bottom_right)``.

    ``u`` moves horizontally, ``t`` vertically. The two row blends and the column
    blend are linear; the result is spherified once.
    """
    c00, c01, c10, c11 = (np.asarray(c) for c in corners)
    top = (1.0 - u) * c00 + u * c01
    bottom = (1.0 - u) * c10 + u * c11
    return spherify((1.0 - t) * top + t * bottom)


def project_to_3d(latents, rng: np.random.Generator):
    """Project latents to unit 3-vectors through one shared random Gaussian matrix."""
    flat, single = _flat(latents)
    G = rng.standard_normal((3, flat.shape[1]))
    p = flat @ G.T
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    return p[0] if single else p


# ---------------------------------------------------------------------------
# uniformity


def wasserstein_1d(a, b):
    """Exact 2-Wasserstein distance between two equal-size 1-D empirical samples."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("samples must have equal size")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def orthogonal_projections(L: int, n_projections: int, rng: np.random.Generator):
    """``(L, n_projections)`` matrix of unit directions, orthonormal within blocks of ``min(L, n)``."""
    block = min(L, n_projections)
    cols = []
    remaining = n_projections
    while remaining > 0:
        q, r = np.linalg.qr(rng.standard_normal((L, block)))
        q = q * np.sign(np.diag(r))
        cols.append(q[:, :min(block, remaining)])
        remaining -= block
    return np.concatenate(cols, axis=1)


def sliced_wasserstein(x, y, n_projections: int, rng: np.random.Generator):
    """Mean 1-D 2-Wasserstein distance of two equal-size sets over orthogonal random slices."""
    fx, _ = _flat(x)
    fy, _ = _flat(y)
    if fx.shape != fy.shape:
        raise ValueError(f"sets must have equal shape, got {fx.shape} and {fy.shape}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    P = orthogonal_projections(fx.shape[1], n_projections, rng)
    px = np.sort(fx @ P, axis=0)
    py = np.sort(fy @ P, axis=0)
    return float(np.mean(np.sqrt(np.mean((px - py) ** 2, axis=0))))


def sliced_wasserstein_to_uniform(latents, n_projections: int, rng: np.random.Generator):
    """Sliced Wasserstein distance between latents and a fresh uniform sample on their sphere."""
    flat, _ = _flat(latents)
    if flat.shape[0] < 2:
        raise ValueError("need at least two latents")
    reference = sample_sphere_uniform(flat.shape[1], rng, size=flat.shape[0])
    return sliced_wasserstein(flat, reference, n_projections, rng)
