"""Desk-scale diagnostics.

The Fréchet feature distance uses FID's functional form but the frozen random
feature pyramid from :mod:`sphere_encoder.losses`; its values are not
comparable with Inception-based FID numbers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from . import geometry
from .losses import FeatureExtractor
from .network import SphereAutoencoder, spherify_t
from .sampling import SamplerPlan, _conditions, _decode, _refine, _check_finite, _noise_source, decay_r, encode_sphere, generate

logger = logging.getLogger(__name__)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, np.float64))
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0):
            raise ValueError("covariance must be symmetric")

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        feats = np.asarray(feats, np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        mu = feats.mean(axis=0)
        centered = feats - mu
        cov = centered.T @ centered / max(len(feats) - 1, 1)
        return cls(mu, (cov + cov.T) / 2, len(feats))


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_feature_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term is evaluated as the trace of the PSD square root of
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues as ``S_a S_b``.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    root_a = _sqrtm_psd(a.cov)
    middle = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh((middle + middle.T) / 2)
    cross = np.sum(np.sqrt(np.clip(w, 0, None)))
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * cross
    return float(max(value, 0.0))


def image_features(images, fx: Optional[FeatureExtractor] = None, batch_size: int = 256) -> np.ndarray:
    fx = fx or FeatureExtractor()
    images = np.asarray(images, np.float32)
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(fx.pooled(torch.from_numpy(np.clip(images[start:start + batch_size], -1, 1))).double().numpy())
    return np.concatenate(out)


def image_stats(images, fx: Optional[FeatureExtractor] = None) -> FeatureStats:
    return FeatureStats.from_features(image_features(images, fx))


def noise_images(n: int, shape, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (n, *shape)).astype(np.float32)


def eval_generation(model: SphereAutoencoder, plan: SamplerPlan, reference, n_samples: int,
                    sigma_max: float, reference_labels=None, fx: Optional[FeatureExtractor] = None) -> dict:
    """Distance of generated samples to a reference set, plus noise and split-half baselines.

    Conditional models generate a class-balanced set (class ``i % n_classes`` for
    sample ``i``) and also report per-class distances when labels are given.
    """
    fx = fx or FeatureExtractor(model.config.channels)
    reference = np.asarray(reference, np.float32)
    ref_stats = image_stats(reference, fx)
    cfg = model.config
    y = np.arange(n_samples) % cfg.n_classes if cfg.conditional else None
    samples = generate(model, n_samples, y, plan, sigma_max)
    report = {"distance": frechet_feature_distance(image_stats(samples, fx), ref_stats)}
    rng = np.random.default_rng(plan.seed + 1)
    noise = noise_images(n_samples, reference.shape[1:], rng)
    report["noise_baseline"] = frechet_feature_distance(image_stats(noise, fx), ref_stats)
    half = rng.permutation(len(reference))
    a, b = reference[half[: len(half) // 2]], reference[half[len(half) // 2:]]
    report["split_half_baseline"] = frechet_feature_distance(image_stats(a, fx), image_stats(b, fx))
    if cfg.conditional and reference_labels is not None:
        labels = np.asarray(reference_labels)
        per_class = {}
        for c in range(cfg.n_classes):
            ref_c, gen_c = reference[labels == c], samples[y == c]
            if len(ref_c) >= 2 and len(gen_c) >= 2:
                per_class[c] = frechet_feature_distance(image_stats(gen_c, fx), image_stats(ref_c, fx))
        report["per_class"] = per_class
    report["samples"] = samples
    return report


def conditional_uniformity(model: SphereAutoencoder, images, labels=None, n_projections: int = 64,
                           seed: int = 0) -> dict:
    """Per-class sliced Wasserstein distance of encoder latents to the uniform sphere.

    Classes are encoded with their own class condition. Returns ``{"per_class":
    {c: swd}, "pooled": swd, "coords": {c: (n_c, 3) unit vectors}}``; classes with
    fewer than two samples are skipped.
    """
    images = np.asarray(images, np.float32)
    labels = np.zeros(len(images), np.int64) if labels is None else np.asarray(labels, np.int64)
    conditional = model.config.conditional
    per_class, coords, latents = {}, {}, []
    rng = np.random.default_rng(seed)
    for c in np.unique(labels):
        idx = labels == c
        if idx.sum() < 2:
            logger.warning("class %s has fewer than 2 samples; skipped", c)
            continue
        v = encode_sphere(model, images[idx], int(c) if conditional else None)
        per_class[int(c)] = geometry.sliced_wasserstein_to_uniform(v, n_projections, rng)
        latents.append(v)
    if not latents:
        raise ValueError("no class has at least two samples")
    pooled_latents = np.concatenate(latents)
    if len(per_class) == 1:
        pooled = next(iter(per_class.values()))
    else:
        pooled = geometry.sliced_wasserstein_to_uniform(pooled_latents, n_projections, rng)
    proj_rng = np.random.default_rng(seed)
    projected = geometry.project_to_3d(pooled_latents, proj_rng)
    start = 0
    for c, v in zip(per_class, latents):
        coords[c] = projected[start:start + len(v)]
        start += len(v)
    return {"per_class": per_class, "pooled": pooled, "coords": coords}


def interpolation_grid(model: SphereAutoencoder, corners, grid_n: int, plan: SamplerPlan = SamplerPlan(),
                       sigma_max: float = geometry.angle_to_sigma(80.0), classes: Optional[Sequence] = None) -> np.ndarray:
    """Decode a ``grid_n x grid_n`` bilinear sweep between four corner noise vectors.

    ``corners`` are ``(top_left, top_right, bottom_left, bottom_right)`` prior
    draws. With ``classes`` (four ids, ``None`` for null) the class embeddings are
    interpolated bilinearly as well. Each cell then follows ``plan``'s few-step
    refinement. Returns ``(grid_n, grid_n, H, W, C)``.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    cfg = model.config
    corners = [np.asarray(c, np.float64).reshape(-1) for c in corners]
    if len(corners) != 4:
        raise ValueError("need four corners")
    ts = np.linspace(0.0, 1.0, grid_n)
    cells, weights = [], []
    for t in ts:
        for u in ts:
            cells.append(geometry.bilerp_latents(corners, u, t))
            weights.append([(1 - u) * (1 - t), u * (1 - t), (1 - u) * t, u * t])
    v = torch.from_numpy(np.stack(cells)).float().reshape(-1, *cfg.latent_shape)
    w = torch.tensor(weights, dtype=torch.float32)
    n = len(v)
    model.eval()
    with torch.no_grad():
        ids = classes if classes is not None else [None] * 4
        corner_conds = [_conditions(model, None if c is None else [c], 1, False) for c in ids]
        enc_c = torch.cat([c.enc for c in corner_conds])
        dec_c = torch.cat([c.dec for c in corner_conds])
        cond = _conditions(model, None, n, False)
        cond.enc = w @ enc_c
        cond.dec = w @ dec_c
        x = _decode(model, v, cond, 1.0, False)
        rng = np.random.default_rng(plan.seed)
        first = torch.from_numpy(geometry.sample_prior(cfg.latent_dim, rng, size=1)).float().expand(n, -1)
        noise = _noise_source(cfg.latent_dim, rng, n, plan.share_noise, first)

        def r_of_step(t):
            return plan.r_override if plan.r_override is not None else decay_r(t, plan.steps, plan.gamma)

        x = _refine(model, x, cond, plan.steps - 1, sigma_max, r_of_step, noise)
    return _check_finite(x).reshape(grid_n, grid_n, *x.shape[1:])


@dataclass
class MemorizationReport:
    distances: np.ndarray
    indices: np.ndarray
    flipped: np.ndarray


def memorization_check(generated, training_set, batch_size: int = 512) -> MemorizationReport:
    """Nearest training image of each generated image under RMS pixel distance.

    Each training image is compared both as is and horizontally flipped.
    """
    gen = np.asarray(generated, np.float64).reshape(len(generated), -1)
    train = np.asarray(training_set, np.float64)
    flipped = train[:, :, ::-1].reshape(len(train), -1)
    train = train.reshape(len(train), -1)
    d = gen.shape[1]
    best = np.full(len(gen), np.inf)
    idx = np.zeros(len(gen), np.int64)
    flip = np.zeros(len(gen), bool)
    for is_flip, bank in ((False, train), (True, flipped)):
        for start in range(0, len(bank), batch_size):
            chunk = bank[start:start + batch_size]
            sq = (gen ** 2).sum(1)[:, None] + (chunk ** 2).sum(1)[None] - 2 * gen @ chunk.T
            dist = np.sqrt(np.clip(sq, 0, None) / d)
            j = dist.argmin(axis=1)
            dj = dist[np.arange(len(gen)), j]
            better = dj < best
            best[better] = dj[better]
            idx[better] = start + j[better]
            flip[better] = is_flip
    # exact recomputation for the winners; the expanded form above loses precision near 0
    winners = np.where(flip[:, None], flipped[idx], train[idx])
    best = np.sqrt(np.mean((gen - winners) ** 2, axis=1))
    return MemorizationReport(best, idx, flip)


def pairwise_rms_distances(images) -> np.ndarray:
    x = np.asarray(images, np.float64).reshape(len(images), -1)
    sq = (x ** 2).sum(1)[:, None] + (x ** 2).sum(1)[None] - 2 * x @ x.T
    iu = np.triu_indices(len(x), 1)
    return np.sqrt(np.clip(sq[iu], 0, None) / x.shape[1])
