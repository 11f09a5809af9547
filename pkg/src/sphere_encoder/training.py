"""Noisy-spherification training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import geometry
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetSpec, LabeledImages, augment
from .exceptions import ConfigError, NonFiniteLoss
from .losses import FeatureExtractor, LossWeights, lat_con_loss, pix_con_loss, pix_recon_loss, total_loss
from .network import NULL_CLASS, ModelConfig, SphereAutoencoder, noisy_spherify_t, spherify_t

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "l_pix_recon", "l_pix_con", "l_lat_con", "total")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    min_learning_rate: float = 1e-6
    warmup_epochs: float = 1
    total_epochs: float = 30
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    perceptual_seed: int = 0
    checkpoint_every: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must be smaller than total_epochs")
        if self.min_learning_rate > self.learning_rate:
            raise ConfigError("min_learning_rate must not exceed learning_rate")


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, n_samples // batch_size)


def lr_at(step: int, config: TrainConfig, n_steps_per_epoch: int = 1) -> float:
    """Linear warmup to ``learning_rate`` then cosine decay to ``min_learning_rate``.

    ``step`` counts optimizer updates starting at 1; the final update
    (``total_epochs * n_steps_per_epoch``) uses exactly ``min_learning_rate``.
    """
    warmup = config.warmup_epochs * n_steps_per_epoch
    total = config.total_epochs * n_steps_per_epoch
    if step < warmup:
        return config.learning_rate * step / warmup
    progress = min(1.0, (step - warmup) / max(total - warmup, 1e-12))
    lo, hi = config.min_learning_rate, config.learning_rate
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * progress))


def cfg_dropout(y, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label by the null class with probability ``p``."""
    y = np.asarray(y, dtype=np.int64)
    drop = rng.uniform(size=y.shape) < p
    return np.where(drop, NULL_CLASS, y)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    position: int = 0
    order: Optional[np.ndarray] = None
    data_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    noise_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    dropout_rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def from_seed(cls, seed: int) -> "TrainState":
        data, noise, dropout = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(data_rng=data, noise_rng=noise, dropout_rng=dropout)

    def rng_record(self) -> dict:
        return {name: getattr(self, name).bit_generator.state for name in ("data_rng", "noise_rng", "dropout_rng")}

    def restore_rngs(self, record: dict) -> None:
        for name, st in record.items():
            getattr(self, name).bit_generator.state = st


class Trainer:
    """Owns the model, optimizer, frozen feature extractor and RNG streams."""

    def __init__(self, model: SphereAutoencoder, train_config: TrainConfig,
                 noise_policy: geometry.NoisePolicy, loss_weights: LossWeights,
                 dataset_spec: Optional[DatasetSpec] = None, n_samples: Optional[int] = None,
                 fx: Optional[FeatureExtractor] = None):
        self.model = model
        self.config = train_config
        self.policy = noise_policy
        self.weights = loss_weights
        self.dataset_spec = dataset_spec or DatasetSpec()
        self.fx = fx if fx is not None else FeatureExtractor(model.config.channels, train_config.perceptual_seed)
        self.n_steps_per_epoch = steps_per_epoch(n_samples or train_config.batch_size, train_config.batch_size)
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=train_config.learning_rate, betas=tuple(train_config.betas),
            eps=train_config.eps, weight_decay=train_config.weight_decay,
        )
        self.state = TrainState.from_seed(train_config.seed)

    @property
    def total_steps(self) -> int:
        total = int(round(self.config.total_epochs * self.n_steps_per_epoch))
        if self.config.max_steps is not None:
            total = min(total, self.config.max_steps)
        return total

    # -- one update ---------------------------------------------------------

    def compute_losses(self, x: torch.Tensor, y, noise: geometry.NoiseDraw) -> dict:
        """Forward pass of one training batch with given labels and noise."""
        model = self.model
        z = model.encode(x, y)
        v = spherify_t(z)
        e = torch.as_tensor(noise.direction, dtype=x.dtype).reshape(v.shape)
        sigma = torch.as_tensor(np.asarray(noise.sigma), dtype=x.dtype)
        sigma_sub = torch.as_tensor(np.asarray(noise.sigma_sub), dtype=x.dtype)
        v_big = noisy_spherify_t(v, e, sigma)
        v_small = noisy_spherify_t(v, e, sigma_sub)
        x_small = model.decode(v_small, y)
        x_big = model.decode(v_big, y)
        re_encoded = model.encode(x_big, y)
        terms = {
            "pix_recon": pix_recon_loss(x_small, x, self.weights, self.fx),
            "pix_con": pix_con_loss(x_big, x_small.detach(), self.weights, self.fx),
            "lat_con": lat_con_loss(v, re_encoded),
        }
        terms["total"] = total_loss(terms, self.weights)
        terms["_outputs"] = (x_small, x_big, re_encoded)
        return terms

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> dict:
        """One optimizer update on a batch; returns the per-term loss report."""
        st = self.state
        model = self.model
        model.train()
        cfg = model.config
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        y = None
        if cfg.conditional:
            y = torch.from_numpy(cfg_dropout(labels, cfg.cfg_null_drop_prob, st.dropout_rng))
        noise = geometry.draw_noise(self.policy, cfg.latent_dim, st.noise_rng, size=len(x))
        terms = self.compute_losses(x, y, noise)
        total = terms["total"]
        if not torch.isfinite(total):
            bad = _first_nonfinite(terms["_outputs"])
            report = {k: v.item() for k, v in terms.items() if not k.startswith("_")}
            raise NonFiniteLoss(f"non-finite loss at step {st.step + 1} (batch index {bad})", bad, report)
        st.step += 1
        lr = lr_at(st.step, self.config, self.n_steps_per_epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        return {
            "step": st.step,
            "lr": lr,
            "l_pix_recon": terms["pix_recon"].item(),
            "l_pix_con": terms["pix_con"].item(),
            "l_lat_con": terms["lat_con"].item(),
            "total": total.item(),
        }

    # -- epochs -------------------------------------------------------------

    def next_batch(self, data: LabeledImages):
        st = self.state
        bs = min(self.config.batch_size, len(data))
        if st.order is None or st.position + bs > len(data) or st.position >= self.n_steps_per_epoch * bs:
            if st.order is not None:
                st.epoch += 1
            st.order = st.data_rng.permutation(len(data))
            st.position = 0
        idx = st.order[st.position:st.position + bs]
        st.position += bs
        images = augment(data.images[idx], st.data_rng, self.dataset_spec)
        return images, data.labels[idx]

    # -- persistence --------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> Path:
        st = self.state
        meta = {
            "train": _jsonable(asdict(self.config)),
            "noise_policy": _jsonable(asdict(self.policy)),
            "loss_weights": asdict(self.weights),
            "rng": st.rng_record(),
            "epoch": st.epoch,
            "position": st.position,
        }
        meta.update(extra or {})
        arrays = {} if st.order is None else {"order": st.order}
        return save_checkpoint(path, self.model, step=st.step, seed=self.config.seed, extra=meta,
                               optimizer_state=self.optimizer.state_dict(), arrays=arrays)

    def restore(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.model.state_dict())
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        st = self.state
        st.step = ckpt.step
        st.epoch = ckpt.extra.get("epoch", 0)
        st.position = ckpt.extra.get("position", 0)
        st.order = ckpt.arrays.get("order")
        if "rng" in ckpt.extra:
            st.restore_rngs(ckpt.extra["rng"])


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _first_nonfinite(outputs) -> Optional[int]:
    for out in outputs:
        flat = out.detach().reshape(out.shape[0], -1)
        bad = torch.nonzero(~torch.isfinite(flat).all(dim=1)).flatten()
        if len(bad):
            return int(bad[0])
    return None


def run_training(data: LabeledImages, model_config: ModelConfig, train_config: TrainConfig,
                 noise_policy: geometry.NoisePolicy, loss_weights: LossWeights,
                 dataset_spec: Optional[DatasetSpec] = None, out_dir=None,
                 resume_from=None, extra_meta: Optional[dict] = None, progress=None) -> Trainer:
    """Train to ``total_steps``, writing ``metrics.csv`` and checkpoints into ``out_dir``.

    Checkpoints go to ``ckpt_<step>.npz`` every ``checkpoint_every`` steps and to
    ``last.npz`` at the end. With ``resume_from`` the run continues from that
    checkpoint's step, RNG streams and optimizer moments.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if model_config.conditional and data.labels.max() >= model_config.n_classes:
        raise ConfigError(f"labels exceed n_classes={model_config.n_classes}")
    model = SphereAutoencoder(model_config, seed=train_config.seed)
    trainer = Trainer(model, train_config, noise_policy, loss_weights, dataset_spec, len(data))
    if resume_from is not None:
        trainer.restore(load_checkpoint(resume_from, model_config))

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            metrics = out / "metrics.csv"
            fresh = resume_from is None or not metrics.exists()
            fh = open(metrics, "w" if fresh else "a", newline="")
        except OSError as exc:
            raise OSError(f"cannot write training outputs to {out}: {exc}") from exc
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
    try:
        while trainer.state.step < trainer.total_steps:
            images, labels = trainer.next_batch(data)
            report = trainer.train_step(images, labels)
            if writer is not None:
                writer.writerow([report[k] for k in METRICS_HEADER])
            if progress is not None:
                progress(report)
            every = train_config.checkpoint_every
            if out is not None and every and report["step"] % every == 0:
                trainer.save(out / f"ckpt_{report['step']:06d}.npz", extra_meta)
        if out is not None:
            trainer.save(out / "last.npz", extra_meta)
    finally:
        if fh is not None:
            fh.close()
    return trainer
