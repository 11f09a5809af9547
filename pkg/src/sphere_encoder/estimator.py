"""scikit-learn style wrapper around the autoencoder and its training loop."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import sampling
from .checkpoint import load_checkpoint
from .data import DatasetSpec, LabeledImages
from .exceptions import ConfigMismatch, InvalidClass
from .geometry import NoisePolicy
from .losses import LossWeights
from .network import NULL_CLASS, ModelConfig
from .training import TrainConfig, run_training


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected an NHWC image batch, got shape {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError("images must be square")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


class SphereEncoder(BaseEstimator, TransformerMixin):
    """Spherical-latent image autoencoder.

    ``fit(X, y)`` trains on an NHWC batch in ``[-1, 1]``; passing ``y`` makes
    the model class-conditional. ``transform`` maps images to sphere vectors of
    length ``L`` (null conditioning) and ``inverse_transform`` decodes them.
    ``sample`` draws new images with the few-step sampler.
    """

    def __init__(self, patch_size=3, hidden_size=64, n_blocks=4, n_heads=4, mixer_depth=2,
                 latent_channels=18, cfg_null_drop_prob=0.1, batch_size=32, learning_rate=1e-3,
                 min_learning_rate=1e-6, warmup_epochs=1, total_epochs=30, max_steps=None,
                 angle_range=(0.0, 80.0), mix_angle_range=(80.0, 85.0), mix_probability=0.1,
                 loss_weights=None, flip_prob=0.5, grad_clip=1.0, seed=0, output_dir=None):
        self.patch_size = patch_size
        self.hidden_size = hidden_size
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.mixer_depth = mixer_depth
        self.latent_channels = latent_channels
        self.cfg_null_drop_prob = cfg_null_drop_prob
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.min_learning_rate = min_learning_rate
        self.warmup_epochs = warmup_epochs
        self.total_epochs = total_epochs
        self.max_steps = max_steps
        self.angle_range = angle_range
        self.mix_angle_range = mix_angle_range
        self.mix_probability = mix_probability
        self.loss_weights = loss_weights
        self.flip_prob = flip_prob
        self.grad_clip = grad_clip
        self.seed = seed
        self.output_dir = output_dir

    def _noise_policy(self) -> NoisePolicy:
        mix = None if self.mix_angle_range is None else tuple(self.mix_angle_range)
        return NoisePolicy(base_angle_range=tuple(self.angle_range), mix_angle_range=mix,
                           mix_probability=self.mix_probability if mix is not None else 0.0)

    def fit(self, X, y=None):
        X = _check_images(X)
        if y is None:
            self.classes_ = None
            labels = np.zeros(len(X), np.int64)
        else:
            y = np.asarray(y)
            if len(y) != len(X):
                raise ValueError(f"X has {len(X)} images but y has {len(y)} labels")
            self.classes_, labels = np.unique(y, return_inverse=True)
            labels = labels.astype(np.int64)
        n_classes = 0 if self.classes_ is None else len(self.classes_)
        model_config = ModelConfig(
            image_size=X.shape[1], channels=X.shape[3], patch_size=self.patch_size,
            hidden_size=self.hidden_size, n_blocks=self.n_blocks, n_heads=self.n_heads,
            mixer_depth=self.mixer_depth, latent_channels=self.latent_channels, n_classes=n_classes,
            cfg_null_drop_prob=self.cfg_null_drop_prob,
        )
        train_config = TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            min_learning_rate=self.min_learning_rate, warmup_epochs=self.warmup_epochs,
            total_epochs=self.total_epochs, max_steps=self.max_steps, grad_clip=self.grad_clip,
            seed=self.seed,
        )
        self.noise_policy_ = self._noise_policy()
        spec = DatasetSpec(image_size=X.shape[1], channels=X.shape[3], flip_prob=self.flip_prob)
        names = tuple(str(c) for c in self.classes_) if self.classes_ is not None else ()
        trainer = run_training(
            LabeledImages(X, labels, names), model_config, train_config, self.noise_policy_,
            self.loss_weights or LossWeights(), spec, out_dir=self.output_dir,
            extra_meta={"classes": list(names)},
        )
        self.model_ = trainer.model.eval()
        self.n_steps_ = trainer.state.step
        self.latent_dim_ = model_config.latent_dim
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "SphereEncoder":
        """Rebuild a fitted estimator from a training checkpoint."""
        ckpt = load_checkpoint(path)
        cfg = ckpt.config
        train = ckpt.extra.get("train", {})
        est = cls(patch_size=cfg.patch_size, hidden_size=cfg.hidden_size, n_blocks=cfg.n_blocks,
                  n_heads=cfg.n_heads, mixer_depth=cfg.mixer_depth, latent_channels=cfg.latent_channels,
                  cfg_null_drop_prob=cfg.cfg_null_drop_prob, seed=ckpt.seed or 0,
                  **{k: train[k] for k in ("batch_size", "learning_rate", "min_learning_rate",
                                           "warmup_epochs", "total_epochs", "max_steps") if k in train})
        if "noise_policy" in ckpt.extra:
            np_meta = ckpt.extra["noise_policy"]
            est.noise_policy_ = NoisePolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in np_meta.items()})
        else:
            est.noise_policy_ = est._noise_policy()
        names = ckpt.extra.get("classes") or []
        est.classes_ = np.asarray(names) if cfg.conditional else None
        if cfg.conditional and len(names) != cfg.n_classes:
            est.classes_ = np.arange(cfg.n_classes)
        est.model_ = ckpt.model.eval()
        est.n_steps_ = ckpt.step
        est.latent_dim_ = cfg.latent_dim
        est.n_features_in_ = cfg.image_size ** 2 * cfg.channels
        return est

    # -- helpers ------------------------------------------------------------

    def _class_ids(self, y) -> Optional[np.ndarray]:
        if y is None:
            return None
        if self.classes_ is None:
            raise InvalidClass("estimator was fitted without labels")
        lookup = {c: i for i, c in enumerate(self.classes_.tolist())}
        y = np.atleast_1d(np.asarray(y, dtype=self.classes_.dtype))
        try:
            return np.asarray([lookup[v] for v in y.tolist()], np.int64)
        except KeyError as exc:
            raise InvalidClass(f"unknown class {exc.args[0]!r}; known: {list(self.classes_)}") from None

    def _check_fitted_images(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_images(X)
        cfg = self.model_.config
        if X.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ConfigMismatch(f"expected images of shape {(cfg.image_size, cfg.image_size, cfg.channels)}, "
                                 f"got {X.shape[1:]}")
        return X

    @property
    def sigma_max_(self) -> float:
        check_is_fitted(self, "model_")
        return self.noise_policy_.sigma_max

    # -- transformer API ----------------------------------------------------

    def transform(self, X):
        """Sphere vectors ``(n, L)`` of ``X`` under null conditioning."""
        X = self._check_fitted_images(X)
        return sampling.encode_sphere(self.model_, X)

    def inverse_transform(self, V, y=None):
        check_is_fitted(self, "model_")
        V = np.asarray(V, np.float32)
        if V.ndim != 2 or V.shape[1] != self.latent_dim_:
            raise ConfigMismatch(f"expected sphere vectors of shape (n, {self.latent_dim_}), got {V.shape}")
        ids = self._class_ids(y)
        return sampling.decode_sphere(self.model_, V, ids)

    def reconstruct(self, X):
        X = self._check_fitted_images(X)
        return sampling.reconstruct(self.model_, X)

    def sample(self, n: int, y=None, steps: int = 1, gamma: float = 0.0, cfg_scale: float = 1.0,
               cfg_position: str = "none", share_noise: bool = True, seed: int = 0):
        """Generate ``n`` images; ``y`` is one class label for all samples or one per sample."""
        check_is_fitted(self, "model_")
        ids = self._class_ids(y)
        if ids is not None and len(ids) == 1:
            ids = ids[0]
        plan = sampling.SamplerPlan(steps=steps, gamma=gamma, share_noise=share_noise, cfg_scale=cfg_scale,
                                    cfg_position=cfg_position, seed=seed)
        return sampling.generate(self.model_, n, ids, plan, self.sigma_max_)

    def score(self, X, y=None):
        """Negative mean absolute reconstruction error (higher is better)."""
        X = self._check_fitted_images(X)
        return -float(np.mean(np.abs(self.reconstruct(X) - X)))


__all__ = ["SphereEncoder", "NULL_CLASS"]
