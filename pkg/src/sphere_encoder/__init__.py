"""Spherical-latent image autoencoder with one-step and few-step generation."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import DatasetSpec, LabeledImages, augment, load_dataset, load_folder, synth_generate
from .estimator import SphereEncoder
from .evaluation import (
    FeatureStats,
    conditional_uniformity,
    eval_generation,
    frechet_feature_distance,
    interpolation_grid,
    memorization_check,
)
from .exceptions import (
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    DegenerateLatent,
    InvalidAngle,
    InvalidClass,
    NonFiniteLoss,
    NonFiniteSample,
    SphereEncoderError,
)
from .geometry import (
    NoisePolicy,
    angle_to_sigma,
    draw_noise,
    noisy_spherify,
    sample_prior,
    sigma_to_angle,
    sliced_wasserstein_to_uniform,
    spherify,
)
from .losses import FeatureExtractor, LossWeights
from .network import NULL_CLASS, ModelConfig, SphereAutoencoder
from .sampling import EditPlan, SamplerPlan, StitchSpec, crossover, decay_r, generate, manipulate, reconstruct
from .training import TrainConfig, Trainer, run_training

__version__ = "0.1.0"
