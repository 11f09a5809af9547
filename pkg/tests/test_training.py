import csv
import hashlib

import numpy as np
import pytest
import torch

import _support
from sphere_encoder import geometry
from sphere_encoder.checkpoint import load_checkpoint
from sphere_encoder.data import DatasetSpec, synth_generate
from sphere_encoder.exceptions import ConfigError, NonFiniteLoss
from sphere_encoder.losses import LossWeights
from sphere_encoder.network import NULL_CLASS, ModelConfig, SphereAutoencoder
from sphere_encoder.training import TrainConfig, Trainer, cfg_dropout, lr_at, run_training

TOY = ModelConfig(image_size=8, patch_size=2, hidden_size=16, n_blocks=1, n_heads=2, mixer_depth=1,
                  latent_channels=4, n_classes=3)
SPEC = DatasetSpec(image_size=8, n_per_class=22, seed=0)


@pytest.fixture(scope="module")
def data64():
    d = synth_generate(SPEC, np.random.default_rng(0))
    return type(d)(d.images[:64], d.labels[:64], d.classes)


def _run(data, out=None, resume=None, **train_kw):
    kw = dict(batch_size=16, total_epochs=2, warmup_epochs=0.5, seed=0, perceptual_seed=0)
    kw.update(train_kw)
    return run_training(data, TOY, TrainConfig(**kw), geometry.NoisePolicy(), LossWeights(), SPEC,
                        out_dir=out, resume_from=resume)


def _read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- schedule ---------------------------------------------------------------


def test_lr_warmup_and_cosine_endpoints():
    cfg = TrainConfig(learning_rate=1e-3, min_learning_rate=1e-6, warmup_epochs=2, total_epochs=10)
    assert lr_at(0, cfg, 5) == 0.0
    assert lr_at(1, cfg, 5) == pytest.approx(1e-3 / 10)
    assert lr_at(10, cfg, 5) == pytest.approx(1e-3)
    assert abs(lr_at(50, cfg, 5) - 1e-6) <= 1e-12


def test_lr_is_monotone_after_warmup():
    cfg = TrainConfig(learning_rate=1e-3, min_learning_rate=0.0, warmup_epochs=1, total_epochs=5)
    lrs = [lr_at(s, cfg, 10) for s in range(10, 51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("kw", [
    {"warmup_epochs": 5, "total_epochs": 5},
    {"learning_rate": 1e-4, "min_learning_rate": 1e-3},
    {"batch_size": 0},
])
def test_train_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- CFG dropout ------------------------------------------------------------


def test_cfg_dropout_extremes():
    y = np.arange(30) % 3
    rng = np.random.default_rng(0)
    assert np.array_equal(cfg_dropout(y, 0.0, rng), y)
    assert np.all(cfg_dropout(y, 1.0, rng) == NULL_CLASS)


def test_cfg_dropout_rate():
    out = cfg_dropout(np.zeros(100_000, dtype=int), 0.1, np.random.default_rng(0))
    assert abs(np.mean(out == NULL_CLASS) - 0.1) <= 0.005


# -- single steps -----------------------------------------------------------


def _trainer(seed=0):
    model = SphereAutoencoder(TOY, seed=seed)
    return Trainer(model, TrainConfig(batch_size=8, total_epochs=2, seed=seed), geometry.NoisePolicy(),
                   LossWeights(), SPEC, n_samples=64)


def test_identical_seeds_give_identical_losses(data64):
    reports = []
    for _ in range(2):
        tr = _trainer()
        reports.append([tr.train_step(*tr.next_batch(data64)) for _ in range(2)])
    assert reports[0] == reports[1]


def test_zero_sigma_gives_zero_pix_con():
    model, trainer, x, y, noise = _support.tiny_problem()
    zero = geometry.NoiseDraw(direction=noise.direction, sigma=np.zeros(4), sigma_sub=np.zeros(4))
    terms = trainer.compute_losses(x, y, zero)
    assert terms["pix_con"].item() == 0.0


def test_paired_draws_share_direction():
    model, trainer, x, y, noise = _support.tiny_problem()
    assert np.all(noise.sigma_sub <= 0.5 * noise.sigma + 1e-12)
    assert noise.direction.shape == (4, _support.TINY.latent_dim)


def test_nonfinite_loss_reports_batch_index(data64):
    tr = _trainer()
    images, labels = tr.next_batch(data64)
    images = images.copy()
    images[3] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        tr.train_step(images, labels)
    assert info.value.batch_index == 3


def test_extractor_untouched_by_training_steps(data64):
    tr = _trainer()
    before = {k: v.clone() for k, v in tr.fx.state_dict().items()}
    for _ in range(10):
        tr.train_step(*tr.next_batch(data64))
    after = tr.fx.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_extractor_not_in_optimizer():
    tr = _trainer()
    opt_ids = {id(p) for g in tr.optimizer.param_groups for p in g["params"]}
    assert not any(id(p) in opt_ids for p in tr.fx.parameters())


# -- data order -------------------------------------------------------------


def test_each_epoch_visits_a_permutation(data64):
    tr = _trainer()
    seen = []
    for _ in range(2 * tr.n_steps_per_epoch):
        tr.next_batch(data64)
        seen.append(tr.state.order[tr.state.position - 8:tr.state.position].copy())
    first = np.concatenate(seen[:tr.n_steps_per_epoch])
    second = np.concatenate(seen[tr.n_steps_per_epoch:])
    assert sorted(first) == list(range(64)) == sorted(second)
    assert not np.array_equal(first, second)


# -- full runs --------------------------------------------------------------


def test_one_epoch_smoke_writes_checkpoint_and_log(tmp_path, data64):
    trainer = _run(data64, tmp_path, total_epochs=1, warmup_epochs=0.25)
    rows = _read_metrics(tmp_path / "metrics.csv")
    assert list(rows[0]) == ["step", "l_pix_recon", "l_pix_con", "l_lat_con", "total"]
    assert len(rows) == 4 == trainer.state.step
    ckpt = load_checkpoint(tmp_path / "last.npz")
    assert ckpt.step == 4 and ckpt.config == TOY


def test_periodic_checkpoints(tmp_path, data64):
    _run(data64, tmp_path, checkpoint_every=3)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.npz")) == ["ckpt_000003.npz", "ckpt_000006.npz"]


def test_run_is_deterministic(tmp_path, data64):
    _run(data64, tmp_path / "a")
    _run(data64, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, data64):
    _run(data64, tmp_path / "full")
    _run(data64, tmp_path / "part", checkpoint_every=3, max_steps=3)
    _run(data64, tmp_path / "part", resume=tmp_path / "part" / "ckpt_000003.npz")
    full = _read_metrics(tmp_path / "full" / "metrics.csv")
    part = _read_metrics(tmp_path / "part" / "metrics.csv")
    assert full == part
    a = load_checkpoint(tmp_path / "full" / "last.npz").model.state_dict()
    b = load_checkpoint(tmp_path / "part" / "last.npz").model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_empty_dataset_rejected(data64):
    empty = type(data64)(data64.images[:0], data64.labels[:0], data64.classes)
    with pytest.raises(ValueError):
        _run(empty)


def test_unwritable_output_is_reported(tmp_path, data64):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        _run(data64, blocker / "sub")


def test_parameter_hash_changes_but_extractor_hash_does_not(data64):
    def digest(module):
        h = hashlib.sha256()
        for v in module.state_dict().values():
            h.update(v.numpy().tobytes())
        return h.hexdigest()

    tr = _trainer()
    m0, f0 = digest(tr.model), digest(tr.fx)
    tr.train_step(*tr.next_batch(data64))
    assert digest(tr.model) != m0
    assert digest(tr.fx) == f0
