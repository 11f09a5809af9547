import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sphere_encoder import SphereEncoder
from sphere_encoder.data import DatasetSpec, synth_generate
from sphere_encoder.exceptions import ConfigMismatch, InvalidClass

TINY = dict(patch_size=2, hidden_size=16, n_blocks=1, n_heads=2, mixer_depth=1, latent_channels=4,
            batch_size=8, total_epochs=2, warmup_epochs=0.5)


@pytest.fixture(scope="module")
def shapes():
    d = synth_generate(DatasetSpec(image_size=8, n_per_class=8), np.random.default_rng(0))
    names = np.asarray(d.classes)[d.labels]
    return d.images, names


@pytest.fixture(scope="module")
def fitted(shapes, tmp_path_factory):
    X, y = shapes
    return SphereEncoder(**TINY, output_dir=str(tmp_path_factory.mktemp("est"))).fit(X, y)


def test_params_round_trip_through_clone():
    est = SphereEncoder(**TINY, seed=4)
    params = est.get_params()
    assert params["seed"] == 4 and params["hidden_size"] == 16
    twin = clone(est)
    assert twin.get_params() == params
    assert twin is not est


def test_set_params():
    est = SphereEncoder().set_params(n_blocks=2, learning_rate=5e-4)
    assert est.n_blocks == 2 and est.learning_rate == 5e-4


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        SphereEncoder().transform(np.zeros((1, 8, 8, 3)))


def test_fit_sets_attributes(fitted):
    assert fitted.n_steps_ == 6
    assert fitted.latent_dim_ == 4 * 4 * 4
    assert fitted.classes_.tolist() == ["circle", "square", "triangle"]
    assert fitted.n_features_in_ == 8 * 8 * 3


def test_transform_gives_sphere_vectors(fitted, shapes):
    X, _ = shapes
    V = fitted.transform(X[:5])
    assert V.shape == (5, 64)
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 8.0, rtol=1e-5)


def test_inverse_transform_and_reconstruct_agree(fitted, shapes):
    X, _ = shapes
    assert np.array_equal(fitted.inverse_transform(fitted.transform(X[:3])), fitted.reconstruct(X[:3]))


def test_inverse_transform_with_labels(fitted, shapes):
    V = fitted.transform(shapes[0][:2])
    out = fitted.inverse_transform(V, ["square", "circle"])
    assert out.shape == (2, 8, 8, 3)
    with pytest.raises(InvalidClass):
        fitted.inverse_transform(V, ["hexagon", "circle"])
    with pytest.raises(ConfigMismatch):
        fitted.inverse_transform(V[:, :10])


def test_sample_is_seeded(fitted):
    a = fitted.sample(3, y="triangle", steps=2, seed=1)
    b = fitted.sample(3, y="triangle", steps=2, seed=1)
    assert a.shape == (3, 8, 8, 3) and np.array_equal(a, b)


def test_score_is_negative_l1(fitted, shapes):
    X, _ = shapes
    assert fitted.score(X[:4]) == pytest.approx(-np.mean(np.abs(fitted.reconstruct(X[:4]) - X[:4])))


def test_wrong_image_shape(fitted):
    with pytest.raises(ConfigMismatch):
        fitted.transform(np.zeros((1, 16, 16, 3), np.float32))
    with pytest.raises(ValueError):
        fitted.transform(np.zeros((8, 8, 3), np.float32))


def test_from_checkpoint_matches(fitted, shapes):
    restored = SphereEncoder.from_checkpoint(fitted.output_dir + "/last.npz")
    assert restored.classes_.tolist() == fitted.classes_.tolist()
    assert restored.hidden_size == 16
    X, _ = shapes
    np.testing.assert_allclose(restored.transform(X[:2]), fitted.transform(X[:2]), atol=1e-6)
    assert restored.sigma_max_ == pytest.approx(fitted.sigma_max_)


def test_unconditional_fit(shapes):
    X, _ = shapes
    est = SphereEncoder(**{**TINY, "total_epochs": 1, "warmup_epochs": 0.5}).fit(X[:16])
    assert est.classes_ is None
    with pytest.raises(InvalidClass):
        est.sample(1, y="circle")
    assert est.sample(2).shape == (2, 8, 8, 3)
