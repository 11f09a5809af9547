import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import _support
from sphere_encoder import geometry
from sphere_encoder.exceptions import ConfigMismatch, InvalidClass
from sphere_encoder.network import ModelConfig, SphereAutoencoder
from sphere_encoder.sampling import (
    EditPlan,
    SamplerPlan,
    StitchSpec,
    apply_cfg,
    crossover,
    decay_r,
    decode_sphere,
    encode_sphere,
    generate,
    manipulate,
    reconstruct,
    stitch,
)


@pytest.fixture(scope="module")
def model():
    m = SphereAutoencoder(_support.TINY, seed=0)
    _support.randomize_zero_init(m)
    return m.eval()


def _images(n=3, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 8, 8, 3)).astype(np.float32)


# -- decay schedule ---------------------------------------------------------


@pytest.mark.parametrize("t,T,gamma,expected", [(3, 7, 0.0, 1.0), (2, 2, 1.0, 0.0), (3, 5, 1.0, 0.5)])
def test_decay_r_examples(t, T, gamma, expected):
    assert decay_r(t, T, gamma) == expected


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.floats(0, 5))
def test_decay_r_nonincreasing(T, gamma):
    rs = [decay_r(t, T, gamma) for t in range(2, T + 1)]
    assert all(0.0 <= r <= 1.0 for r in rs)
    assert all(a >= b for a, b in zip(rs, rs[1:]))


@pytest.mark.parametrize("t,T", [(1, 4), (5, 4), (2, 1)])
def test_decay_r_guards(t, T):
    with pytest.raises(ValueError):
        decay_r(t, T, 1.0)


# -- CFG algebra ------------------------------------------------------------


def test_apply_cfg_endpoints_are_exact():
    rng = np.random.default_rng(0)
    c, u = rng.standard_normal((2, 5, 7))
    assert apply_cfg(c, u, 1.0) is c
    assert apply_cfg(c, u, 0.0) is u
    np.testing.assert_allclose(apply_cfg(c, u, 2.0), 2 * c - u)


def test_apply_cfg_shape_mismatch():
    with pytest.raises(ValueError):
        apply_cfg(np.zeros(3), np.zeros(4), 1.5)


def test_combo_uses_square_root_scale():
    plan = SamplerPlan(cfg_scale=1.6, cfg_position="combo")
    assert abs(plan.position_scale - 1.2649) <= 1e-4
    assert SamplerPlan(cfg_scale=1.6, cfg_position="dec").position_scale == 1.6


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 4.0), st.integers(0, 100))
def test_combo_composition_is_deterministic_and_identity_at_one(s, seed):
    rng = np.random.default_rng(seed)
    c, u = rng.standard_normal((2, 6))
    root = math.sqrt(s)
    a = apply_cfg(apply_cfg(c, u, root), u, root)
    b = apply_cfg(apply_cfg(c, u, root), u, root)
    assert np.array_equal(a, b)
    if s == 1.0:
        assert np.array_equal(a, c)


# -- generate ---------------------------------------------------------------


def test_single_step_is_one_decoder_pass(model):
    counter = _support.ForwardCounter(model)
    try:
        generate(model, 2, y=0, plan=SamplerPlan(steps=1))
    finally:
        counter.close()
    assert (counter.encoder, counter.decoder) == (0, 1)


def test_shared_noise_reused_every_step(model):
    seen = []
    generate(model, 2, y=1, plan=SamplerPlan(steps=4, share_noise=True),
             callback=lambda t, e, r: seen.append((t, e.clone(), r)))
    assert [t for t, _, _ in seen] == [2, 3, 4]
    assert all(torch.equal(seen[0][1], e) for _, e, _ in seen)


def test_unshared_noise_redrawn(model):
    seen = []
    generate(model, 2, y=1, plan=SamplerPlan(steps=3, share_noise=False), callback=lambda t, e, r: seen.append(e))
    assert not torch.equal(seen[0], seen[1])


def test_default_refinement_uses_full_strength(model):
    rs = []
    generate(model, 1, y=0, plan=SamplerPlan(steps=4), callback=lambda t, e, r: rs.append(r))
    assert rs == [1.0, 1.0, 1.0]


def test_r_override_wins(model):
    rs = []
    generate(model, 1, y=0, plan=SamplerPlan(steps=3, gamma=1.0, r_override=0.3),
             callback=lambda t, e, r: rs.append(r))
    assert rs == [0.3, 0.3]


def test_decay_schedule_used_in_generation(model):
    rs = []
    generate(model, 1, y=0, plan=SamplerPlan(steps=5, gamma=1.0), callback=lambda t, e, r: rs.append(r))
    assert rs == [decay_r(t, 5, 1.0) for t in range(2, 6)]


@pytest.mark.parametrize("position", ["enc", "dec", "combo"])
def test_unit_cfg_is_bit_identical_to_none(model, position):
    base = generate(model, 3, y=[0, 1, 2], plan=SamplerPlan(steps=3, seed=5))
    guided = generate(model, 3, y=[0, 1, 2], plan=SamplerPlan(steps=3, seed=5, cfg_scale=1.0,
                                                              cfg_position=position))
    assert np.array_equal(base, guided)


def test_guidance_changes_output(model):
    base = generate(model, 2, y=0, plan=SamplerPlan(steps=2, seed=5))
    guided = generate(model, 2, y=0, plan=SamplerPlan(steps=2, seed=5, cfg_scale=3.0, cfg_position="dec"))
    assert not np.allclose(base, guided)


@pytest.mark.parametrize("steps,position", list(itertools.product([1, 4], ["none", "enc", "dec", "combo"])))
def test_nfe_matches_forward_counter(model, steps, position):
    plan = SamplerPlan(steps=steps, cfg_scale=1.6, cfg_position=position)
    counter = _support.ForwardCounter(model)
    try:
        generate(model, 2, y=0, plan=plan)
    finally:
        counter.close()
    assert counter.total == plan.nfe


def test_generate_is_deterministic_per_seed(model):
    a = generate(model, 4, y=2, plan=SamplerPlan(steps=2, seed=9))
    b = generate(model, 4, y=2, plan=SamplerPlan(steps=2, seed=9))
    c = generate(model, 4, y=2, plan=SamplerPlan(steps=2, seed=10))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batching_does_not_change_results(model):
    a = generate(model, 5, y=0, plan=SamplerPlan(steps=1, seed=1), batch_size=5)
    assert a.shape == (5, 8, 8, 3)
    assert np.isfinite(a).all() and np.abs(a).max() <= 1


def test_cfg_requires_conditional_model():
    cfg = ModelConfig(**{**_support.TINY.to_dict(), "n_classes": 0})
    with pytest.raises(ConfigMismatch):
        generate(SphereAutoencoder(cfg, seed=0), 1, plan=SamplerPlan(cfg_scale=2.0, cfg_position="dec"))


def test_unknown_class_rejected(model):
    with pytest.raises(InvalidClass):
        generate(model, 1, y=7)


@pytest.mark.parametrize("kw", [{"steps": 0}, {"gamma": -1}, {"cfg_scale": -1}, {"cfg_position": "mid"}])
def test_invalid_plans(kw):
    with pytest.raises(ValueError):
        SamplerPlan(**kw)


# -- reconstruction ---------------------------------------------------------


def test_reconstruct_is_noise_free_round_trip(model):
    x = _images()
    v = encode_sphere(model, x)
    assert np.allclose(np.linalg.norm(v, axis=1), math.sqrt(_support.TINY.latent_dim), rtol=1e-5)
    out = reconstruct(model, x)
    assert out.shape == x.shape
    assert np.array_equal(out, decode_sphere(model, v))
    assert np.array_equal(out, reconstruct(model, x))


# -- editing ----------------------------------------------------------------


def test_edit_plan_defaults():
    m = EditPlan("manipulate")
    assert (m.r, m.gamma) == (1.0, 0.0)
    c = EditPlan("crossover")
    assert (c.r, c.gamma, c.steps) == (0.25, 1.0, 10)
    with pytest.raises(ValueError):
        EditPlan("crossover", steps=11)


def test_manipulate_single_step_is_one_encode_decode(model):
    counter = _support.ForwardCounter(model)
    try:
        out = manipulate(model, _images(2), target_class=1, plan=EditPlan("manipulate", steps=1))
    finally:
        counter.close()
    assert (counter.encoder, counter.decoder) == (1, 1)
    assert out.shape == (2, 8, 8, 3)


def test_manipulate_uses_full_strength_without_guidance(model):
    import sphere_encoder.sampling as sampling
    seen = []
    original = sampling._refine

    def spy(*args, **kwargs):
        seen.append((kwargs.get("enc_cfg", False), kwargs.get("dec_cfg", False),
                     [args[5](t) for t in range(2, 2 + args[3])]))
        return original(*args, **kwargs)

    sampling._refine = spy
    try:
        manipulate(model, _images(1), target_class=0)
    finally:
        sampling._refine = original
    enc, dec, rs = seen[0]
    assert not enc and not dec
    assert rs == [1.0] * 4


def test_manipulate_needs_a_class(model):
    with pytest.raises(InvalidClass):
        manipulate(model, _images(1))
    cfg = ModelConfig(**{**_support.TINY.to_dict(), "n_classes": 0})
    with pytest.raises(InvalidClass):
        manipulate(SphereAutoencoder(cfg, seed=0), _images(1), target_class=0)


def test_stitch_left_right_and_top_bottom():
    a, b = np.zeros((8, 8, 3)), np.ones((8, 8, 3))
    lr = stitch(a, b, StitchSpec("left-right", 0.25))
    assert lr[:, :2].max() == 0 and lr[:, 2:].min() == 1
    tb = stitch(a, b, StitchSpec("top-bottom", 0.5))
    assert tb[:4].max() == 0 and tb[4:].min() == 1
    with pytest.raises(ValueError):
        stitch(a, np.ones((4, 4, 3)), StitchSpec())


def test_crossover_zero_steps_returns_composite(model):
    a, b = _images(2)
    out = crossover(model, a, b, EditPlan("crossover", steps=0))
    assert np.array_equal(out[0], stitch(a, b, StitchSpec()))


def test_crossover_first_encode_sees_composite(model):
    a, b = _images(2)
    captured = []
    handle = model.encoder.register_forward_hook(lambda mod, args, out: captured.append(args[0].clone()))
    try:
        crossover(model, a, b, EditPlan("crossover", steps=2))
    finally:
        handle.remove()
    np.testing.assert_array_equal(captured[0][0].numpy(), stitch(a, b, StitchSpec()))


def test_crossover_same_source_stays_near_reconstruction(model):
    a = _images(1)[0]
    out = crossover(model, a, a, EditPlan("crossover", steps=1, gamma=1.0))
    # gamma=1 with one step means r=0, so this is exactly the unconditioned reconstruction
    assert np.allclose(out, reconstruct(model, a[None]), atol=1e-6)


def test_sigma_of_refinement_step_is_scaled_sigma_max(model):
    x = generate(model, 1, y=0, plan=SamplerPlan(steps=2, seed=3), sigma_max=geometry.angle_to_sigma(80.0))
    y = generate(model, 1, y=0, plan=SamplerPlan(steps=2, seed=3, r_override=1.0),
                 sigma_max=geometry.angle_to_sigma(80.0))
    assert np.array_equal(x, y)
