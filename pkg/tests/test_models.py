import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svgan.diffcore import Tensor
from svgan.errors import ShapeError, ValidationError
from svgan.losses import adversarial_losses, one_hot, total_generator_loss, weighted_cce, weighted_l1
from svgan.models import (DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator,
                          matching_discriminator_config)

SMALL = GeneratorConfig(base_channels=4, height=16, width=16, num_seg_classes=4)


def rand_x(rng, cfg, slices=3, batch=None):
    shape = (slices, cfg.in_channels, cfg.height, cfg.width)
    return rng.standard_normal(shape if batch is None else (batch,) + shape)


def test_bottleneck_extent():
    assert GeneratorConfig().bottleneck_shape[1:] == (2, 2)


def test_indivisible_extent_errors():
    with pytest.raises(ValidationError):
        build_generator(GeneratorConfig(height=33))
    with pytest.raises(ValidationError):
        build_discriminator(DiscriminatorConfig(width=20))


def test_same_seed_bit_identical():
    a, b = build_generator(SMALL, seed=3), build_generator(SMALL, seed=3)
    assert a.num_parameters == b.num_parameters
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build_generator(SMALL, seed=4)
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


def test_parameter_count_deterministic():
    assert build_generator(GeneratorConfig()).num_parameters == 638_733
    assert build_discriminator(DiscriminatorConfig()).num_parameters == 97_713


def test_init_convention():
    g = build_generator(SMALL, dtype=np.float64)
    w = g.params["enc0.conv.weight"].data
    assert np.abs(w).max() <= 0.04 and 0.01 < w.std() < 0.02
    assert np.all(g.params["head.bias"].data == 0)
    assert np.all(g.params["enc0.norm.gamma"].data == 1)


def test_ten_conv_layers_and_five_in_discriminator():
    assert build_generator(GeneratorConfig()).conv_layer_count == 10
    assert build_discriminator(DiscriminatorConfig()).conv_layer_count == 5


def test_generator_output_shapes():
    cfg = GeneratorConfig(num_seg_classes=4, base_channels=4)
    g = build_generator(cfg, dtype=np.float64)
    seg, dis = g(rand_x(np.random.default_rng(0), cfg, slices=8))
    assert seg.shape == (8, 4, 32, 32) and dis.shape == (2,)
    assert abs(dis.data.sum() - 1) < 1e-9
    np.testing.assert_allclose(seg.data.sum(axis=1), 1.0, atol=1e-9)


def test_batched_matches_single():
    g = build_generator(SMALL, dtype=np.float64)
    x = rand_x(np.random.default_rng(1), SMALL, batch=2)
    seg, dis = g(x)
    seg0, dis0 = g(x[0])
    np.testing.assert_allclose(seg.data[0], seg0.data, atol=1e-12)
    np.testing.assert_allclose(dis.data[0], dis0.data, atol=1e-12)


def test_inference_deterministic_training_stochastic():
    g = build_generator(SMALL, dtype=np.float64)
    x = rand_x(np.random.default_rng(2), SMALL)
    a, b = g(x)[0].data, g(x)[0].data
    assert a.tobytes() == b.tobytes()
    rng = np.random.default_rng(0)
    assert not np.array_equal(g(x, train=True, rng=rng)[0].data, g(x, train=True, rng=rng)[0].data)


def test_channel_mismatch_errors():
    g = build_generator(SMALL)
    with pytest.raises(ShapeError) as err:
        g(np.zeros((3, 1, 16, 16)))
    assert err.value.dim == "C"


def test_reversed_slices_keep_normalisation():
    g = build_generator(SMALL, dtype=np.float64)
    x = rand_x(np.random.default_rng(3), SMALL, slices=5)
    _, d1 = g(x)
    _, d2 = g(x[::-1].copy())
    assert d2.shape == d1.shape and abs(d2.data.sum() - 1) < 1e-9


@settings(max_examples=9, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.sampled_from([16, 32, 64]), st.sampled_from([16, 32, 64]))
def test_channel_bookkeeping_sweep(base, h, w):
    cfg = GeneratorConfig(base_channels=base, height=h, width=w, lstm_hidden=8)
    g = build_generator(cfg)
    seg, dis = g(np.zeros((2, 2, h, w), dtype=np.float32))
    assert seg.shape == (2, 3, h, w) and dis.shape == (2,)


def test_discriminator_shapes_and_range():
    cfg = DiscriminatorConfig(base_channels=4, pixel_channels=8)
    d = build_discriminator(cfg, dtype=np.float64)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 2, 32, 32))
    real = one_hot(rng.integers(0, 3, (3, 32, 32)), 3, axis=-3)
    fake = np.random.default_rng(5).dirichlet(np.ones(3), size=(3, 32, 32)).transpose(0, 3, 1, 2)
    sr, sf = d(x, real), d(x, fake)
    assert sr.shape == sf.shape == (3,) + cfg.score_map_shape
    assert np.all((sr.data > 0) & (sr.data < 1))


def test_discriminator_misaligned_errors():
    d = build_discriminator(DiscriminatorConfig(base_channels=4, pixel_channels=8))
    with pytest.raises(ShapeError):
        d(np.zeros((3, 2, 32, 32)), np.zeros((2, 3, 32, 32)))


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(6)
    g = build_generator(SMALL, seed=1, dtype=np.float64)
    d = build_discriminator(matching_discriminator_config(SMALL, base_channels=4, pixel_channels=4),
                            seed=2, dtype=np.float64)
    x = rand_x(rng, SMALL, slices=3, batch=2)
    labels = rng.integers(0, 4, (2, 3, 16, 16))
    seg, dis = g(x, train=True, rng=rng)
    _, adv_g = adversarial_losses(d(x, one_hot(labels, 4)), d(x, seg))
    target = np.eye(2)[[0, 1]]
    total = total_generator_loss(adv_g, weighted_cce(seg, labels, np.ones(4)), weighted_l1(dis, target, np.ones(2)))
    total.backward()
    for module in (g, d):
        for name, p in module.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name


def test_state_dict_round_trip_and_errors():
    g = build_generator(SMALL, seed=1)
    other = build_generator(SMALL, seed=2)
    other.load_state_dict(g.state_dict())
    for name in g.params:
        assert g.params[name].data.tobytes() == other.params[name].data.tobytes()
    state = g.state_dict()
    state["head.bias"] = np.zeros(9, dtype=np.float32)
    with pytest.raises(ShapeError):
        other.load_state_dict(state)


def test_set_requires_grad_freezes():
    d = build_discriminator(DiscriminatorConfig(base_channels=4, pixel_channels=4))
    d.set_requires_grad(False)
    assert not any(p.requires_grad for p in d.params.values())
    x = Tensor(np.zeros((1, 2, 32, 32)), requires_grad=True)
    out = d(x, np.zeros((1, 3, 32, 32))).sum()
    out.backward()
    assert all(p.grad is None for p in d.params.values()) and x.grad is not None
