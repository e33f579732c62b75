import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svgan.diffcore import (LSTMParams, RMSprop, RmsPropState, Tensor, bilstm_sequence, check_gradients,
                            ops, rmsprop_step, topological_order)
from svgan.errors import GraphError, NumericError, ShapeError, ValidationError


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- conv / pool / upconv ---------------------------------------------------------

def test_conv2d_1x1_scaling():
    x = t([[[1.0, 2.0], [3.0, 4.0]]])
    out = ops.conv2d(x, t(np.full((1, 1, 1, 1), 2.0)), t([0.0]))
    np.testing.assert_array_equal(out.data, [[[2, 4], [6, 8]]])


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 3, 3))
    out = ops.conv2d(t(x), t(np.ones((1, 1, 1, 1))), t([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_bias_only():
    x = np.random.default_rng(1).standard_normal((2, 4, 4))
    out = ops.conv2d(t(x), t(np.zeros((3, 2, 3, 3))), t([5.0, 5.0, 5.0]))
    assert out.shape == (3, 4, 4)
    assert np.all(out.data == 5.0)


def test_conv2d_matches_direct_correlation():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((2, 5, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[o, i, j] = np.sum(padded[:, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(ops.conv2d(t(x), t(w), t(b)).data, ref, atol=1e-12)


@pytest.mark.parametrize("x_shape,w_shape,dim", [
    ((2, 4, 4), (1, 3, 3, 3), "C_in"),
    ((1, 4, 4), (1, 1, 2, 2), "k"),
    ((1, 4, 4), (1, 1, 3, 1), "k"),
])
def test_conv2d_shape_errors_name_dimension(x_shape, w_shape, dim):
    with pytest.raises(ShapeError) as err:
        ops.conv2d(t(np.zeros(x_shape)), t(np.zeros(w_shape)))
    assert err.value.dim == dim


def test_maxpool_examples():
    assert ops.maxpool2d(t([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [[[4.0]]]
    const = ops.maxpool2d(t(np.full((2, 4, 4), 7.0)))
    assert np.all(const.data == 7.0) and const.shape == (2, 2, 2)


def test_maxpool_gradient_routes_to_argmax():
    x = t([[[1.0, 2.0], [3.0, 4.0]]], grad=True)
    ops.maxpool2d(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[0, 0], [0, 1]]])


def test_maxpool_tie_goes_to_first_in_row_major_order():
    x = t(np.ones((1, 2, 2)), grad=True)
    ops.maxpool2d(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


def test_maxpool_odd_extent_errors():
    with pytest.raises(ShapeError):
        ops.maxpool2d(t(np.zeros((1, 3, 4))))


def test_upconv_examples():
    out = ops.upconv2d(t(np.full((1, 1, 1), 3.0)), t(np.ones((1, 1, 2, 2))), t([0.0]))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 3.0))
    out = ops.upconv2d(t(np.random.default_rng(0).standard_normal((2, 3, 3))), t(np.zeros((2, 1, 2, 2))), t([1.5]))
    assert out.shape == (1, 6, 6) and np.all(out.data == 1.5)


def test_upconv_then_pool_preserves_extent():
    x = t(np.random.default_rng(0).standard_normal((2, 4, 3)))
    assert ops.maxpool2d(ops.upconv2d(x, t(np.ones((2, 2, 2, 2))))).shape == (2, 4, 3)


def test_upconv_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.upconv2d(t(np.zeros((2, 3, 3))), t(np.zeros((3, 1, 2, 2))))


# -- dense & activations ----------------------------------------------------------

def test_softmax_sigmoid_dense_examples():
    np.testing.assert_array_equal(ops.softmax(t([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(ops.softmax_channel(t(np.zeros((2, 1, 1)))).data.ravel(), [0.5, 0.5])
    assert ops.sigmoid(t(0.0)).item() == 0.5
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(ops.dense(t(x), t(np.eye(4)), t(np.zeros(4))).data, x)


def test_sigmoid_extreme_inputs_finite():
    out = ops.sigmoid(t([-800.0, 800.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_leaky_relu_slope():
    np.testing.assert_allclose(ops.leaky_relu(t([-1.0, 2.0])).data, [-0.2, 2.0])


def test_dropout_scaling_and_inference_identity():
    rng = np.random.default_rng(0)
    x = t(np.ones((1000,)))
    out = ops.dropout(x, 0.5, True, rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.4 < np.mean(out == 0) < 0.6
    assert ops.dropout(x, 0.5, False).data is not None
    np.testing.assert_array_equal(ops.dropout(x, 0.5, False).data, x.data)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ValidationError):
        ops.dropout(t([1.0]), p, True, np.random.default_rng(0))


def test_concat_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channel([t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 2, 4, 3)))])


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        ops.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-50, 50)))
def test_softmax_channel_normalised(x):
    p = ops.softmax_channel(t(x)).data
    np.testing.assert_allclose(p.sum(axis=-3), 1.0, atol=1e-9)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_channel_strictly_inside_unit_interval():
    p = ops.softmax_channel(t(np.random.default_rng(0).standard_normal((1, 4, 5, 5)))).data
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.sampled_from([2, 4]),
                                    st.sampled_from([2, 4])), elements=st.floats(-1e3, 1e3)))
def test_forward_ops_stay_finite(x):
    xt = t(x)
    c = x.shape[1]
    w = t(np.full((2, c, 3, 3), 0.1))
    outs = [ops.conv2d(xt, w), ops.maxpool2d(xt), ops.upconv2d(xt, t(np.full((c, 1, 2, 2), 0.1))),
            ops.sigmoid(xt), ops.tanh(xt), ops.relu(xt), ops.leaky_relu(xt), ops.softmax_channel(xt),
            ops.instance_norm(xt, t(np.ones(c)), t(np.zeros(c))), ops.global_avg_pool(xt)]
    for out in outs:
        assert np.all(np.isfinite(out.data))


# -- biLSTM --------------------------------------------------------------------------

def _lstm(rng, f, h, scale=0.5):
    return LSTMParams(t(rng.standard_normal((f, 4 * h)) * scale), t(rng.standard_normal((h, 4 * h)) * scale),
                      t(rng.standard_normal(4 * h) * scale))


def test_bilstm_zero_weights_give_zero_states():
    zero = LSTMParams(t(np.zeros((3, 8))), t(np.zeros((2, 8))), t(np.zeros(8)))
    out = bilstm_sequence(t(np.random.default_rng(0).standard_normal((5, 3))), zero, zero)
    assert out.shape == (5, 4) and np.all(out.data == 0)


def test_bilstm_single_step_halves_share_input():
    rng = np.random.default_rng(1)
    p = _lstm(rng, 3, 2)
    out = bilstm_sequence(t(rng.standard_normal((1, 3))), p, p).data
    np.testing.assert_array_equal(out[0, :2], out[0, 2:])


def test_bilstm_reversal_swaps_directions():
    rng = np.random.default_rng(2)
    fwd, bwd = _lstm(rng, 3, 2), _lstm(rng, 3, 2)
    x = rng.standard_normal((6, 3))
    out = bilstm_sequence(t(x), fwd, bwd).data
    rev = bilstm_sequence(t(x[::-1].copy()), bwd, fwd).data
    np.testing.assert_allclose(out[:, :2], rev[::-1, 2:], atol=1e-14)
    np.testing.assert_allclose(out[:, 2:], rev[::-1, :2], atol=1e-14)


def test_bilstm_matches_plain_recurrence():
    rng = np.random.default_rng(3)
    fwd, bwd = _lstm(rng, 2, 3), _lstm(rng, 2, 3)
    x = rng.standard_normal((4, 2))

    def run(p, xs):
        sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        h, c, hs = np.zeros(3), np.zeros(3), []
        for xt in xs:
            g = xt @ p.w_x.data + h @ p.w_h.data + p.b.data
            i, f, cand, o = sig(g[:3]), sig(g[3:6]), np.tanh(g[6:9]), sig(g[9:])
            c = f * c + i * cand
            h = o * np.tanh(c)
            hs.append(h)
        return np.array(hs)

    expected = np.concatenate([run(fwd, x), run(bwd, x[::-1])[::-1]], axis=1)
    np.testing.assert_allclose(bilstm_sequence(t(x), fwd, bwd).data, expected, atol=1e-13)


def test_bilstm_empty_sequence_errors():
    p = _lstm(np.random.default_rng(0), 3, 2)
    with pytest.raises(ShapeError):
        bilstm_sequence(t(np.zeros((0, 3))), p, p)


# -- backward ------------------------------------------------------------------------

def test_backward_square_sum():
    x = t([1.0, -2.0, 3.0], grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_backward_independent_input_gets_zero():
    x = t([1.0, 2.0], grad=True)
    y = t([3.0], grad=True)
    (y * 2.0 + x.sum() * 0.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_non_scalar_errors():
    with pytest.raises(GraphError):
        (t([1.0, 2.0], grad=True) * 2.0).backward()


def test_backward_non_finite_errors():
    x = t([0.0], grad=True)
    with pytest.raises(NumericError):
        ops.log(x).sum().backward()


def test_backward_twice_errors():
    x = t([1.0, 2.0], grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_visits_each_node_once():
    x = t([1.0, 2.0], grad=True)
    a = x * 2.0
    b = a + a  # diamond: a consumed twice
    loss = (b * a).sum()
    nodes = topological_order(loss)
    assert len(nodes) == len({id(n) for n in nodes}) == 5  # x, a, b, b*a, sum
    assert loss.backward() == 5
    np.testing.assert_allclose(x.grad, 16 * x.data)


def test_gradient_accumulates_over_consumers():
    x = t([3.0], grad=True)
    (x * 2.0 + x * 5.0).sum().backward()
    assert x.grad.tolist() == [7.0]


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(0)

    def op(ts):
        h = ops.leaky_relu(ops.conv2d(ts[0], ts[1]))
        return ops.softmax_channel(ops.upconv2d(ops.maxpool2d(h), ts[2]))
    arrays = [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((3, 2, 2, 2))]
    assert check_gradients(op, arrays, rng) < 1e-4


# -- RMSprop -------------------------------------------------------------------------

def test_rmsprop_zero_gradient_bit_identical():
    theta = np.random.default_rng(0).standard_normal(5)
    before = theta.copy()
    state = RmsPropState(np.full(5, 0.3))
    rmsprop_step(theta, np.zeros(5), state)
    assert theta.tobytes() == before.tobytes()
    np.testing.assert_allclose(state.v, 0.27)


def test_rmsprop_hand_example():
    theta = np.zeros(1)
    state = RmsPropState(np.zeros(1), rho=0.9, eps=1e-8, learning_rate=1e-4)
    rmsprop_step(theta, np.ones(1), state)
    assert state.v[0] == pytest.approx(0.1)
    assert theta[0] == pytest.approx(-3.1623e-4, rel=1e-4)


def test_rmsprop_steps_shrink_under_constant_gradient():
    theta = np.zeros(1)
    state = RmsPropState(np.zeros(1))
    rmsprop_step(theta, np.ones(1), state)
    d1 = -theta[0]
    rmsprop_step(theta, np.ones(1), state)
    d2 = -theta[0] - d1
    assert abs(d2) < abs(d1)


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"rho": 1.0}, {"rho": -0.1}, {"eps": 0}])
def test_rmsprop_state_validation(kwargs):
    with pytest.raises(ValidationError):
        RmsPropState(np.zeros(1), **kwargs)


def test_rmsprop_non_finite_gradient_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = RMSprop({"w": p})
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="'w'"):
        opt.step()


def test_rmsprop_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsprop_step(np.zeros(2), np.zeros(3), RmsPropState(np.zeros(2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 4, elements=st.floats(0, 10)))
def test_rmsprop_v_stays_nonnegative(g, v):
    state = RmsPropState(v.copy())
    rmsprop_step(np.zeros(4), g, state)
    assert np.all(state.v >= 0)
