import numpy as np
import pytest

from neomotion.nnkernel import AdamConfig, ModelParams, Tensor, adam_step, ops
from neomotion.nnkernel import graph as G
from neomotion.nnkernel.layers import init_residual_block, residual_block
from neomotion.nnkernel.params import (CheckpointError, checkpoint_bytes, load_checkpoint,
                                       params_from_bytes, save_checkpoint)
from oracles import conv2d_direct, conv_transpose2d_direct, graph_gradcheck

CONV_CASES = [  # (B, Cin, H, W, Cout, k, stride, pad)
    (1, 1, 5, 5, 1, 3, 1, 0),
    (2, 3, 6, 7, 4, 3, 1, 1),
    (1, 2, 8, 8, 3, 3, 2, 1),
    (2, 2, 7, 5, 2, 4, 2, 1),
    (1, 3, 6, 6, 2, 1, 1, 0),
    (1, 1, 9, 9, 2, 7, 1, 3),
]


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# --- conv2d ---------------------------------------------------------------------

def test_conv2d_unit_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    y, _ = ops.conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(y, x)


def test_conv2d_average_of_constant_interior():
    x = np.full((1, 1, 6, 6), 2.5)
    y, _ = ops.conv2d(x, np.full((1, 1, 3, 3), 1 / 9), None, padding=1)
    np.testing.assert_allclose(y[0, 0, 1:-1, 1:-1], 2.5)
    assert y[0, 0, 0, 0] < 2.5


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_matches_direct_loop(rng, case):
    B, Ci, H, W, Co, k, s, p = case
    x = rng.standard_normal((B, Ci, H, W))
    w = rng.standard_normal((Co, Ci, k, k))
    b = rng.standard_normal(Co)
    y, _ = ops.conv2d(x, w, b, s, p)
    assert y.shape[2] == (H + 2 * p - k) // s + 1
    np.testing.assert_allclose(y, conv2d_direct(x, w, b, s, p), atol=1e-12)


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv2d_gradients(rng, case):
    B, Ci, H, W, Co, k, s, p = case
    arrays = [rng.standard_normal((B, Ci, H, W)), rng.standard_normal((Co, Ci, k, k)), rng.standard_normal(Co)]
    worst = graph_gradcheck(lambda t: G.conv2d(t[0], t[1], t[2], s, p), arrays, rng)
    assert max(worst) <= 0, worst


def test_conv2d_shape_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None)


def test_conv2d_asymmetric_same_padding(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    y, _ = ops.conv2d(x, rng.standard_normal((3, 2, 2, 2)), None, padding=(0, 1, 0, 1))
    assert y.shape == (1, 3, 6, 6)


# --- conv_transpose2d -----------------------------------------------------------

TCONV_CASES = [  # (B, Cin, H, W, Cout, k, stride, pad)
    (1, 1, 3, 3, 1, 3, 1, 0),
    (1, 2, 4, 4, 3, 4, 2, 1),
    (2, 3, 3, 5, 2, 3, 2, 1),
    (1, 2, 2, 3, 2, 2, 2, 0),
    (2, 1, 4, 4, 2, 3, 1, 1),
]


def test_conv_transpose_unit_kernel_is_identity(rng):
    x = rng.standard_normal((1, 1, 4, 5)).astype(np.float32)
    y, _ = ops.conv_transpose2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32), 1, 0)
    np.testing.assert_array_equal(y, x)


def test_conv_transpose_doubles_resolution(rng):
    y, _ = ops.conv_transpose2d(rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 4, 4)), None, 2, 1)
    assert y.shape == (1, 1, 8, 8)


@pytest.mark.parametrize("case", TCONV_CASES)
def test_conv_transpose_matches_scatter_oracle(rng, case):
    B, Ci, H, W, Co, k, s, p = case
    x = rng.standard_normal((B, Ci, H, W))
    w = rng.standard_normal((Ci, Co, k, k))
    b = rng.standard_normal(Co)
    y, _ = ops.conv_transpose2d(x, w, b, s, p)
    assert y.shape[2:] == ((H - 1) * s + k - 2 * p, (W - 1) * s + k - 2 * p)
    np.testing.assert_allclose(y, conv_transpose2d_direct(x, w, b, s, p), atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 4, 4))
    y, _ = ops.conv2d(x, w, None, 2, 1)
    u = rng.standard_normal(y.shape)
    # conv_transpose with the same weight array (read as Cin=3 -> Cout=2) is the adjoint
    z, _ = ops.conv_transpose2d(u, w, None, 2, 1)
    assert np.isclose(np.sum(y * u), np.sum(x * z))


@pytest.mark.parametrize("case", TCONV_CASES)
def test_conv_transpose_gradients(rng, case):
    B, Ci, H, W, Co, k, s, p = case
    arrays = [rng.standard_normal((B, Ci, H, W)), rng.standard_normal((Ci, Co, k, k)), rng.standard_normal(Co)]
    worst = graph_gradcheck(lambda t: G.conv_transpose2d(t[0], t[1], t[2], s, p), arrays, rng)
    assert max(worst) <= 0, worst


# --- normalization --------------------------------------------------------------

NORM_SHAPES = [(2, 3, 4, 4), (4, 1, 3, 5), (3, 2, 2, 2), (2, 4, 5, 3), (5, 2, 1, 3)]


def test_batch_norm_train_standardizes(rng):
    x = rng.normal(3.0, 2.0, (4, 3, 5, 5))
    y, _ = ops.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batch_norm_updates_running_stats(rng):
    x = rng.normal(2.0, 1.0, (4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    y, _ = ops.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, False)
    np.testing.assert_allclose(y, (x - rm.reshape(1, -1, 1, 1)) / np.sqrt(rv.reshape(1, -1, 1, 1) + 1e-5))


def test_batch_norm_constant_channel_gives_beta():
    x = np.full((3, 2, 4, 4), 7.0)
    beta = np.array([0.3, -1.2])
    y, _ = ops.batch_norm(x, np.array([2.0, 5.0]), beta, np.zeros(2), np.ones(2), True)
    np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))


@pytest.mark.parametrize("shape", NORM_SHAPES)
@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradients(rng, shape, train):
    C = shape[1]
    rm, rv = rng.standard_normal(C), rng.uniform(0.5, 2.0, C)
    arrays = [rng.standard_normal(shape), rng.uniform(0.5, 1.5, C), rng.standard_normal(C)]

    def fn(t):
        return G.batch_norm(t[0], t[1], t[2], rm.copy(), rv.copy(), train)

    assert max(graph_gradcheck(fn, arrays, rng)) <= 0


def test_instance_norm_standardizes_each_item(rng):
    x = rng.normal(-1.0, 3.0, (3, 2, 6, 6))
    y, _ = ops.instance_norm(x, np.ones(2), np.zeros(2))
    assert np.all(np.abs(y.mean(axis=(2, 3))) < 1e-5)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-3)


def test_instance_norm_constant_gives_beta():
    x = np.stack([np.full((2, 3, 3), 1.0), np.full((2, 3, 3), -4.0)])
    beta = np.array([0.5, 2.0])
    y, _ = ops.instance_norm(x, np.ones(2), beta)
    np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))


@pytest.mark.parametrize("shape", NORM_SHAPES[:4] + [(1, 2, 3, 4)])
def test_instance_norm_gradients(rng, shape):
    C = shape[1]
    arrays = [rng.standard_normal(shape), rng.uniform(0.5, 1.5, C), rng.standard_normal(C)]
    assert max(graph_gradcheck(lambda t: G.instance_norm(*t), arrays, rng)) <= 0


# --- activations ----------------------------------------------------------------

def test_activation_values():
    assert ops.relu(np.array(-1.0)) == 0 and ops.relu(np.array(2.0)) == 2
    assert ops.tanh(np.array(0.0)) == 0
    assert ops.sigmoid(np.array(0.0)) == 0.5
    assert ops.leaky_relu(np.array(-1.0)) == pytest.approx(-0.2)


@pytest.mark.parametrize("act", [G.relu, G.leaky_relu, G.tanh, G.sigmoid])
@pytest.mark.parametrize("shape", [(1, 1, 3, 3), (2, 3, 4, 2), (3, 1, 5, 5), (1, 4, 2, 6), (2, 2, 1, 1)])
def test_activation_gradients(rng, act, shape):
    assert max(graph_gradcheck(lambda t: act(t[0]), [away_from_zero(rng, shape)], rng)) <= 0


# --- pooling / upsampling / padding --------------------------------------------

def test_max_pool_value():
    y, _ = ops.max_pool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert y.item() == 4.0


def test_upsample_then_pool_constant(rng):
    x = np.full((1, 2, 3, 3), 1.7)
    y, _ = ops.max_pool2d(ops.upsample_nearest(x))
    np.testing.assert_array_equal(y, x)


def test_max_pool_routes_gradient_to_argmax(rng):
    x = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    y, cache = ops.max_pool2d(x)
    dy = rng.standard_normal(y.shape)
    dx = ops.max_pool2d_backward(dy, cache)
    expected = np.zeros_like(x)
    for i in range(4):
        for j in range(4):
            block = x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
            r, c = np.unravel_index(np.argmax(block), (2, 2))
            expected[0, 0, 2 * i + r, 2 * j + c] = dy[0, 0, i, j]
    np.testing.assert_array_equal(dx, expected)


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 4, 4), (1, 2, 6, 4), (3, 1, 4, 8), (2, 2, 2, 6)])
def test_max_pool_gradients(rng, shape):
    # distinct values spaced far beyond the finite-difference step
    x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1
    assert max(graph_gradcheck(lambda t: G.max_pool2d(t[0]), [x], rng)) <= 0


@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (2, 3, 2, 2), (1, 2, 3, 4), (2, 1, 4, 1), (1, 4, 2, 3)])
def test_upsample_gradients(rng, shape):
    assert max(graph_gradcheck(lambda t: G.upsample_nearest(t[0]), [rng.standard_normal(shape)], rng)) <= 0


@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("shape", [(1, 1, 3, 3), (2, 2, 4, 5), (1, 3, 5, 4)])
def test_reflect_pad_gradients(rng, shape, p):
    x = rng.standard_normal(shape)
    y = ops.reflect_pad(x, p)
    np.testing.assert_array_equal(y, np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect"))
    assert max(graph_gradcheck(lambda t: G.reflect_pad(t[0], p), [x], rng)) <= 0


def test_concat_and_add_gradients(rng):
    arrays = [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3)), rng.standard_normal((1, 3, 3, 3))]
    worst = graph_gradcheck(lambda t: G.add(G.concat([t[0], t[1]]), G.tanh(t[2])), arrays, rng)
    assert max(worst) <= 0


# --- residual block ---------------------------------------------------------------

def _block_params(rng, channels):
    p = ModelParams()
    init_residual_block(p, rng, "res", channels)
    return p


def test_residual_block_zero_params_is_identity(rng):
    p = _block_params(rng, 4)
    for a in p.values.values():
        a[...] = 0
    x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
    y = residual_block(p.leaves(False), "res", x)
    np.testing.assert_array_equal(y.data, x.data)


@pytest.mark.parametrize("shape", [(1, 2, 4, 4), (2, 3, 5, 6), (1, 1, 3, 7), (3, 4, 8, 8), (1, 2, 2, 2)])
def test_residual_block_preserves_shape(rng, shape):
    p = _block_params(rng, shape[1])
    y = residual_block(p.leaves(False), "res", Tensor(rng.standard_normal(shape).astype(np.float32)))
    assert y.shape == shape


@pytest.mark.parametrize("shape", [(1, 2, 4, 4), (2, 2, 3, 5), (1, 1, 4, 3), (1, 3, 3, 3), (2, 1, 5, 4)])
def test_residual_block_gradients(rng, shape):
    C = shape[1]
    p = _block_params(rng, C)
    names = p.names()
    arrays = [rng.standard_normal(shape)] + [
        rng.standard_normal(p[n].shape) * (0.5 if n.endswith(".w") else 0.3) + (1.0 if n.endswith("gamma") else 0.0)
        for n in names]

    def fn(t):
        return residual_block(dict(zip(names, t[1:])), "res", t[0])

    assert max(graph_gradcheck(fn, arrays, rng)) <= 0


# --- Adam ---------------------------------------------------------------------------

def _scalar_params(value):
    p = ModelParams()
    p.add("p", np.array([value]))
    return p


def test_adam_zero_gradient_leaves_params():
    p = _scalar_params(1.5)
    adam_step(p, {"p": np.zeros(1, np.float32)}, AdamConfig(0.1))
    assert p["p"][0] == np.float32(1.5)
    assert p.t == 1


def test_adam_first_step_moves_by_learning_rate():
    p = _scalar_params(1.0)
    adam_step(p, {"p": np.ones(1, np.float32)}, AdamConfig(0.1))
    # t=1: m_hat = g, v_hat = g^2 so the step is lr * g / (|g| + eps)
    assert abs(p["p"][0] - (1.0 - 0.1 / (1 + 1e-8))) < 1e-6


def _adam_scalar_recurrence(p, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (p - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_quadratic_converges():
    p = _scalar_params(0.0)
    cfg = AdamConfig(0.1)
    for _ in range(200):
        adam_step(p, {"p": 2 * (p["p"] - 3)}, cfg)
    assert abs(p["p"][0] - 3) < 0.1
    assert abs(p["p"][0] - _adam_scalar_recurrence(0.0, 0.1, 200)) < 1e-3
    assert p.t == 200


def test_adam_rejects_shape_mismatch():
    p = _scalar_params(0.0)
    with pytest.raises(ValueError):
        adam_step(p, {"p": np.zeros(2, np.float32)}, AdamConfig(0.1))


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(0.0)
    with pytest.raises(ValueError):
        AdamConfig(0.1, beta1=1.0)


# --- checkpoints / determinism --------------------------------------------------------

def _trained_params(rng):
    p = ModelParams()
    p.add("a.w", rng.standard_normal((3, 2, 3, 3)))
    p.add("a.b", rng.standard_normal(3))
    p.add("bn.running_mean", rng.standard_normal(3))
    p.add("s", np.float32(2.0))
    for _ in range(3):
        adam_step(p, {n: rng.standard_normal(p[n].shape).astype(np.float32) for n in p.trainable()}, AdamConfig(0.01))
    return p


def test_checkpoint_round_trip_is_bit_exact(rng, tmp_path):
    p = _trained_params(rng)
    save_checkpoint(p, tmp_path / "x.nbc")
    q = load_checkpoint(tmp_path / "x.nbc")
    assert p.equals(q) and q.t == 3
    assert checkpoint_bytes(q) == (tmp_path / "x.nbc").read_bytes()
    assert q.trainable() == ["a.w", "a.b", "s"]


def test_checkpoint_layout(rng):
    p = ModelParams()
    p.add("k", np.arange(6).reshape(2, 3))
    buf = checkpoint_bytes(p)
    assert buf[:4] == b"NBC1"
    assert int.from_bytes(buf[4:8], "little") == 4  # k, k.m, k.v, adam.t
    assert buf[8:10] == (1).to_bytes(2, "little") and buf[10:11] == b"k"
    assert buf[11] == 2 and buf[12:20] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    np.testing.assert_array_equal(np.frombuffer(buf[20:44], "<f4"), np.arange(6))


def test_checkpoint_rejects_garbage(rng):
    with pytest.raises(CheckpointError):
        params_from_bytes(b"XXXX")
    buf = checkpoint_bytes(_trained_params(rng))
    with pytest.raises(CheckpointError):
        params_from_bytes(buf[:-3])


def test_forward_is_deterministic(rng):
    p = _block_params(np.random.default_rng(5), 3)
    q = _block_params(np.random.default_rng(5), 3)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    a = residual_block(p.leaves(False), "res", Tensor(x.copy())).data
    b = residual_block(q.leaves(False), "res", Tensor(x.copy())).data
    assert a.tobytes() == b.tobytes()


def test_duplicate_names_rejected():
    p = ModelParams()
    p.add("x", np.zeros(2))
    with pytest.raises(KeyError):
        p.add("x", np.zeros(2))
