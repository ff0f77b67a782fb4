"""Neural layers: hand cases, brute-force oracles, and attention/TE
invariants (identity at zero weights, token-permutation equivariance)."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mamt4 import tensor as T
from mamt4.errors import InvalidConfig, InvalidShape, ShapeMismatch
from mamt4.layers import (
    TE_PARAM_KEYS,
    Parameter,
    TEConfig,
    conv2d,
    linear,
    msa,
    pool2d,
    te_block,
    upsample_nearest,
    xavier_uniform,
)


# ---------------------------------------------------------------------------
# linear

def test_linear_identity_weight():
    x = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = linear(x, T.tensor(np.eye(2)))
    assert np.array_equal(out.values, x.values)


def test_linear_hand_value_with_bias():
    x = T.tensor([1.0, 2.0])
    w = T.tensor([[1.0, 0.0, -1.0], [2.0, 1.0, 0.0]])
    b = T.tensor([0.5, -0.5, 0.0])
    assert np.array_equal(linear(x, w, b).values, [5.5, 1.5, -1.0])


def test_linear_batched_token_head():
    x = T.tensor(np.ones((5, 192)))
    w = T.tensor(np.full((192, 1), 0.01))
    out = linear(x, w, T.tensor([0.5]))
    assert out.shape == (5, 1)
    assert np.allclose(out.values, 192 * 0.01 + 0.5, atol=1e-12)


def test_linear_shape_errors():
    x = T.tensor([[1.0, 2.0]])
    with pytest.raises(ShapeMismatch):
        linear(x, T.tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeMismatch):
        linear(x, T.tensor(np.zeros((2, 3))), T.tensor([1.0]))


# ---------------------------------------------------------------------------
# init

def test_xavier_uniform_bound_and_determinism():
    fan_in, fan_out = 30, 50
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    a = xavier_uniform((30, 50), fan_in, fan_out, np.random.default_rng(2))
    b = xavier_uniform((30, 50), fan_in, fan_out, np.random.default_rng(2))
    assert np.array_equal(a.values, b.values)
    assert np.abs(a.values).max() <= bound
    # the sample should actually use the range, not collapse near zero
    assert np.abs(a.values).max() > 0.5 * bound


def test_parameter_freeze():
    p = Parameter("w", T.zeros((2, 2)))
    assert p.trainable and p.tensor.requires_grad
    p.freeze()
    assert not p.trainable and not p.tensor.requires_grad


# ---------------------------------------------------------------------------
# convolution

def test_conv2d_one_by_one_identity():
    x = T.tensor(np.random.default_rng(0).uniform(0, 1, (1, 5, 5)))
    k = T.tensor(np.ones((1, 1, 1, 1)))
    assert np.allclose(conv2d(x, k).values, x.values, atol=1e-15)


def test_conv2d_box_kernel_interior():
    x = T.tensor(np.ones((1, 5, 5)))
    k = T.tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, k).values  # same padding
    assert out.shape == (1, 5, 5)
    assert out[0, 2, 2] == 9.0   # full interior support
    assert out[0, 0, 0] == 4.0   # corner sees a 2x2 patch


def _conv_oracle(xv, kv, stride, pad):
    b, cin, h, w = xv.shape
    cout, _, k, _ = kv.shape
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    for ci in range(cin):
                        patch = xp[bi, ci, i * stride:i * stride + k, j * stride:j * stride + k]
                        out[bi, co, i, j] += (patch * kv[co, ci]).sum()
    return out


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "valid")])
def test_conv2d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(7)
    xv = rng.uniform(-1, 1, (2, 2, 5, 5))
    kv = rng.uniform(-1, 1, (3, 2, 3, 3))
    bv = rng.uniform(-1, 1, (3,))
    pad = 1 if padding == "same" else 0
    want = _conv_oracle(xv, kv, stride, pad) + bv[None, :, None, None]
    got = conv2d(T.tensor(xv), T.tensor(kv), T.tensor(bv), stride=stride, padding=padding)
    assert np.allclose(got.values, want, atol=1e-10)


def test_conv2d_shape_law():
    x = T.tensor(np.zeros((1, 1, 9, 9)))
    assert conv2d(x, T.tensor(np.zeros((4, 1, 3, 3)))).shape == (1, 4, 9, 9)
    assert conv2d(x, T.tensor(np.zeros((4, 1, 3, 3))), stride=2, padding="valid").shape == (1, 4, 4, 4)


def test_conv2d_rejects_bad_kernels():
    x = T.tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(InvalidShape):
        conv2d(x, T.tensor(np.zeros((1, 1, 2, 2))))  # even kernel
    with pytest.raises(InvalidShape):
        conv2d(x, T.tensor(np.zeros((1, 1, 3))))  # not 4-D
    with pytest.raises(ShapeMismatch):
        conv2d(x, T.tensor(np.zeros((1, 2, 3, 3))))  # channel mismatch
    with pytest.raises(InvalidConfig):
        conv2d(x, T.tensor(np.zeros((1, 1, 3, 3))), padding="full")


# ---------------------------------------------------------------------------
# pooling and upsampling

def test_pool2d_hand_values():
    x = T.tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
    mx = pool2d(x, "max", 2)
    av = pool2d(x, "avg", 2)
    assert np.array_equal(mx.values, [[[5.0, 7.0], [13.0, 15.0]]])
    assert np.array_equal(av.values, [[[2.5, 4.5], [10.5, 12.5]]])


def test_pool2d_max_tie_routes_to_first():
    x = T.Tensor(np.full((1, 2, 2), 3.0), requires_grad=True)
    T.backward(T.reduce_sum(pool2d(x, "max", 2)))
    # all four tie; gradient goes to the first window position only
    assert np.array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_pool2d_avg_gradient_shares():
    x = T.Tensor(np.zeros((1, 2, 2)), requires_grad=True)
    T.backward(T.reduce_sum(pool2d(x, "avg", 2)))
    assert np.array_equal(x.grad, np.full((1, 2, 2), 0.25))


def test_pool2d_rejects_bad_window():
    with pytest.raises(InvalidShape):
        pool2d(T.tensor(np.zeros((1, 2, 2))), "max", 3)
    with pytest.raises(InvalidConfig):
        pool2d(T.tensor(np.zeros((1, 2, 2))), "median", 2)


def test_upsample_nearest_values_and_grad():
    x = T.Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
    up = upsample_nearest(x, 2)
    assert up.shape == (1, 4, 4)
    assert np.array_equal(up.values[0, :2, :2], np.ones((2, 2)))
    T.backward(T.reduce_sum(up))
    assert np.array_equal(x.grad, np.full((1, 2, 2), 4.0))


# ---------------------------------------------------------------------------
# attention

def _np_msa(xv, wq, wk, wv, wo, heads):
    """Plain numpy reference for multi-head self-attention."""
    d = xv.shape[-1]
    dh = d // heads
    q, k, v = xv @ wq, xv @ wk, xv @ wv
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[..., sl] @ k[..., sl].T / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        outs.append(attn @ v[..., sl])
    return np.concatenate(outs, axis=-1) @ wo


def test_msa_matches_numpy_reference():
    rng = np.random.default_rng(5)
    xv = rng.uniform(-1, 1, (6, 8))
    mats = [rng.uniform(-0.5, 0.5, (8, 8)) for _ in range(4)]
    got = msa(T.tensor(xv), *[T.tensor(m) for m in mats], num_heads=2).values
    assert np.allclose(got, _np_msa(xv, *mats, heads=2), atol=1e-12)


def test_msa_attention_rows_sum_to_one():
    rng = np.random.default_rng(6)
    xv = rng.uniform(-1, 1, (7, 8))
    wq = rng.uniform(-0.5, 0.5, (8, 8))
    wk = rng.uniform(-0.5, 0.5, (8, 8))
    x, dh = T.tensor(xv), 4
    for h in range(2):
        qh = T.slice_axis(T.matmul(x, T.tensor(wq)), -1, h * dh, (h + 1) * dh)
        kh = T.slice_axis(T.matmul(x, T.tensor(wk)), -1, h * dh, (h + 1) * dh)
        attn = T.softmax(T.matmul(qh, T.transpose2d(kh)) * (1.0 / np.sqrt(dh)), axis=-1)
        assert np.allclose(attn.values.sum(axis=-1), 1.0, atol=1e-9)


def test_msa_shape_guards():
    x = T.tensor(np.zeros((3, 8)))
    w = T.tensor(np.zeros((8, 8)))
    with pytest.raises(ShapeMismatch):
        msa(x, T.tensor(np.zeros((8, 4))), w, w, w, 2)
    with pytest.raises(InvalidConfig):
        msa(x, w, w, w, w, 3)  # 8 % 3 != 0
    with pytest.raises(InvalidShape):
        msa(T.tensor(np.zeros(8)), w, w, w, w, 2)


# ---------------------------------------------------------------------------
# transformer encoder block

def _zero_te_params(cfg):
    d, m = cfg.token_dim, cfg.mlp_hidden
    shapes = {
        "ln1.gain": (d,), "ln1.bias": (d,),
        "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
        "ln2.gain": (d,), "ln2.bias": (d,),
        "mlp.w1": (d, m), "mlp.b1": (m,), "mlp.w2": (m, d), "mlp.b2": (d,),
    }
    return {k: T.zeros(shapes[k]) for k in TE_PARAM_KEYS}


def _random_te_params(cfg, rng):
    zero = _zero_te_params(cfg)
    return {k: T.tensor(rng.uniform(-0.5, 0.5, t.shape)) for k, t in zero.items()}


def test_te_block_zero_weights_exact_identity():
    cfg = TEConfig(num_blocks=1, num_heads=2, token_dim=16, mlp_hidden=32)
    x = T.tensor(np.random.default_rng(8).uniform(-2, 2, (9, 16)))
    out = te_block(x, _zero_te_params(cfg), cfg)
    assert np.array_equal(out.values, x.values)


@pytest.mark.parametrize("tokens,dim,hidden", [(1, 16, 64), (33, 16, 64), (5, 192, 768)])
def test_te_block_preserves_shape(tokens, dim, hidden):
    heads = 2 if dim == 16 else 12
    cfg = TEConfig(num_blocks=1, num_heads=heads, token_dim=dim, mlp_hidden=hidden)
    rng = np.random.default_rng(9)
    x = T.tensor(rng.uniform(-1, 1, (tokens, dim)))
    assert te_block(x, _random_te_params(cfg, rng), cfg).shape == (tokens, dim)


def test_te_block_permutation_equivariant_bit_exact():
    cfg = TEConfig(num_blocks=1, num_heads=2, token_dim=8, mlp_hidden=16)
    rng = np.random.default_rng(10)
    params = _random_te_params(cfg, rng)
    xv = rng.uniform(-1, 1, (8, 8))
    perm = rng.permutation(8)
    direct = te_block(T.tensor(xv[perm]), params, cfg).values
    permuted = te_block(T.tensor(xv), params, cfg).values[perm]
    assert np.array_equal(direct, permuted)


def test_te_block_rejects_width_mismatch():
    cfg = TEConfig(num_blocks=1, num_heads=2, token_dim=8, mlp_hidden=16)
    with pytest.raises(ShapeMismatch):
        te_block(T.tensor(np.zeros((3, 4))), _zero_te_params(cfg), cfg)


def test_te_config_validation():
    with pytest.raises(InvalidConfig):
        TEConfig(num_blocks=1, num_heads=3, token_dim=8, mlp_hidden=16)
    paper = TEConfig.paper()
    assert (paper.num_blocks, paper.num_heads, paper.token_dim) == (12, 12, 192)
    assert paper.head_dim == 16
    desk = TEConfig.desk()
    assert desk.token_dim == 16 and desk.head_dim == desk.token_dim // desk.num_heads


# ---------------------------------------------------------------------------
# properties

@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_msa_row_stochastic_property(tokens, seed):
    rng = np.random.default_rng(seed)
    xv = rng.uniform(-2, 2, (tokens, 4))
    q = xv @ rng.uniform(-1, 1, (4, 4))
    k = xv @ rng.uniform(-1, 1, (4, 4))
    attn = T.softmax(T.matmul(T.tensor(q), T.transpose2d(T.tensor(k))) * 0.5, axis=-1)
    assert np.allclose(attn.values.sum(axis=-1), 1.0, atol=1e-9)
