"""Neural network layers built on the tensor engine.

Spatial layers accept [C,H,W] or batched [B,C,H,W]; sequence layers accept
[T,D] or [B,T,D].  Convolutions run as im2col matrix products; their input
gradient is computed as a transposed convolution (dilate, pad, correlate
with the flipped kernel) so no scatter-add is needed on the hot path.

The attention forward pass sums attention weights and weighted values with
``sorted_sum`` so that permuting tokens permutes outputs bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InvalidConfig, InvalidShape, ShapeMismatch
from .tensor import (
    Tensor,
    apply_op,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    slice_axis,
    softmax,
    sorted_sum,
    transpose2d,
)


@dataclass(frozen=True)
class TEConfig:
    """Transformer-encoder stack dimensions."""

    num_blocks: int
    num_heads: int
    token_dim: int
    mlp_hidden: int
    eps: float = 1e-5

    def __post_init__(self):
        if min(self.num_blocks, self.num_heads, self.token_dim, self.mlp_hidden) < 1:
            raise InvalidConfig(f"all TE dimensions must be >= 1: {self}")
        if self.token_dim % self.num_heads != 0:
            raise InvalidConfig(
                f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.eps <= 0:
            raise InvalidConfig(f"eps must be positive, got {self.eps}")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.num_heads

    @classmethod
    def paper(cls) -> "TEConfig":
        return cls(num_blocks=12, num_heads=12, token_dim=192, mlp_hidden=768)

    @classmethod
    def desk(cls) -> "TEConfig":
        return cls(num_blocks=2, num_heads=4, token_dim=16, mlp_hidden=64)


@dataclass
class Parameter:
    """Named model weight; trainable mirrors tensor.requires_grad."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    def freeze(self):
        self.trainable = False
        self.tensor.requires_grad = False
        self.tensor.grad = None


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise InvalidConfig(f"fans must be >= 1, got ({fan_in}, {fan_out})")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)))


# ---------------------------------------------------------------------------
# dense

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for x of shape [*, in], w [in, out], b [out]."""
    if w.values.ndim != 2:
        raise ShapeMismatch(f"weight must be rank 2, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    was_vector = x.values.ndim == 1
    if was_vector:
        x = reshape(x, (1, x.shape[0]))
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b
    if was_vector:
        out = reshape(out, (w.shape[1],))
    return out


# ---------------------------------------------------------------------------
# convolution

def _as_batched(x: Tensor, rank: int):
    if x.values.ndim == rank:
        return x.values[None, ...], True
    if x.values.ndim == rank + 1:
        return x.values, False
    raise InvalidShape(f"expected rank {rank} or {rank + 1}, got {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int):
    """[B,C,Hp,Wp] -> patches [B, Ho*Wo, C*k*k] plus output dims."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _conv_values(xv: np.ndarray, kv: np.ndarray, stride: int, pad: int):
    k = kv.shape[-1]
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = kv.reshape(kv.shape[0], -1)
    out = cols @ wmat.T  # [B, Ho*Wo, Cout]
    b = xv.shape[0]
    return out.transpose(0, 2, 1).reshape(b, kv.shape[0], ho, wo), cols


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation with square odd kernels.

    padding "same" pads by (k-1)/2; "valid" pads by zero.  Output spatial
    size is floor((H + 2p - k) / stride) + 1.
    """
    kv = kernels.values
    if kv.ndim != 4 or kv.shape[-1] != kv.shape[-2]:
        raise InvalidShape(f"kernels must be [Cout,Cin,k,k], got {kernels.shape}")
    k = kv.shape[-1]
    if k % 2 == 0:
        raise InvalidShape(f"kernel size must be odd, got {k}")
    if stride < 1:
        raise InvalidConfig(f"stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise InvalidConfig(f"padding must be 'same' or 'valid', got {padding!r}")
    pad = (k - 1) // 2 if padding == "same" else 0

    xv, squeeze = _as_batched(x, 3)
    if xv.shape[1] != kv.shape[1]:
        raise ShapeMismatch(f"input channels {xv.shape[1]} != kernel channels {kv.shape[1]}")
    h, w = xv.shape[2], xv.shape[3]
    if h + 2 * pad < k or w + 2 * pad < k:
        raise InvalidShape(f"kernel {k} larger than padded input {(h + 2 * pad, w + 2 * pad)}")

    out, cols = _conv_values(xv, kv, stride, pad)
    bv = None
    if bias is not None:
        if bias.shape != (kv.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({kv.shape[0]},)")
        bv = bias.values
        out = out + bv[None, :, None, None]

    cout = kv.shape[0]
    cin = kv.shape[1]

    def grad_fn(g):
        if squeeze:
            g = g[None, ...]
        b_sz, _, ho, wo = g.shape
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)  # [B*Ho*Wo, Cout]
        dw = (gmat.T @ cols.reshape(-1, cin * k * k)).reshape(kv.shape)

        # input gradient as a stride-1 correlation of the dilated output
        # gradient with the flipped kernel, channels swapped
        hd = (ho - 1) * stride + 1
        wd = (wo - 1) * stride + 1
        gd = np.zeros((b_sz, cout, hd, wd))
        gd[:, :, ::stride, ::stride] = g
        back_pad = k - 1 - pad
        rem_h = h + 2 * pad - k - (ho - 1) * stride
        rem_w = w + 2 * pad - k - (wo - 1) * stride
        gd = np.pad(gd, ((0, 0), (0, 0),
                         (back_pad, back_pad + rem_h),
                         (back_pad, back_pad + rem_w)))
        kflip = kv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [Cin,Cout,k,k]
        dx, _ = _conv_values(gd, np.ascontiguousarray(kflip), 1, 0)
        db = gmat.sum(axis=0) if bv is not None else None
        if squeeze:
            dx = dx[0]
        if bias is not None:
            return dx, dw, db
        return dx, dw

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    result = out[0] if squeeze else out
    return apply_op("conv2d", inputs, result, grad_fn)


# ---------------------------------------------------------------------------
# pooling / upsampling

def pool2d(x: Tensor, op: str = "max", window: int = 2, stride: int | None = None) -> Tensor:
    """Max or average pooling; max ties resolve to the first position in
    row-major window order."""
    if op not in ("max", "avg"):
        raise InvalidConfig(f"pool op must be 'max' or 'avg', got {op!r}")
    if window < 1:
        raise InvalidConfig(f"window must be >= 1, got {window}")
    stride = window if stride is None else stride
    if stride < 1:
        raise InvalidConfig(f"stride must be >= 1, got {stride}")

    xv, squeeze = _as_batched(x, 3)
    b, c, h, w = xv.shape
    if h < window or w < window:
        raise InvalidShape(f"window {window} larger than input {(h, w)}")
    win = np.lib.stride_tricks.sliding_window_view(xv, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, window * window)

    if op == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        out = flat.mean(axis=-1)

    def grad_fn(g):
        if squeeze:
            g = g[None, ...]
        dx = np.zeros_like(xv)
        if op == "max":
            ii = idx // window
            jj = idx % window
            bi, ci, oi, oj = np.indices(idx.shape)
            rows = oi * stride + ii
            cols_ = oj * stride + jj
            if stride >= window:  # windows disjoint, indices unique
                dx[bi, ci, rows, cols_] = g
            else:
                np.add.at(dx, (bi, ci, rows, cols_), g)
        else:
            share = g / (window * window)
            if stride == window and ho * window == h and wo * window == w:
                dx = np.broadcast_to(
                    share[:, :, :, None, :, None],
                    (b, c, ho, window, wo, window),
                ).reshape(b, c, h, w).copy()
            else:
                bi, ci, oi, oj = np.indices((b, c, ho, wo))
                for di in range(window):
                    for dj in range(window):
                        np.add.at(dx, (bi, ci, oi * stride + di, oj * stride + dj), share)
        if squeeze:
            dx = dx[0]
        return (dx,)

    result = out[0] if squeeze else out
    return apply_op("pool2d", (x,), result, grad_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise InvalidConfig(f"factor must be >= 1, got {factor}")
    xv, squeeze = _as_batched(x, 3)
    out = xv.repeat(factor, axis=2).repeat(factor, axis=3)

    def grad_fn(g):
        if squeeze:
            g = g[None, ...]
        b, c, hf, wf = g.shape
        dx = g.reshape(b, c, hf // factor, factor, wf // factor, factor).sum(axis=(3, 5))
        if squeeze:
            dx = dx[0]
        return (dx,)

    result = out[0] if squeeze else out
    return apply_op("upsample", (x,), result, grad_fn)


# ---------------------------------------------------------------------------
# attention

def _attend(attn: Tensor, v: Tensor) -> Tensor:
    """attn @ v with an order-independent sum over the token axis."""
    av, vv = attn.values, v.values
    prod = av[..., :, :, None] * vv[..., None, :, :]  # [*, T, T, d]
    out = sorted_sum(prod, axis=-2)

    def grad_fn(g):
        da = g @ np.swapaxes(vv, -1, -2)
        dv = np.swapaxes(av, -1, -2) @ g
        return da, dv

    return apply_op("attend", (attn, v), out, grad_fn)


def msa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, num_heads: int) -> Tensor:
    """Multi-head self-attention over tokens x [*, T, D].

    Per head h with d = D / num_heads: A = softmax(Q_h K_h^T / sqrt(d)),
    heads concatenated and projected by wo.
    """
    d_model = x.shape[-1]
    if x.values.ndim not in (2, 3):
        raise InvalidShape(f"msa input must be [T,D] or [B,T,D], got {x.shape}")
    for name, wm in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if wm.shape != (d_model, d_model):
            raise ShapeMismatch(f"{name} must be [{d_model},{d_model}], got {wm.shape}")
    if num_heads < 1 or d_model % num_heads != 0:
        raise InvalidConfig(f"token_dim {d_model} not divisible by num_heads {num_heads}")
    dh = d_model // num_heads
    scale = 1.0 / math.sqrt(dh)

    q = matmul(x, wq)
    kk = matmul(x, wk)
    v = matmul(x, wv)
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_axis(q, -1, lo, hi)
        kh = slice_axis(kk, -1, lo, hi)
        vh = slice_axis(v, -1, lo, hi)
        scores = matmul(qh, transpose2d(kh)) * scale
        attn = softmax(scores, axis=-1)
        heads.append(_attend(attn, vh))
    merged = concat(heads, axis=-1) if num_heads > 1 else heads[0]
    return matmul(merged, wo)


TE_PARAM_KEYS = (
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


def te_block(x: Tensor, params: Mapping[str, Tensor], cfg: TEConfig) -> Tensor:
    """Pre-norm transformer encoder block:
    y = x + msa(ln(x)); out = y + mlp(ln(y)), mlp = linear-gelu-linear."""
    if x.shape[-1] != cfg.token_dim:
        raise ShapeMismatch(f"input width {x.shape[-1]} != token_dim {cfg.token_dim}")
    p = params
    y = x + msa(layer_norm(x, p["ln1.gain"], p["ln1.bias"], cfg.eps),
                p["attn.wq"], p["attn.wk"], p["attn.wv"], p["attn.wo"],
                cfg.num_heads)
    hidden = gelu(linear(layer_norm(y, p["ln2.gain"], p["ln2.bias"], cfg.eps),
                         p["mlp.w1"], p["mlp.b1"]))
    return y + linear(hidden, p["mlp.w2"], p["mlp.b2"])
