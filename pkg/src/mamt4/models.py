"""Model definitions and checkpoint serialization.

Three networks share one parameter regime (ModelState of named Parameters):

* a single-view CNN backbone (conv-gelu-maxpool stages, 1x1 projection,
  global average pooling) with a scalar classification head;
* the four-view fusion model: each view's feature vector is reshaped into
  tokens, the four token groups are concatenated, a learnable class token
  is prepended, learnable positional embeddings are added, the sequence
  runs through a stack of pre-norm transformer encoder blocks, and the
  class-token row feeds a width-1 linear head;
* a small U-Net for breast-mask segmentation.

Checkpoints are a flat binary format: magic "MT4C", version, tensor count,
then per tensor name/rank/dims/float32 row-major values, and a trailing
CRC32 of everything before it.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CorruptCheckpoint,
    IncompatibleCheckpoint,
    InvalidConfig,
    InvalidShape,
)
from .layers import (
    Parameter,
    TEConfig,
    TE_PARAM_KEYS,
    conv2d,
    gelu,
    linear,
    pool2d,
    te_block,
    upsample_nearest,
    xavier_uniform,
)
from .tensor import Tensor, concat, matmul, no_grad, reduce_mean, reshape, slice_axis, zeros

CHECKPOINT_MAGIC = b"MT4C"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class BackboneConfig:
    """Single-view CNN: len(widths) conv-gelu-maxpool stages, then a 1x1
    projection to feature_dim and global average pooling."""

    input_size: int
    widths: tuple
    feature_dim: int
    in_channels: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        if not self.widths or min(self.widths) < 1:
            raise InvalidConfig(f"widths must be positive: {self.widths}")
        if self.feature_dim < 1 or self.input_size < 1 or self.in_channels < 1:
            raise InvalidConfig("backbone dimensions must be >= 1")
        if self.input_size % (2 ** len(self.widths)) != 0:
            raise InvalidConfig(
                f"input {self.input_size} not divisible by 2^{len(self.widths)} pooling stages"
            )

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls(input_size=64, widths=(8, 16, 32, 64), feature_dim=128)

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls(input_size=512, widths=(16, 32, 64, 128), feature_dim=1536)


@dataclass(frozen=True)
class MamT4Config:
    """Fusion head over four view feature vectors."""

    feature_dim: int
    tokens_per_view: int
    te: TEConfig
    num_views: int = 4

    def __post_init__(self):
        if self.tokens_per_view < 1 or self.num_views != 4:
            raise InvalidConfig("fusion needs tokens_per_view >= 1 and exactly 4 views")
        if self.feature_dim != self.tokens_per_view * self.te.token_dim:
            raise InvalidConfig(
                f"feature_dim {self.feature_dim} != tokens_per_view {self.tokens_per_view}"
                f" * token_dim {self.te.token_dim}"
            )

    @property
    def seq_len(self) -> int:
        return self.num_views * self.tokens_per_view + 1  # class token

    @classmethod
    def desk(cls) -> "MamT4Config":
        return cls(feature_dim=128, tokens_per_view=8, te=TEConfig.desk())

    @classmethod
    def paper(cls) -> "MamT4Config":
        return cls(feature_dim=1536, tokens_per_view=8, te=TEConfig.paper())


@dataclass(frozen=True)
class UNetConfig:
    """Encoder-decoder segmenter; input H and W divisible by 2**depth."""

    depth: int = 3
    base_width: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1:
            raise InvalidConfig("unet dimensions must be >= 1")

    @classmethod
    def desk(cls) -> "UNetConfig":
        return cls()


# ---------------------------------------------------------------------------
# parameter state

class ModelState:
    """Insertion-ordered named parameters with a structural fingerprint."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self.params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise InvalidConfig(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list:
        return list(self.params)

    def trainable(self) -> list:
        return [p for p in self.params.values() if p.trainable]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            shape = self.params[name].tensor.shape
            h.update(f"{name}:{','.join(map(str, shape))};".encode())
        return h.hexdigest()

    def freeze_prefix(self, prefix: str) -> None:
        for p in self.params.values():
            if p.name.startswith(prefix):
                p.freeze()

    def snapshot(self) -> dict:
        return {name: p.tensor.values.copy() for name, p in self.params.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for name, vals in snap.items():
            self.params[name].tensor.values[...] = vals

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "",
                    allow_extra: bool = False) -> None:
        """Copy checkpoint arrays into matching parameters.

        Every state parameter under ``prefix`` must be covered with the
        exact shape; anything else raises IncompatibleCheckpoint.  Extra
        checkpoint entries are rejected unless ``allow_extra``.
        """
        target = {n: p for n, p in self.params.items() if n.startswith(prefix)}
        for name, p in target.items():
            if name not in arrays:
                raise IncompatibleCheckpoint(f"checkpoint is missing {name!r}")
            vals = arrays[name]
            if tuple(vals.shape) != p.tensor.shape:
                raise IncompatibleCheckpoint(
                    f"{name!r}: checkpoint shape {tuple(vals.shape)} != model {p.tensor.shape}"
                )
        if not allow_extra:
            extra = set(arrays) - set(target)
            if extra:
                raise IncompatibleCheckpoint(f"unexpected checkpoint entries: {sorted(extra)}")
        for name, p in target.items():
            p.tensor.values[...] = arrays[name].astype(np.float64)


# ---------------------------------------------------------------------------
# initialization

def _rng(seed, *key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed),) + tuple(key))))


def _conv_param(name, cout, cin, k, rng) -> Parameter:
    fan_in = cin * k * k
    fan_out = cout * k * k
    return Parameter(name, xavier_uniform((cout, cin, k, k), fan_in, fan_out, rng))


def _backbone_params(cfg: BackboneConfig, seed: int, counter: list) -> list:
    params = []
    cin = cfg.in_channels
    k = cfg.kernel_size
    for i, width in enumerate(cfg.widths):
        counter[0] += 1
        params.append(_conv_param(f"backbone.stage{i}.kernel", width, cin, k, _rng(seed, counter[0])))
        params.append(Parameter(f"backbone.stage{i}.bias", zeros(width)))
        cin = width
    counter[0] += 1
    params.append(_conv_param("backbone.proj.kernel", cfg.feature_dim, cin, 1, _rng(seed, counter[0])))
    params.append(Parameter("backbone.proj.bias", zeros(cfg.feature_dim)))
    return params


def build_single_view_state(cfg: BackboneConfig, seed: int) -> ModelState:
    """Backbone plus scalar head; weights Xavier-uniform, biases zero."""
    counter = [0]
    params = _backbone_params(cfg, seed, counter)
    counter[0] += 1
    d = cfg.feature_dim
    params.append(Parameter("head.w", xavier_uniform((d, 1), d, 1, _rng(seed, counter[0]))))
    params.append(Parameter("head.b", zeros(1)))
    return ModelState(params)


def _te_block_params(prefix: str, cfg: TEConfig, seed: int, counter: list) -> list:
    d, m = cfg.token_dim, cfg.mlp_hidden
    params = []
    from .tensor import ones as ones_t
    params.append(Parameter(f"{prefix}.ln1.gain", ones_t(d)))
    params.append(Parameter(f"{prefix}.ln1.bias", zeros(d)))
    for wname in ("wq", "wk", "wv", "wo"):
        counter[0] += 1
        params.append(Parameter(f"{prefix}.attn.{wname}",
                                xavier_uniform((d, d), d, d, _rng(seed, counter[0]))))
    params.append(Parameter(f"{prefix}.ln2.gain", ones_t(d)))
    params.append(Parameter(f"{prefix}.ln2.bias", zeros(d)))
    counter[0] += 1
    params.append(Parameter(f"{prefix}.mlp.w1", xavier_uniform((d, m), d, m, _rng(seed, counter[0]))))
    params.append(Parameter(f"{prefix}.mlp.b1", zeros(m)))
    counter[0] += 1
    params.append(Parameter(f"{prefix}.mlp.w2", xavier_uniform((m, d), m, d, _rng(seed, counter[0]))))
    params.append(Parameter(f"{prefix}.mlp.b2", zeros(d)))
    return params


def build_mamt4_state(backbone_cfg: BackboneConfig, fusion_cfg: MamT4Config,
                      seed: int) -> ModelState:
    """Frozen-backbone fusion model: backbone.* (frozen) + fusion.* (trainable).

    Class token and positional embeddings start at zero per the init rule.
    """
    if backbone_cfg.feature_dim != fusion_cfg.feature_dim:
        raise InvalidConfig(
            f"backbone feature_dim {backbone_cfg.feature_dim} != fusion {fusion_cfg.feature_dim}"
        )
    counter = [0]
    params = _backbone_params(backbone_cfg, seed, counter)
    d = fusion_cfg.te.token_dim
    params.append(Parameter("fusion.class_token", zeros((1, d))))
    params.append(Parameter("fusion.pos_embed", zeros((fusion_cfg.seq_len, d))))
    for i in range(fusion_cfg.te.num_blocks):
        params.extend(_te_block_params(f"fusion.block{i}", fusion_cfg.te, seed, counter))
    counter[0] += 1
    params.append(Parameter("fusion.head.w", xavier_uniform((d, 1), d, 1, _rng(seed, counter[0]))))
    params.append(Parameter("fusion.head.b", zeros(1)))
    state = ModelState(params)
    state.freeze_prefix("backbone.")
    return state


def build_unet_state(cfg: UNetConfig, seed: int) -> ModelState:
    counter = [0]
    params = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        width = cfg.base_width * (2 ** i)
        counter[0] += 1
        params.append(_conv_param(f"unet.enc{i}.kernel", width, cin, 3, _rng(seed, counter[0])))
        params.append(Parameter(f"unet.enc{i}.bias", zeros(width)))
        cin = width
    counter[0] += 1
    bott = cfg.base_width * (2 ** cfg.depth)
    params.append(_conv_param("unet.bottleneck.kernel", bott, cin, 3, _rng(seed, counter[0])))
    params.append(Parameter("unet.bottleneck.bias", zeros(bott)))
    cin = bott
    for i in reversed(range(cfg.depth)):
        width = cfg.base_width * (2 ** i)
        counter[0] += 1
        params.append(_conv_param(f"unet.dec{i}.kernel", width, cin + width, 3, _rng(seed, counter[0])))
        params.append(Parameter(f"unet.dec{i}.bias", zeros(width)))
        cin = width
    counter[0] += 1
    params.append(_conv_param("unet.out.kernel", 1, cin, 1, _rng(seed, counter[0])))
    params.append(Parameter("unet.out.bias", zeros(1)))
    return ModelState(params)


# ---------------------------------------------------------------------------
# forward passes

def backbone_forward(x: Tensor, state: ModelState, cfg: BackboneConfig) -> Tensor:
    """Image [3,H,W] (or [B,3,H,W]) -> feature vector [D] (or [B,D])."""
    shape = x.shape
    spatial = shape[-2:]
    if len(shape) not in (3, 4) or shape[-3] != cfg.in_channels or \
            spatial != (cfg.input_size, cfg.input_size):
        raise InvalidShape(
            f"expected [{cfg.in_channels},{cfg.input_size},{cfg.input_size}]"
            f" (optionally batched), got {shape}"
        )
    t = x
    for i in range(len(cfg.widths)):
        t = conv2d(t, state[f"backbone.stage{i}.kernel"], state[f"backbone.stage{i}.bias"],
                   stride=1, padding="same")
        t = pool2d(gelu(t), "max", 2, 2)
    t = conv2d(t, state["backbone.proj.kernel"], state["backbone.proj.bias"],
               stride=1, padding="valid")
    return reduce_mean(t, axis=(-2, -1))


def single_view_forward(x: Tensor, state: ModelState, cfg: BackboneConfig) -> Tensor:
    """Image(s) -> raw logit(s); sigmoid is applied by losses/metrics."""
    feat = backbone_forward(x, state, cfg)
    out = linear(feat, state["head.w"], state["head.b"])
    if out.values.ndim == 1:  # single image: [1] -> scalar
        return reshape(out, ())
    return reshape(out, (out.shape[0],))


def tokenize_views(views: Tensor, cfg: MamT4Config) -> Tensor:
    """Feature vectors [4,D] (or [B,4,D]) -> token sequence [4*tpv, token_dim]."""
    d = cfg.te.token_dim
    if views.shape[-1] != cfg.feature_dim or views.shape[-2] != cfg.num_views:
        raise InvalidShape(f"expected [...,4,{cfg.feature_dim}], got {views.shape}")
    n = cfg.num_views * cfg.tokens_per_view
    if views.values.ndim == 2:
        return reshape(views, (n, d))
    return reshape(views, (views.shape[0], n, d))


def mamt4_forward(views: Tensor, state: ModelState, cfg: MamT4Config) -> Tensor:
    """Four feature vectors -> fusion logit.

    views: [4, D] for one exam or [B, 4, D] batched.
    """
    tokens = tokenize_views(views, cfg)
    batched = tokens.values.ndim == 3
    cls = state["fusion.class_token"]
    if batched:
        b = tokens.shape[0]
        cls = zeros((b, 1, cfg.te.token_dim)) + cls  # broadcast up with gradient
        seq = concat([cls, tokens], axis=1)
    else:
        seq = concat([cls, tokens], axis=0)
    seq = seq + state["fusion.pos_embed"]
    for i in range(cfg.te.num_blocks):
        block = {key: state[f"fusion.block{i}.{key}"] for key in TE_PARAM_KEYS}
        seq = te_block(seq, block, cfg.te)
    cls_out = slice_axis(seq, -2, 0, 1)  # [*, 1, d]
    if batched:
        cls_out = reshape(cls_out, (tokens.shape[0], cfg.te.token_dim))
        out = linear(cls_out, state["fusion.head.w"], state["fusion.head.b"])
        return reshape(out, (tokens.shape[0],))
    cls_out = reshape(cls_out, (cfg.te.token_dim,))
    out = linear(cls_out, state["fusion.head.w"], state["fusion.head.b"])
    return reshape(out, ())


def extract_features(views, state: ModelState, cfg: BackboneConfig) -> list:
    """Run the backbone over ordered view images with gradients disabled.

    ``views`` is a sequence of four image tensors ordered primary,
    ipsilateral, bilateral, bilateral-ipsilateral.
    """
    if len(views) != 4:
        raise InvalidShape(f"expected 4 views, got {len(views)}")
    out = []
    with no_grad():
        for v in views:
            out.append(backbone_forward(v, state, cfg).detach())
    return out


def unet_forward(x: Tensor, state: ModelState, cfg: UNetConfig) -> Tensor:
    """Image [C,H,W] (or batched) -> per-pixel mask logits of the same size."""
    shape = x.shape
    if len(shape) not in (3, 4) or shape[-3] != cfg.in_channels:
        raise InvalidShape(f"expected [{cfg.in_channels},H,W] (optionally batched), got {shape}")
    h, w = shape[-2:]
    div = 2 ** cfg.depth
    if h % div or w % div:
        raise InvalidShape(f"spatial dims {h}x{w} not divisible by {div}")
    skips = []
    t = x
    for i in range(cfg.depth):
        t = gelu(conv2d(t, state[f"unet.enc{i}.kernel"], state[f"unet.enc{i}.bias"]))
        skips.append(t)
        t = pool2d(t, "max", 2, 2)
    t = gelu(conv2d(t, state["unet.bottleneck.kernel"], state["unet.bottleneck.bias"]))
    for i in reversed(range(cfg.depth)):
        t = upsample_nearest(t, 2)
        t = concat([t, skips[i]], axis=-3)
        t = gelu(conv2d(t, state[f"unet.dec{i}.kernel"], state[f"unet.dec{i}.bias"]))
    return conv2d(t, state["unet.out.kernel"], state["unet.out.bias"], padding="valid")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: ModelState, path) -> None:
    """Write all parameters in insertion order as float32 with trailing CRC32."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(state.params))
    for name, p in state.params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        vals = p.tensor.values
        blob += struct.pack("<B", vals.ndim)
        for dim in vals.shape:
            blob += struct.pack("<I", dim)
        blob += vals.astype("<f4").tobytes(order="C")
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict:
    """Read a checkpoint into an ordered {name: float32 ndarray} mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpoint(f"{path}: CRC mismatch")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported version {version}")
    count = struct.unpack_from("<I", raw, 8)[0]
    offset = 12
    arrays: dict = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            n = 1
            for dim in dims:
                n *= dim
            vals = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset += 4 * n
            if name in arrays:
                raise CorruptCheckpoint(f"{path}: duplicate entry {name!r}")
            arrays[name] = vals.copy()
    except (struct.error, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: truncated or malformed ({exc})") from exc
    if offset != len(raw) - 4:
        raise CorruptCheckpoint(f"{path}: trailing bytes after {count} tensors")
    return arrays
