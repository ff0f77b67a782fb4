"""Model builders and forwards: token shape laws, init rules, freezing,
checkpoint format (CRC, round-trips, mismatch rejection)."""

import numpy as np
import pytest

from mamt4 import tensor as T
from mamt4.errors import (
    CorruptCheckpoint,
    IncompatibleCheckpoint,
    InvalidConfig,
    InvalidShape,
)
from mamt4.layers import TEConfig
from mamt4.models import (
    BackboneConfig,
    MamT4Config,
    ModelState,
    UNetConfig,
    backbone_forward,
    build_mamt4_state,
    build_single_view_state,
    build_unet_state,
    extract_features,
    load_checkpoint,
    mamt4_forward,
    save_checkpoint,
    single_view_forward,
    tokenize_views,
    unet_forward,
)
from mamt4.layers import Parameter


# ---------------------------------------------------------------------------
# configs

def test_backbone_config_divisibility():
    with pytest.raises(InvalidConfig):
        BackboneConfig(input_size=50, widths=(8, 16), feature_dim=32)
    cfg = BackboneConfig.desk()
    assert cfg.input_size % (2 ** len(cfg.widths)) == 0


def test_paper_token_law():
    cfg = MamT4Config.paper()
    assert cfg.feature_dim == 1536
    assert cfg.tokens_per_view == 8
    assert cfg.te.token_dim == 192
    assert cfg.num_views * cfg.tokens_per_view == 32
    assert cfg.seq_len == 33


def test_fusion_config_consistency():
    with pytest.raises(InvalidConfig):
        MamT4Config(feature_dim=100, tokens_per_view=8, te=TEConfig.desk())
    with pytest.raises(InvalidConfig):
        MamT4Config(feature_dim=128, tokens_per_view=8, te=TEConfig.desk(), num_views=3)


def test_unet_config_validation():
    with pytest.raises(InvalidConfig):
        UNetConfig(depth=0)


# ---------------------------------------------------------------------------
# tokenization

def test_tokenize_views_shapes():
    cfg = MamT4Config.desk()
    views = T.tensor(np.arange(4 * 128, dtype=np.float64).reshape(4, 128))
    tokens = tokenize_views(views, cfg)
    assert tokens.shape == (32, 16)
    # view i occupies rows [8i, 8(i+1)): reshape order is row-major
    assert tokens.values[8, 0] == 128.0
    batched = tokenize_views(T.tensor(np.zeros((3, 4, 128))), cfg)
    assert batched.shape == (3, 32, 16)
    with pytest.raises(InvalidShape):
        tokenize_views(T.tensor(np.zeros((4, 100))), cfg)


# ---------------------------------------------------------------------------
# state and init

def test_init_rules_zero_and_xavier():
    state = build_mamt4_state(BackboneConfig.desk(), MamT4Config.desk(), seed=0)
    assert np.array_equal(state["fusion.class_token"].values, np.zeros((1, 16)))
    assert np.array_equal(state["fusion.pos_embed"].values, np.zeros((33, 16)))
    assert np.array_equal(state["fusion.head.b"].values, np.zeros(1))
    assert np.array_equal(state["fusion.block0.ln1.gain"].values, np.ones(16))
    w = state["fusion.block0.attn.wq"].values
    bound = np.sqrt(6.0 / (16 + 16))
    assert np.abs(w).max() <= bound and np.abs(w).std() > 0


def test_init_deterministic_per_seed():
    a = build_single_view_state(BackboneConfig.desk(), seed=3)
    b = build_single_view_state(BackboneConfig.desk(), seed=3)
    c = build_single_view_state(BackboneConfig.desk(), seed=4)
    assert a.fingerprint() == b.fingerprint() == c.fingerprint()  # same shapes
    for name in a.names():
        assert np.array_equal(a[name].values, b[name].values)
    assert any(not np.array_equal(a[n].values, c[n].values) for n in a.names())


def test_backbone_frozen_in_fusion_state():
    state = build_mamt4_state(BackboneConfig.desk(), MamT4Config.desk(), seed=0)
    trainable = {p.name for p in state.trainable()}
    assert trainable and all(n.startswith("fusion.") for n in trainable)
    frozen = [n for n in state.names() if n.startswith("backbone.")]
    assert frozen and not any(n in trainable for n in frozen)


def test_state_rejects_duplicates():
    state = ModelState([Parameter("w", T.zeros((2,)))])
    with pytest.raises(InvalidConfig):
        state.add(Parameter("w", T.zeros((2,))))


def test_load_arrays_shape_and_name_checks():
    state = build_single_view_state(BackboneConfig.desk(), seed=0)
    arrays = {n: state[n].values.copy() for n in state.names()}
    missing = dict(arrays)
    missing.pop("head.w")
    with pytest.raises(IncompatibleCheckpoint):
        state.load_arrays(missing)
    bad_shape = dict(arrays)
    bad_shape["head.w"] = np.zeros((1, 1))
    with pytest.raises(IncompatibleCheckpoint):
        state.load_arrays(bad_shape)
    extra = dict(arrays)
    extra["bogus"] = np.zeros(1)
    with pytest.raises(IncompatibleCheckpoint):
        state.load_arrays(extra)
    state.load_arrays(extra, allow_extra=True)


def test_load_arrays_prefix_filters():
    full = build_mamt4_state(BackboneConfig.desk(), MamT4Config.desk(), seed=1)
    s1 = build_single_view_state(BackboneConfig.desk(), seed=2)
    arrays = {n: s1[n].values for n in s1.names()}
    full.load_arrays(arrays, prefix="backbone.", allow_extra=True)
    for name in s1.names():
        if name.startswith("backbone."):
            assert np.array_equal(full[name].values, s1[name].values)


# ---------------------------------------------------------------------------
# forwards

def test_backbone_output_shape():
    cfg = BackboneConfig.desk()
    x = T.tensor(np.zeros((2, 3, 64, 64)))
    state = build_single_view_state(cfg, seed=0)
    assert backbone_forward(x, state, cfg).shape == (2, cfg.feature_dim)
    single = backbone_forward(T.tensor(np.zeros((3, 64, 64))), state, cfg)
    assert single.shape == (cfg.feature_dim,)
    with pytest.raises(InvalidShape):
        backbone_forward(T.tensor(np.zeros((3, 32, 32))), state, cfg)


def test_single_view_forward_logit_shapes():
    cfg = BackboneConfig.desk()
    state = build_single_view_state(cfg, seed=0)
    batch = single_view_forward(T.tensor(np.zeros((3, 3, 64, 64))), state, cfg)
    assert batch.shape == (3,)
    one = single_view_forward(T.tensor(np.zeros((3, 64, 64))), state, cfg)
    assert one.shape == ()


def test_mamt4_forward_shapes_and_batch_consistency():
    bcfg, mcfg = BackboneConfig.desk(), MamT4Config.desk()
    state = build_mamt4_state(bcfg, mcfg, seed=0)
    rng = np.random.default_rng(0)
    views = rng.uniform(-1, 1, (2, 4, 128))
    batch = mamt4_forward(T.tensor(views), state, mcfg)
    assert batch.shape == (2,)
    for i in range(2):
        one = mamt4_forward(T.tensor(views[i]), state, mcfg)
        assert one.shape == ()
        assert one.item() == pytest.approx(batch.values[i], abs=1e-12)


def test_extract_features_four_views():
    cfg = BackboneConfig.desk()
    state = build_single_view_state(cfg, seed=0)
    views = [T.tensor(np.zeros((3, 64, 64))) for _ in range(4)]
    feats = extract_features(views, state, cfg)
    assert len(feats) == 4 and all(f.shape == (128,) for f in feats)
    assert all(f.node is None for f in feats)
    with pytest.raises(InvalidShape):
        extract_features(views[:3], state, cfg)


def test_unet_forward_is_shape_preserving():
    cfg = UNetConfig.desk()
    state = build_unet_state(cfg, seed=0)
    x = T.tensor(np.random.default_rng(1).uniform(0, 1, (1, 1, 32, 32)))
    assert unet_forward(x, state, cfg).shape == (1, 1, 32, 32)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bitexact(tmp_path):
    state = build_single_view_state(BackboneConfig.desk(), seed=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    arrays = load_checkpoint(path)
    assert list(arrays) == state.names()
    for name in state.names():
        assert arrays[name].dtype == np.float32
        assert np.array_equal(arrays[name], state[name].values.astype(np.float32))
    # a state rebuilt from the file saves to identical bytes
    clone = build_single_view_state(BackboneConfig.desk(), seed=6)
    clone.load_arrays(arrays)
    second = tmp_path / "clone.ckpt"
    save_checkpoint(clone, second)
    assert second.read_bytes() == path.read_bytes()


def test_checkpoint_crc_detects_corruption(tmp_path):
    state = build_single_view_state(BackboneConfig.desk(), seed=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_incompatible_with_other_model(tmp_path):
    unet = build_unet_state(UNetConfig.desk(), seed=0)
    path = tmp_path / "unet.ckpt"
    save_checkpoint(unet, path)
    clf = build_single_view_state(BackboneConfig.desk(), seed=0)
    with pytest.raises(IncompatibleCheckpoint):
        clf.load_arrays(load_checkpoint(path))


def test_snapshot_restore_roundtrip():
    state = build_single_view_state(BackboneConfig.desk(), seed=7)
    snap = state.snapshot()
    state["head.w"].values[...] += 1.0
    state.restore(snap)
    assert np.array_equal(state["head.w"].values, snap["head.w"])
