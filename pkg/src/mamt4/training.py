"""Two-stage training.

Stage 1 fits the single-view CNN end to end with focal loss.  Stage 2
loads that backbone frozen, turns each exam's four views into feature
vectors, and trains only the fusion head on top.  Both stages share the
Adam optimizer, a reduce-on-plateau schedule keyed to test F1, early
stopping, and best-F1 checkpoint selection.

Epoch logs are CSV lines "epoch,loss,roc_auc,f1,f1_macro,lr"; training
configs round-trip through a plain key=value text format.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import data as dat
from . import imaging
from .data import AugmentConfig, AugmentStats
from .errors import EmptyDataset, InvalidConfig, MissingGradient, ParseError
from .losses import FocalConfig, alpha_from_counts, bce_with_logits_mean, focal_loss
from .metrics import MetricsReport, compute_report
from .models import (
    BackboneConfig,
    backbone_forward,
    MamT4Config,
    ModelState,
    UNetConfig,
    build_mamt4_state,
    build_single_view_state,
    build_unet_state,
    load_checkpoint,
    mamt4_forward,
    single_view_forward,
    unet_forward,
)
from .tensor import Tensor, backward, no_grad


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.  Defaults are the full-scale settings;
    desk_stage1/desk_stage2 give presets sized for the synthetic data."""

    lr0: float = 1e-5
    max_epochs: int = 200
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    improve_tol: float = 1e-4
    batch_size: int = 16
    seeds: tuple = (0,)
    stage: int = 1
    label_mode: str = "paper"
    preset: str = "desk"
    alpha_auto: bool = False
    focal: FocalConfig = field(default_factory=FocalConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise InvalidConfig(f"lr0 must be > 0, got {self.lr0}")
        if self.max_epochs < 1:
            raise InvalidConfig(f"max_epochs must be >= 1, got {self.max_epochs}")
        for name in ("plateau_patience", "early_stop_patience", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.improve_tol < 0:
            raise InvalidConfig(f"improve_tol must be >= 0, got {self.improve_tol}")
        if not self.seeds or any(int(s) < 0 for s in self.seeds):
            raise InvalidConfig(f"seeds must be a non-empty list of ints >= 0, got {self.seeds}")
        if self.stage not in (1, 2):
            raise InvalidConfig(f"stage must be 1 or 2, got {self.stage}")
        if self.label_mode not in ("paper", "alt"):
            raise InvalidConfig(f"label_mode must be paper or alt, got {self.label_mode!r}")
        if self.preset not in ("desk", "paper"):
            raise InvalidConfig(f"preset must be desk or paper, got {self.preset!r}")


def desk_stage1() -> TrainConfig:
    """Synthetic-data settings: the higher rate and longer patiences fit
    the from-scratch 64px model, where test F1 is noisy before the
    representation clicks (typically around epoch 10)."""
    return TrainConfig(lr0=1e-3, max_epochs=30, plateau_patience=10,
                       early_stop_patience=12, batch_size=16, stage=1,
                       alpha_auto=True, seeds=(0,))


def desk_stage2() -> TrainConfig:
    return TrainConfig(lr0=1e-3, max_epochs=40, plateau_patience=10,
                       early_stop_patience=20, batch_size=16, stage=2,
                       alpha_auto=True, seeds=(0,),
                       augment=AugmentConfig(empty_image_prob=0.2))


_CONFIG_KEYS = (
    "lr0", "max_epochs", "plateau_patience", "plateau_factor",
    "early_stop_patience", "improve_tol", "batch_size", "seeds", "stage",
    "label_mode", "preset",
    "focal.alpha1", "focal.gamma",
    "augment.crop_prob", "augment.empty_image_prob", "augment.hflip_prob",
    "augment.noise_sigma", "augment.dropout_count", "augment.dropout_size",
    "augment.seed",
)


def format_train_config(cfg: TrainConfig) -> str:
    alpha1 = "auto" if cfg.alpha_auto else repr(cfg.focal.alpha1)
    values = {
        "lr0": repr(cfg.lr0), "max_epochs": cfg.max_epochs,
        "plateau_patience": cfg.plateau_patience, "plateau_factor": repr(cfg.plateau_factor),
        "early_stop_patience": cfg.early_stop_patience, "improve_tol": repr(cfg.improve_tol),
        "batch_size": cfg.batch_size, "seeds": ",".join(str(s) for s in cfg.seeds),
        "stage": cfg.stage, "label_mode": cfg.label_mode, "preset": cfg.preset,
        "focal.alpha1": alpha1, "focal.gamma": repr(cfg.focal.gamma),
        "augment.crop_prob": repr(cfg.augment.crop_prob),
        "augment.empty_image_prob": repr(cfg.augment.empty_image_prob),
        "augment.hflip_prob": repr(cfg.augment.hflip_prob),
        "augment.noise_sigma": repr(cfg.augment.noise_sigma),
        "augment.dropout_count": cfg.augment.dropout_count,
        "augment.dropout_size": cfg.augment.dropout_size,
        "augment.seed": cfg.augment.seed,
    }
    return "\n".join(f"{k}={values[k]}" for k in _CONFIG_KEYS) + "\n"


def parse_train_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Overlay key=value lines (# comments allowed) onto ``base``."""
    cfg = base if base is not None else TrainConfig()
    top: dict = {}
    focal: dict = {}
    augment: dict = {}
    alpha_auto = cfg.alpha_auto
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _CONFIG_KEYS:
            raise ParseError(f"config line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ParseError(f"config line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            if key == "seeds":
                top["seeds"] = tuple(int(s) for s in raw.split(","))
            elif key in ("max_epochs", "plateau_patience", "early_stop_patience",
                         "batch_size", "stage"):
                top[key] = int(raw)
            elif key in ("lr0", "plateau_factor", "improve_tol"):
                top[key] = float(raw)
            elif key in ("label_mode", "preset"):
                top[key] = raw
            elif key == "focal.alpha1":
                if raw == "auto":
                    alpha_auto = True
                else:
                    alpha_auto = False
                    focal["alpha1"] = float(raw)
            elif key == "focal.gamma":
                focal["gamma"] = float(raw)
            elif key in ("augment.dropout_count", "augment.dropout_size", "augment.seed"):
                augment[key.split(".", 1)[1]] = int(raw)
            else:  # remaining augment.* floats
                augment[key.split(".", 1)[1]] = float(raw)
        except ValueError:
            raise ParseError(f"config line {lineno}: bad value {raw!r} for {key}") from None
    try:
        new_focal = replace(cfg.focal, **focal) if focal else cfg.focal
        new_augment = replace(cfg.augment, **augment) if augment else cfg.augment
        return replace(cfg, focal=new_focal, augment=new_augment,
                       alpha_auto=alpha_auto, **top)
    except InvalidConfig:
        raise
    except Exception as exc:
        raise ParseError(f"invalid config: {exc}") from None


def model_cfgs(preset: str):
    if preset == "paper":
        return BackboneConfig.paper(), MamT4Config.paper()
    return BackboneConfig.desk(), MamT4Config.desk()


# ---------------------------------------------------------------------------
# optimizer and schedule

class Adam:
    """Adam with bias correction; steps trainable parameters only and
    clears their gradients afterwards."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict = {}
        self._v: dict = {}

    def step(self, state: ModelState, lr: float) -> None:
        params = state.trainable()
        for p in params:
            if p.tensor.grad is None:
                raise MissingGradient(f"no gradient for trainable parameter {p.name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in params:
            g = p.tensor.grad
            m = self._m.get(p.name)
            if m is None:
                m = np.zeros_like(p.tensor.values)
                v = np.zeros_like(p.tensor.values)
            else:
                v = self._v[p.name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[p.name] = m
            self._v[p.name] = v
            p.tensor.values[...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.tensor.grad = None


def plateau_lr(f1_history, cfg: TrainConfig) -> float:
    """Learning rate in effect after the given test-F1 history.

    The first epoch sets the baseline without counting as an improvement;
    after plateau_patience consecutive non-improving epochs the rate is
    multiplied by plateau_factor, followed by a cooldown of the same
    length during which the counter stays frozen.
    """
    lr = cfg.lr0
    best = None
    bad = 0
    cooldown = 0
    for f1 in f1_history:
        if best is None:
            best = f1
            bad = 1
        elif f1 > best + cfg.improve_tol:
            best = f1
            bad = 0
        elif cooldown == 0:
            bad += 1
        if cooldown > 0:
            cooldown -= 1
        if cooldown == 0 and bad >= cfg.plateau_patience:
            lr *= cfg.plateau_factor
            bad = 0
            cooldown = cfg.plateau_patience
    return lr


# ---------------------------------------------------------------------------
# epoch records

LOG_HEADER = "epoch,loss,roc_auc,f1,f1_macro,lr"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    roc_auc: float
    f1: float
    f1_macro: float
    lr: float


def write_log(records, path) -> None:
    lines = [LOG_HEADER]
    for r in records:
        lines.append(f"{r.epoch},{r.loss!r},{r.roc_auc!r},{r.f1!r},{r.f1_macro!r},{r.lr!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_log(path) -> list:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ParseError(f"{path.name}: expected header {LOG_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(f"{path.name} line {lineno}: expected 6 fields")
        try:
            records.append(EpochRecord(int(parts[0]), *(float(p) for p in parts[1:])))
        except ValueError:
            raise ParseError(f"{path.name} line {lineno}: bad number") from None
    return records


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    root: Path
    train: list
    test: list
    cache: dat.ImageCache


def make_dataset(manifest_path, label_mode: str = "paper") -> Dataset:
    manifest_path = Path(manifest_path)
    exams = dat.load_manifest(manifest_path)
    samples = dat.make_samples(exams, label_mode)
    train, test = dat.split_samples(samples)
    root = manifest_path.parent
    return Dataset(root=root, train=train, test=test, cache=dat.ImageCache(root))


def _resolve_focal(cfg: TrainConfig, labels) -> FocalConfig:
    if not cfg.alpha_auto:
        return cfg.focal
    return alpha_from_counts(int(np.sum(labels)), len(labels), cfg.focal.gamma)


def _to_batch(images) -> Tensor:
    """Grayscale arrays -> [B,3,S,S] model input."""
    arr = np.stack(images)[:, None, :, :]
    return Tensor(np.repeat(arr, 3, axis=1))


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


# ---------------------------------------------------------------------------
# stage 1

def _stage1_scores(state, bcfg, images, batch_size):
    probs = []
    with no_grad():
        for batch in _chunks(images, batch_size):
            logits = single_view_forward(_to_batch(batch), state, bcfg)
            probs.append(expit(logits.values))
    return np.concatenate(probs)


def _eval_images(samples, cache, crop):
    """Test-time view of the primaries: mandatory crop when enabled."""
    out = []
    for s in samples:
        img = cache.get(s.primary)
        out.append(dat.crop_resize(img) if crop else img)
    return out


def train_stage1(cfg: TrainConfig, dataset: Dataset, seed: int | None = None):
    """Fit the single-view model; returns (best-F1 state, epoch records)."""
    if not dataset.train or not dataset.test:
        raise EmptyDataset("stage-1 training needs non-empty train and test splits")
    seed = int(cfg.seeds[0] if seed is None else seed)
    acfg = replace(cfg.augment, seed=seed)
    crop = acfg.crop_prob > 0
    bcfg, _ = model_cfgs(cfg.preset)

    train_labels = np.array([s.label for s in dataset.train], dtype=np.float64)
    focal = _resolve_focal(cfg, train_labels)
    state = build_single_view_state(bcfg, seed)
    adam = Adam()

    test_images = _eval_images(dataset.test, dataset.cache, crop)
    test_labels = np.array([s.label for s in dataset.test], dtype=np.float64)

    records: list = []
    best_f1 = -np.inf
    best_snap = None
    es_best = -np.inf
    es_bad = 0
    n = len(dataset.train)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = plateau_lr([r.f1 for r in records], cfg)
        perm = dat.derive_rng(seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for batch_idx in _chunks(perm, cfg.batch_size):
            imgs = []
            for idx in batch_idx:
                s = dataset.train[int(idx)]
                rng = dat.rng_for_sample(acfg.seed, epoch, int(idx))
                imgs.append(dat.augment_views([dataset.cache.get(s.primary)], acfg, rng)[0])
            logits = single_view_forward(_to_batch(imgs), state, bcfg)
            loss = focal_loss(logits, train_labels[batch_idx], focal)
            backward(loss)
            adam.step(state, lr)
            total += loss.item() * len(batch_idx)
        probs = _stage1_scores(state, bcfg, test_images, cfg.batch_size)
        rep = compute_report(probs, test_labels)
        records.append(EpochRecord(epoch, total / n, rep.roc_auc, rep.f1, rep.f1_macro, lr))
        if rep.f1 > best_f1:
            best_f1 = rep.f1
            best_snap = state.snapshot()
        if rep.f1 > es_best + cfg.improve_tol:
            es_best = rep.f1
            es_bad = 0
        else:
            es_bad += 1
            if es_bad >= cfg.early_stop_patience:
                break
    state.restore(best_snap)
    return state, records


# ---------------------------------------------------------------------------
# stage 2

class FeatureBank:
    """Per-image backbone features under a fixed (deterministic) policy.

    Valid whenever the pixel pipeline is deterministic per image: crop
    always or never, no stochastic pixel augmentation.  The frozen
    backbone makes features reusable across epochs, and replacing a
    companion's features with the all-black image's features is exactly
    the black-image substitution.
    """

    def __init__(self, state: ModelState, bcfg: BackboneConfig, cache: dat.ImageCache,
                 crop: bool, batch_size: int = 32):
        self.state = state
        self.bcfg = bcfg
        self.cache = cache
        self.crop = crop
        self.batch_size = batch_size
        self._feats: dict = {}
        black = np.zeros((bcfg.input_size, bcfg.input_size))
        self.black = self._compute([black])[0]

    def _compute(self, images):
        out = []
        with no_grad():
            for batch in _chunks(images, self.batch_size):
                feats = backbone_forward(_to_batch(batch), self.state, self.bcfg)
                out.extend(np.asarray(feats.values))
        return out

    def ensure(self, paths) -> None:
        todo = [p for p in dict.fromkeys(paths) if p is not None and p not in self._feats]
        if not todo:
            return
        images = [dat.crop_resize(self.cache.get(p)) if self.crop else self.cache.get(p)
                  for p in todo]
        for p, f in zip(todo, self._compute(images)):
            self._feats[p] = f

    def get(self, path) -> np.ndarray:
        if path is None:
            return self.black
        f = self._feats.get(path)
        if f is None:
            self.ensure([path])
            f = self._feats[path]
        return f


def _sample_feature_rows(sample, bank: FeatureBank, p_empty: float, rng,
                         stats: AugmentStats | None) -> np.ndarray:
    rows = [bank.get(sample.primary)]
    for comp in sample.companions:
        f = bank.get(comp)
        if comp is not None and p_empty > 0:
            if stats is not None:
                stats.blackout_draws += 1
            if rng.random() < p_empty:
                f = bank.black
                if stats is not None:
                    stats.blackouts += 1
        rows.append(f)
    return np.stack(rows)


def _stage2_scores(state, mcfg, samples, bank, batch_size):
    probs = []
    with no_grad():
        for batch in _chunks(samples, batch_size):
            rows = np.stack([_sample_feature_rows(s, bank, 0.0, None, None) for s in batch])
            logits = mamt4_forward(Tensor(rows), state, mcfg)
            probs.append(expit(logits.values))
    return np.concatenate(probs)


def _check_cacheable(acfg: AugmentConfig) -> None:
    if acfg.hflip_prob or acfg.noise_sigma or acfg.dropout_count or \
            acfg.crop_prob not in (0.0, 1.0):
        raise InvalidConfig(
            "stage 2 runs on cached per-image features; only crop_prob in {0,1} "
            "and empty_image_prob are supported (set pixel augmentations to 0)"
        )


def train_stage2(cfg: TrainConfig, dataset: Dataset, backbone_ckpt,
                 seed: int | None = None, stats: AugmentStats | None = None):
    """Fit the fusion head over a frozen backbone; returns (state, records)."""
    if not dataset.train or not dataset.test:
        raise EmptyDataset("stage-2 training needs non-empty train and test splits")
    seed = int(cfg.seeds[0] if seed is None else seed)
    acfg = replace(cfg.augment, seed=seed)
    _check_cacheable(acfg)
    crop = acfg.crop_prob > 0
    bcfg, mcfg = model_cfgs(cfg.preset)

    state = build_mamt4_state(bcfg, mcfg, seed)
    state.load_arrays(load_checkpoint(backbone_ckpt), prefix="backbone.", allow_extra=True)

    train_labels = np.array([s.label for s in dataset.train], dtype=np.float64)
    focal = _resolve_focal(cfg, train_labels)
    test_labels = np.array([s.label for s in dataset.test], dtype=np.float64)

    bank = FeatureBank(state, bcfg, dataset.cache, crop)
    all_paths = []
    for s in dataset.train + dataset.test:
        all_paths.append(s.primary)
        all_paths.extend(c for c in s.companions if c is not None)
    bank.ensure(all_paths)

    adam = Adam()
    records: list = []
    best_f1 = -np.inf
    best_snap = None
    es_best = -np.inf
    es_bad = 0
    n = len(dataset.train)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = plateau_lr([r.f1 for r in records], cfg)
        perm = dat.derive_rng(seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for batch_idx in _chunks(perm, cfg.batch_size):
            rows = []
            for idx in batch_idx:
                s = dataset.train[int(idx)]
                rng = dat.rng_for_sample(acfg.seed, epoch, int(idx))
                rows.append(_sample_feature_rows(s, bank, acfg.empty_image_prob, rng, stats))
            logits = mamt4_forward(Tensor(np.stack(rows)), state, mcfg)
            loss = focal_loss(logits, train_labels[batch_idx], focal)
            backward(loss)
            adam.step(state, lr)
            total += loss.item() * len(batch_idx)
        probs = _stage2_scores(state, mcfg, dataset.test, bank, cfg.batch_size)
        rep = compute_report(probs, test_labels)
        records.append(EpochRecord(epoch, total / n, rep.roc_auc, rep.f1, rep.f1_macro, lr))
        if rep.f1 > best_f1:
            best_f1 = rep.f1
            best_snap = state.snapshot()
        if rep.f1 > es_best + cfg.improve_tol:
            es_best = rep.f1
            es_bad = 0
        else:
            es_bad += 1
            if es_bad >= cfg.early_stop_patience:
                break
    state.restore(best_snap)
    return state, records


# ---------------------------------------------------------------------------
# evaluation

def evaluate(state: ModelState, dataset: Dataset, mode: str, cfg: TrainConfig,
             stats: AugmentStats | None = None) -> MetricsReport:
    """Score the test split.  Black-image substitution probability is
    forced to 0 here; the instrumentation counter proves it."""
    if mode not in ("single", "mamt4"):
        raise InvalidConfig(f"mode must be single or mamt4, got {mode!r}")
    if not dataset.test:
        raise EmptyDataset("evaluation needs a non-empty test split")
    if stats is None:
        stats = AugmentStats()
    before_draws, before_hits = stats.blackout_draws, stats.blackouts
    crop = cfg.augment.crop_prob > 0
    bcfg, mcfg = model_cfgs(cfg.preset)
    labels = np.array([s.label for s in dataset.test], dtype=np.float64)
    if mode == "single":
        images = _eval_images(dataset.test, dataset.cache, crop)
        probs = _stage1_scores(state, bcfg, images, cfg.batch_size)
    else:
        bank = FeatureBank(state, bcfg, dataset.cache, crop)
        probs = _stage2_scores(state, mcfg, dataset.test, bank, cfg.batch_size)
    assert stats.blackout_draws == before_draws and stats.blackouts == before_hits, \
        "evaluation must never draw black-image substitutions"
    return compute_report(probs, labels)


# ---------------------------------------------------------------------------
# segmentation training

@dataclass(frozen=True)
class MaskPair:
    image: str
    mask: str
    split: str


def make_mask_dataset(manifest_path) -> list:
    """(image, mask, split) triples via the masks/ naming convention."""
    exams = dat.load_manifest(Path(manifest_path))
    pairs = []
    for exam in exams:
        for key in dat.VIEW_ORDER:
            if key in exam.views:
                img = exam.views[key]
                pairs.append(MaskPair(img, dat.mask_path_for(img), exam.split))
    return pairs


def train_unet(cfg: TrainConfig, pairs, root, seed: int | None = None,
               unet_cfg: UNetConfig | None = None):
    """Per-pixel binary cross-entropy on (image, mask) pairs; returns
    (best-IoU state, records as (epoch, loss, iou, lr) tuples)."""
    seed = int(cfg.seeds[0] if seed is None else seed)
    ucfg = unet_cfg if unet_cfg is not None else UNetConfig.desk()
    root = Path(root)
    train = [p for p in pairs if p.split == "train"]
    test = [p for p in pairs if p.split == "test"]
    if not train or not test:
        raise EmptyDataset("segmentation needs non-empty train and test splits")

    def load(pair):
        img = imaging.read_image(root / pair.image)[None, :, :]
        mask = (imaging.read_image(root / pair.mask) > 0.5).astype(np.float64)[None, :, :]
        return img, mask

    train_data = [load(p) for p in train]
    test_data = [load(p) for p in test]

    state = build_unet_state(ucfg, seed)
    adam = Adam()
    records = []
    best_iou = -np.inf
    best_snap = None
    es_bad = 0
    n = len(train_data)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = dat.derive_rng(seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for batch_idx in _chunks(perm, cfg.batch_size):
            xs = np.stack([train_data[int(i)][0] for i in batch_idx])
            ys = np.stack([train_data[int(i)][1] for i in batch_idx])
            logits = unet_forward(Tensor(xs), state, ucfg)
            loss = bce_with_logits_mean(logits, ys)
            backward(loss)
            adam.step(state, cfg.lr0)
            total += loss.item() * len(batch_idx)
        ious = []
        with no_grad():
            for batch in _chunks(test_data, cfg.batch_size):
                xs = np.stack([b[0] for b in batch])
                logits = unet_forward(Tensor(xs), state, ucfg)
                preds = expit(logits.values) > 0.5
                for pred, (_, mask) in zip(preds, batch):
                    ious.append(imaging.iou(pred[0], mask[0] > 0.5))
        mean_iou = float(np.mean(ious))
        records.append((epoch, total / n, mean_iou, cfg.lr0))
        if mean_iou > best_iou + cfg.improve_tol:
            best_iou = mean_iou
            best_snap = state.snapshot()
            es_bad = 0
        else:
            es_bad += 1
            if es_bad >= cfg.early_stop_patience:
                break
    state.restore(best_snap)
    return state, records


def predict_mask(state: ModelState, img: np.ndarray, ucfg: UNetConfig) -> np.ndarray:
    with no_grad():
        logits = unet_forward(Tensor(img[None, :, :]), state, ucfg)
    return expit(logits.values[0]) > 0.5


UNET_LOG_HEADER = "epoch,loss,iou,lr"


def write_unet_log(records, path) -> None:
    lines = [UNET_LOG_HEADER]
    for epoch, loss, iou, lr in records:
        lines.append(f"{epoch},{loss!r},{iou!r},{lr!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_unet_log(path) -> list:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != UNET_LOG_HEADER:
        raise ParseError(f"{path.name}: expected header {UNET_LOG_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"{path.name} line {lineno}: expected 4 fields")
        try:
            records.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
        except ValueError:
            raise ParseError(f"{path.name} line {lineno}: bad number") from None
    return records


# ---------------------------------------------------------------------------
# multi-seed summary

def format_mean_std(values) -> str:
    """Percentage summary like "84.0 ± 1.7" (sample std over seeds)."""
    values = np.asarray(list(values), dtype=np.float64)
    mean = values.mean() * 100.0
    std = values.std(ddof=1) * 100.0 if values.size > 1 else 0.0
    return f"{mean:.1f} ± {std:.1f}"


def summarize_reports(reports) -> dict:
    return {
        "roc_auc": format_mean_std([r.roc_auc for r in reports]),
        "f1": format_mean_std([r.f1 for r in reports]),
        "f1_macro": format_mean_std([r.f1_macro for r in reports]),
    }
