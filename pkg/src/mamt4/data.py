"""Exam-level data handling for four-view mammography.

An exam is one patient study with up to four screening views: two
projections (CC, MLO) per breast (L, R).  Each image carries a BI-RADS
grade 1..5 that maps to a binary label, and classification samples are
built per image: the image under prediction ("primary") plus its three
companion views in a fixed order (same breast other projection, other
breast same projection, other breast other projection).

Also provides train-time augmentation (crop / flip / noise / coarse
dropout / companion blackout) and a synthetic 64x64 four-view generator
used for desk-scale verification.

Manifest format: CSV with header ``study_id,laterality,view,birads,split,path``,
UTF-8, LF line endings.  Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .errors import (
    DuplicateView,
    EmptyDataset,
    InvalidConfig,
    InvalidLabel,
    MissingView,
    ParseError,
)

LATERALITIES = ("L", "R")
PROJECTIONS = ("CC", "MLO")
VIEW_ORDER = (("L", "CC"), ("L", "MLO"), ("R", "CC"), ("R", "MLO"))
_OTHER_LAT = {"L": "R", "R": "L"}
_OTHER_PROJ = {"CC": "MLO", "MLO": "CC"}

CANCER, NORMAL, EXCLUDED = "cancer", "normal", "excluded"

MANIFEST_HEADER = ("study_id", "laterality", "view", "birads", "split", "path")


def derive_rng(seed: int, *key) -> np.random.Generator:
    """Independent generator for (seed, *key); strings hash via CRC-32."""
    parts = [int(seed)]
    for k in key:
        parts.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))


def map_birads(birads: int, mode: str = "paper") -> str:
    """Binary label from a BI-RADS grade.

    paper mode: 1,2 -> normal, 4,5 -> cancer, 3 -> excluded.
    alt mode:   2 -> normal, 4,5 -> cancer, 1,3 -> excluded.
    """
    if not isinstance(birads, (int, np.integer)) or not 1 <= birads <= 5:
        raise InvalidLabel(f"BI-RADS grade must be an int in 1..5, got {birads!r}")
    if mode not in ("paper", "alt"):
        raise InvalidLabel(f"unknown label mode {mode!r}")
    if birads >= 4:
        return CANCER
    if birads == 2 or (birads == 1 and mode == "paper"):
        return NORMAL
    return EXCLUDED


@dataclass
class Exam:
    """One study: per-view image paths and BI-RADS grades."""

    study_id: str
    views: dict = field(default_factory=dict)    # (lat, proj) -> path
    birads: dict = field(default_factory=dict)   # (lat, proj) -> int
    split: str = "train"

    @property
    def is_cancer(self) -> bool:
        return any(b >= 4 for b in self.birads.values())


@dataclass(frozen=True)
class LabeledSample:
    """One classification target: a primary image plus ordered companions
    (ipsilateral, bilateral, bilateral-ipsilateral); None marks a missing
    view to be substituted with a black image."""

    study_id: str
    split: str
    primary: str
    primary_view: tuple
    companions: tuple
    label: int  # 1 cancer, 0 normal


def load_manifest(path) -> list:
    """Parse a manifest CSV into Exams grouped by study_id."""
    path = Path(path)
    exams: dict = {}
    order: list = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path.name}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ParseError(
                f"{path.name} line 1: expected header "
                f"{','.join(MANIFEST_HEADER)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(f"{path.name} line {lineno}: expected 6 fields, got {len(row)}")
            study, lat, proj, grade, split, img_path = (f.strip() for f in row)
            if lat not in LATERALITIES:
                raise ParseError(f"{path.name} line {lineno}: laterality must be L or R, got {lat!r}")
            if proj not in PROJECTIONS:
                raise ParseError(f"{path.name} line {lineno}: view must be CC or MLO, got {proj!r}")
            try:
                grade = int(grade)
            except ValueError:
                raise ParseError(f"{path.name} line {lineno}: BI-RADS must be an integer, got {grade!r}") from None
            if not 1 <= grade <= 5:
                raise ParseError(f"{path.name} line {lineno}: BI-RADS must be in 1..5, got {grade}")
            if split not in ("train", "test"):
                raise ParseError(f"{path.name} line {lineno}: split must be train or test, got {split!r}")
            if not study or not img_path:
                raise ParseError(f"{path.name} line {lineno}: empty study_id or path")
            exam = exams.get(study)
            if exam is None:
                exam = Exam(study_id=study, split=split)
                exams[study] = exam
                order.append(study)
            key = (lat, proj)
            if key in exam.views:
                raise DuplicateView(f"study {study}: duplicate view {lat}/{proj}")
            if split != exam.split:
                raise ParseError(
                    f"{path.name} line {lineno}: study {study} mixes splits "
                    f"({exam.split} and {split})"
                )
            exam.views[key] = img_path
            exam.birads[key] = grade
    return [exams[s] for s in order]


def write_manifest(exams, path) -> None:
    path = Path(path)
    lines = [",".join(MANIFEST_HEADER)]
    for exam in exams:
        for key in VIEW_ORDER:
            if key in exam.views:
                lat, proj = key
                lines.append(
                    f"{exam.study_id},{lat},{proj},{exam.birads[key]},{exam.split},{exam.views[key]}"
                )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def make_samples(exams, mode: str = "paper") -> list:
    """One sample per non-excluded image.  Excluded (BI-RADS 3 and, in alt
    mode, 1) images never become primaries but still serve as companions."""
    samples = []
    for exam in exams:
        for key in VIEW_ORDER:
            if key not in exam.views:
                continue
            label = map_birads(exam.birads[key], mode)
            if label == EXCLUDED:
                continue
            lat, proj = key
            companion_keys = (
                (lat, _OTHER_PROJ[proj]),
                (_OTHER_LAT[lat], proj),
                (_OTHER_LAT[lat], _OTHER_PROJ[proj]),
            )
            samples.append(LabeledSample(
                study_id=exam.study_id,
                split=exam.split,
                primary=exam.views[key],
                primary_view=key,
                companions=tuple(exam.views.get(k) for k in companion_keys),
                label=1 if label == CANCER else 0,
            ))
    return samples


def split_by_study(exams, fraction: float, seed: int):
    """Deterministic train/test split at study granularity, stratified by
    whether any image in the exam is cancer-grade."""
    if not 0.0 < fraction < 1.0:
        raise InvalidConfig(f"split fraction must be in (0, 1), got {fraction}")
    rng = derive_rng(seed, "split")
    train, test = [], []
    for stratum_flag in (True, False):
        stratum = [e for e in exams if e.is_cancer == stratum_flag]
        stratum.sort(key=lambda e: e.study_id)
        rng.shuffle(stratum)
        n_train = int(round(fraction * len(stratum)))
        for i, exam in enumerate(stratum):
            exam.split = "train" if i < n_train else "test"
            (train if i < n_train else test).append(exam)
    train.sort(key=lambda e: e.study_id)
    test.sort(key=lambda e: e.study_id)
    return train, test


# ---------------------------------------------------------------------------
# image loading

class ImageCache:
    """Loads images relative to a root directory, caching decoded arrays."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict = {}

    def get(self, rel_path: str) -> np.ndarray:
        arr = self._cache.get(rel_path)
        if arr is None:
            arr = imaging.read_image(self.root / rel_path)
            self._cache[rel_path] = arr
        return arr


def load_views(sample: LabeledSample, cache: ImageCache, substitute_missing: bool = True) -> list:
    """[primary, c1, c2, c3] pixel arrays; missing companions stay None for
    the augmentation stage to blacken (or raise when substitution is off)."""
    views = [cache.get(sample.primary)]
    for comp in sample.companions:
        if comp is None:
            if not substitute_missing:
                raise MissingView(
                    f"study {sample.study_id}: incomplete exam and black-image "
                    f"substitution is disabled"
                )
            views.append(None)
        else:
            views.append(cache.get(comp))
    return views


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Train-time augmentation policy.  crop_prob: 0 off, 0.5 train default,
    1.0 crop-everything (the test-time setting when cropping is enabled)."""

    crop_prob: float = 0.0
    empty_image_prob: float = 0.0
    hflip_prob: float = 0.0
    noise_sigma: float = 0.0
    dropout_count: int = 0
    dropout_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("crop_prob", "empty_image_prob", "hflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{name} must be in [0, 1], got {p}")
        if self.noise_sigma < 0:
            raise InvalidConfig(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.dropout_count < 0 or self.dropout_size < 1:
            raise InvalidConfig("dropout_count must be >= 0 and dropout_size >= 1")
        if self.seed < 0:
            raise InvalidConfig(f"seed must be >= 0, got {self.seed}")

    def for_eval(self, crop: bool) -> "AugmentConfig":
        """Evaluation policy: mandatory crop when the pipeline is on,
        everything stochastic forced off."""
        return AugmentConfig(crop_prob=1.0 if crop else 0.0, seed=self.seed)


@dataclass
class AugmentStats:
    """Instrumentation for blackout draws (companion views only)."""

    blackout_draws: int = 0
    blackouts: int = 0

    @property
    def rate(self) -> float:
        return self.blackouts / self.blackout_draws if self.blackout_draws else 0.0


def rng_for_sample(seed: int, epoch: int, index: int) -> np.random.Generator:
    return derive_rng(seed, "augment", epoch, index)


def crop_resize(img: np.ndarray) -> np.ndarray:
    """Threshold crop to the breast region, resized back to the input size.
    Images with no foreground (all-black substitutes) pass through."""
    mask = imaging.threshold_mask(img)
    if not mask.any():
        return img
    region = imaging.largest_component(mask)
    cropped = imaging.centered_crop(img, region)
    return imaging.resize_bilinear(cropped, img.shape[0], img.shape[1])


def augment_views(views, cfg: AugmentConfig, rng, stats: AugmentStats | None = None) -> list:
    """Apply the augmentation stack to [primary, c1, c2, c3] (or a primary-only
    list).  Draw order is fixed: one crop decision for the whole sample, then
    per present view flip / noise / dropout, then per present companion the
    blackout draw.  Missing (None) companions become black images untouched
    by the stack; the primary is never blacked out.
    """
    out = []
    do_crop = cfg.crop_prob > 0 and rng.random() < cfg.crop_prob
    for img in views:
        if img is None:
            out.append(None)
            continue
        if do_crop:
            img = crop_resize(img)
        else:
            img = img.copy()
        if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
            img = img[:, ::-1].copy()
        if cfg.noise_sigma > 0:
            img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)
        if cfg.dropout_count > 0:
            h, w = img.shape
            side = min(cfg.dropout_size, h, w)
            for _ in range(cfg.dropout_count):
                r = int(rng.integers(0, h - side + 1))
                c = int(rng.integers(0, w - side + 1))
                img[r:r + side, c:c + side] = 0.0
        out.append(img)
    if cfg.empty_image_prob > 0:
        for i in range(1, len(out)):
            if out[i] is None:
                continue
            if stats is not None:
                stats.blackout_draws += 1
            if rng.random() < cfg.empty_image_prob:
                out[i] = np.zeros_like(out[i])
                if stats is not None:
                    stats.blackouts += 1
    shape = out[0].shape
    return [np.zeros(shape) if v is None else v for v in out]


# ---------------------------------------------------------------------------
# synthetic four-view generator

_GEN = {
    "size": 64,
    "background": 0.04,
    "breast_base_lo": 0.45,
    "breast_base_hi": 0.60,
    "axis_frac_lo": 0.40,
    "axis_frac_hi": 0.60,
    "texture_sigma": 0.05,
    "blob_radius_lo": 3.0,
    "blob_radius_hi": 5.0,
    "blob_contrast": 0.25,
    "artifact_blob_contrast": 0.20,
    "tag_intensity_lo": 0.85,
    "tag_intensity_hi": 0.95,
    "tag_size_lo": 5,
    "tag_size_hi": 9,
    "cancer_prob": 0.20,
    "blob_presence_prob": 0.75,
    "train_fraction": 0.80,
}

SCENARIOS = ("single_view", "asymmetry", "artifact")


def _breast_mask(size: int, lat: str, a: float, b: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2.0
    cx = 0.0 if lat == "L" else float(size - 1)
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _render_view(rng, size, lat, blob, blob_contrast, with_tags):
    """One view: half-ellipse breast against the chest-wall edge, Gaussian
    texture inside, optional blob (r, theta, radius in normalized breast
    coordinates so CC/MLO of a breast agree), optional corner tags."""
    g = _GEN
    a = rng.uniform(g["axis_frac_lo"], g["axis_frac_hi"]) * size
    b = rng.uniform(g["axis_frac_lo"], g["axis_frac_hi"]) * size
    base = rng.uniform(g["breast_base_lo"], g["breast_base_hi"])
    mask = _breast_mask(size, lat, a, b)
    img = np.full((size, size), g["background"])
    img[mask] = base
    img += rng.normal(0.0, g["texture_sigma"], (size, size)) * mask
    if blob is not None:
        r_norm, theta, radius = blob
        cy = (size - 1) / 2.0
        dx = r_norm * a * np.cos(theta)
        px = dx if lat == "L" else (size - 1) - dx
        py = cy + r_norm * b * np.sin(theta)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        img[(yy - py) ** 2 + (xx - px) ** 2 <= radius ** 2] += blob_contrast
    if with_tags:
        n_tags = int(rng.integers(1, 4))
        margin = int(np.ceil(0.82 * size))
        for _ in range(n_tags):
            tag = int(rng.integers(g["tag_size_lo"], g["tag_size_hi"] + 1))
            row = int(rng.integers(0, size - tag + 1))
            if lat == "L":
                col = int(rng.integers(margin, size - tag + 1))
            else:
                col = int(rng.integers(0, size - margin - tag + 1))
            img[row:row + tag, col:col + tag] = rng.uniform(
                g["tag_intensity_lo"], g["tag_intensity_hi"])
    return np.clip(img, 0.0, 1.0), mask


def _draw_blob(rng):
    r_norm = rng.uniform(0.15, 0.65)
    theta = rng.uniform(-1.2, 1.2)
    radius = rng.uniform(_GEN["blob_radius_lo"], _GEN["blob_radius_hi"])
    return (r_norm, theta, radius)


def synth_generate(n_exams: int, scenario: str, seed: int, out_dir, size: int | None = None):
    """Write a synthetic four-view dataset: images/, masks/ (breast
    footprints for segmentation), manifest.csv with a deterministic
    stratified 80/20 split, and generator.txt recording the constants.

    Scenarios: single_view (cancer exams carry a high-contrast blob in every
    view), asymmetry (per-breast blobs; an image is cancer exactly when its
    breast has a blob and the other breast has none, so the label needs a
    cross-view comparison), artifact (bright corner tags on both classes
    plus a low-contrast blob, so cropping away the tags is what helps).
    """
    if n_exams < 10:
        raise InvalidConfig(f"need at least 10 exams, got {n_exams}")
    if scenario not in SCENARIOS:
        raise InvalidConfig(f"unknown scenario {scenario!r}; pick one of {SCENARIOS}")
    if seed < 0:
        raise InvalidConfig(f"seed must be >= 0, got {seed}")
    size = _GEN["size"] if size is None else int(size)
    if size < 32:
        raise InvalidConfig(f"image size must be >= 32, got {size}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    with_tags = scenario == "artifact"
    contrast = _GEN["artifact_blob_contrast"] if with_tags else _GEN["blob_contrast"]
    exams = []
    for idx in range(n_exams):
        rng = derive_rng(seed, "exam", idx)
        study = f"s{idx:04d}"
        # per-breast state first (fixed draw order), then per-view rendering
        if scenario == "asymmetry":
            has_blob = {lat: rng.random() < _GEN["blob_presence_prob"] for lat in LATERALITIES}
            blobs = {lat: _draw_blob(rng) if has_blob[lat] else None for lat in LATERALITIES}
            cancer = {lat: has_blob[lat] and not has_blob[_OTHER_LAT[lat]] for lat in LATERALITIES}
        else:
            exam_cancer = rng.random() < _GEN["cancer_prob"]
            blobs = {lat: _draw_blob(rng) if exam_cancer else None for lat in LATERALITIES}
            cancer = {lat: exam_cancer for lat in LATERALITIES}
        exam = Exam(study_id=study)
        for lat, proj in VIEW_ORDER:
            img, mask = _render_view(rng, size, lat, blobs[lat], contrast, with_tags)
            grade = int(rng.integers(4, 6)) if cancer[lat] else int(rng.integers(1, 3))
            name = f"{study}_{lat}_{proj}.pgm"
            imaging.write_image(img, out_dir / "images" / name)
            imaging.write_image(mask.astype(np.float64), out_dir / "masks" / name)
            exam.views[(lat, proj)] = f"images/{name}"
            exam.birads[(lat, proj)] = grade
        exams.append(exam)

    split_by_study(exams, _GEN["train_fraction"], seed)
    write_manifest(exams, out_dir / "manifest.csv")
    lines = [f"scenario={scenario}", f"seed={seed}", f"exams={n_exams}", f"size={size}"]
    lines += [f"{k}={v}" for k, v in _GEN.items() if k != "size"]
    (out_dir / "generator.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return exams


def mask_path_for(image_path: str) -> str:
    """Generator convention: masks/ mirrors images/ by file name."""
    p = Path(image_path)
    return str(Path("masks") / p.name)


def split_samples(samples):
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    if not train or not test:
        raise EmptyDataset("need non-empty train and test splits")
    return train, test
