"""Grayscale image ops for breast-region cropping.

Images are float64 numpy arrays of shape (H, W) with values in [0, 1];
masks are boolean arrays of the same shape.  File I/O supports binary PGM
(P5, written by hand so bytes are stable) and PNG via Pillow; an 8-bit
pixel v maps to v / 255.

The crop pipeline mirrors the preprocessing used for mammograms: threshold
at one quarter of the mean intensity, keep the largest 4-connected
component, crop a square centered on its bounding box, and resize.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyMask, InvalidShape, ParseError
from .tensor import Tensor

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InvalidShape(f"image must be 2-D and non-empty, got shape {img.shape}")
    return img


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != bool:
        raise InvalidShape(f"mask must be 2-D boolean, got {mask.dtype} {mask.shape}")
    return mask


# ---------------------------------------------------------------------------
# file I/O

def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        return arr / 255.0
    raise ParseError(f"unsupported image extension: {path.name}")


def write_image(img: np.ndarray, path) -> None:
    img = _check_image(img)
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvalidShape("pixel values must lie in [0, 1]")
    quantized = np.round(img * 255.0).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + quantized.tobytes(order="C"))
    elif path.suffix.lower() == ".png":
        Image.fromarray(quantized, mode="L").save(path)
    else:
        raise ParseError(f"unsupported image extension: {path.name}")


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P5"):
        raise ParseError(f"{path.name}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path.name}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ParseError(f"{path.name}: bad PGM header") from exc
    if maxval != 255:
        raise ParseError(f"{path.name}: only maxval 255 supported, got {maxval}")
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise ParseError(f"{path.name}: expected {width * height} pixels, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# segmentation primitives

def threshold_mask(img: np.ndarray) -> np.ndarray:
    """Pixels strictly above one quarter of the mean intensity."""
    img = _check_image(img)
    return img > (img.mean() / 4.0)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; area ties go to the component whose
    first pixel in row-major order comes earlier.  Empty in, empty out."""
    mask = _check_mask(mask)
    if not mask.any():
        return np.zeros_like(mask)
    labels, count = ndimage.label(mask, structure=_FOUR_CONNECTED)
    areas = np.bincount(labels.ravel())[1:]
    # scipy assigns labels in raster-scan order of first encounter, so the
    # smallest label among the tied maxima is the earliest component
    best = int(np.argmax(areas)) + 1
    return labels == best


@dataclass(frozen=True)
class BBox:
    """Inclusive-exclusive pixel bounds: rows [top, bottom), cols [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left


def mask_bbox(mask: np.ndarray) -> BBox:
    mask = _check_mask(mask)
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise EmptyMask("bounding box of an empty mask")
    top, bottom = np.flatnonzero(rows)[[0, -1]]
    left, right = np.flatnonzero(cols)[[0, -1]]
    return BBox(int(top), int(left), int(bottom) + 1, int(right) + 1)


def centered_crop(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Square crop centered on the mask's bounding box.

    Side = max(box height, box width); when the box is off-center the extra
    pixel goes to the bottom/right.  Regions outside the image are zero.
    """
    img = _check_image(img)
    mask = _check_mask(mask)
    if img.shape != mask.shape:
        raise InvalidShape(f"image {img.shape} and mask {mask.shape} differ")
    box = mask_bbox(mask)
    side = max(box.height, box.width)
    top = box.top - (side - box.height) // 2
    left = box.left - (side - box.width) // 2
    out = np.zeros((side, side), dtype=np.float64)
    src_top = max(top, 0)
    src_left = max(left, 0)
    src_bottom = min(top + side, img.shape[0])
    src_right = min(left + side, img.shape[1])
    if src_top < src_bottom and src_left < src_right:
        out[src_top - top:src_bottom - top, src_left - left:src_right - left] = \
            img[src_top:src_bottom, src_left:src_right]
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers:
    src = (dst + 0.5) * (in / out) - 0.5, edges clamped."""
    img = _check_image(img)
    if out_h < 1 or out_w < 1:
        raise InvalidShape(f"output size must be >= 1, got {out_h}x{out_w}")
    in_h, in_w = img.shape

    def _axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        return lo, hi, frac

    r0, r1, rf = _axis_coords(out_h, in_h)
    c0, c1, cf = _axis_coords(out_w, in_w)
    top = img[r0][:, c0] * (1 - cf) + img[r0][:, c1] * cf
    bottom = img[r1][:, c0] * (1 - cf) + img[r1][:, c1] * cf
    return top * (1 - rf)[:, None] + bottom * rf[:, None]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks; both empty counts as 1."""
    a = _check_mask(a)
    b = _check_mask(b)
    if a.shape != b.shape:
        raise InvalidShape(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def crop_breast(img: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Threshold-segment (unless a mask is given), keep the largest
    component, and return the centered square crop."""
    if mask is None:
        mask = threshold_mask(img)
    region = largest_component(mask)
    if not region.any():
        raise EmptyMask("no foreground region to crop")
    return centered_crop(img, region)


def to_model_tensor(img: np.ndarray, expected_size: int | None = None) -> Tensor:
    """Replicate grayscale into three channels: [3, H, W]."""
    img = _check_image(img)
    if expected_size is not None and img.shape != (expected_size, expected_size):
        raise InvalidShape(f"expected {expected_size}x{expected_size}, got {img.shape}")
    return Tensor(np.stack([img, img, img], axis=0))
