"""Synthetic disturbances for the one-class setting.

Good images are perturbed inside randomly chosen segments, either by a
Gaussian blur or by painting a thin axis-aligned rectangle of a random gray
shade. The disturbances are not meant to look like real defects; they only
need to make detectors respond. Every generated image is described by a
:class:`DefectSpec`, so a spec log replays the corpus exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rng_streams
from .core import SegmentationMap
from .errors import DimensionMismatchError, ValidationError

BLUR = "blur"
RECTANGLE = "rectangle"


@dataclass(frozen=True)
class DefectOptions:
    sigma_range: tuple[float, float] = (2.0, 8.0)
    rect_width_range: tuple[int, int] = (2, 10)
    # Rectangle length spans [min_length, length_fraction * bbox long side].
    rect_min_length: int = 10
    rect_length_fraction: float = 0.4
    sub_region_probability: float = 0.5
    exclude_segments: tuple[int, ...] = ()


@dataclass(frozen=True)
class DefectSpec:
    """One disturbance.

    ``region`` is ``(y0, x0, y1, x1)``, half-open. For a blur it bounds the
    blurred area (intersected with the segment); for a rectangle it is the
    painted rectangle itself.
    """

    kind: str
    segment: int
    region: tuple[int, int, int, int]
    sigma: float = 0.0
    shade: int = 0
    whole_segment: bool = True

    def __post_init__(self):
        if self.kind not in (BLUR, RECTANGLE):
            raise ValidationError(f"unknown defect kind {self.kind!r}")
        y0, x0, y1, x1 = self.region
        if not (0 <= y0 < y1 and 0 <= x0 < x1):
            raise ValidationError(f"empty or negative region {self.region}")
        if self.kind == BLUR and not self.sigma > 0:
            raise ValidationError("blur sigma must be positive")
        if not 0 <= self.shade <= 255:
            raise ValidationError("shade must lie in [0, 255]")


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def _eligible_segments(seg: SegmentationMap, options: DefectOptions) -> list[int]:
    segs = [l for l in range(seg.num_segments) if l not in set(options.exclude_segments)]
    if not segs:
        raise ValidationError("every segment is excluded from defect placement")
    return segs


def sample_defect(seg: SegmentationMap, rng: np.random.Generator,
                  options: DefectOptions = DefectOptions()) -> DefectSpec:
    segs = _eligible_segments(seg, options)
    kind = BLUR if rng.integers(2) == 0 else RECTANGLE
    l = segs[int(rng.integers(len(segs)))]
    mask = seg.labels == l
    y0, x0, y1, x1 = _bbox(mask)
    whole = not rng.random() < options.sub_region_probability
    if not whole:
        # Random sub-rectangle of the bounding box.
        ya, yb = np.sort(rng.integers(y0, y1 + 1, size=2))
        xa, xb = np.sort(rng.integers(x0, x1 + 1, size=2))
        y0, y1 = int(ya), int(max(yb, ya + 1))
        x0, x1 = int(xa), int(max(xb, xa + 1))
        y1, x1 = min(y1, seg.height), min(x1, seg.width)
        y0, x0 = min(y0, y1 - 1), min(x0, x1 - 1)

    if kind == BLUR:
        sigma = float(rng.uniform(*options.sigma_range))
        return DefectSpec(BLUR, l, (y0, x0, y1, x1), sigma=sigma, whole_segment=whole)

    # Centre the rectangle on a segment pixel inside the region so that it
    # always touches the segment.
    inside = np.zeros_like(mask)
    inside[y0:y1, x0:x1] = mask[y0:y1, x0:x1]
    if not inside.any():
        inside = mask
    ys, xs = np.nonzero(inside)
    c = int(rng.integers(ys.size))
    cy, cx = int(ys[c]), int(xs[c])
    long_side = max(y1 - y0, x1 - x0)
    lo_w, hi_w = options.rect_width_range
    thick = int(rng.integers(lo_w, hi_w + 1))
    hi_len = max(options.rect_min_length, int(options.rect_length_fraction * long_side))
    length = int(rng.integers(options.rect_min_length, hi_len + 1))
    horizontal = rng.integers(2) == 0
    h, w = (thick, length) if horizontal else (length, thick)
    ry0 = min(max(cy - h // 2, 0), max(seg.height - h, 0))
    rx0 = min(max(cx - w // 2, 0), max(seg.width - w, 0))
    region = (ry0, rx0, min(ry0 + h, seg.height), min(rx0 + w, seg.width))
    shade = int(rng.integers(0, 256))
    return DefectSpec(RECTANGLE, l, region, shade=shade, whole_segment=whole)


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = k.size // 2
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad)
    out = np.zeros_like(a)
    for i, w in enumerate(k):
        out += w * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at ``ceil(3 sigma)``.

    Near the border the kernel is renormalized over the pixels that exist.
    Returns float64 values.
    """
    k = gaussian_kernel(sigma)
    img = pixels.astype(np.float64)
    ones = np.ones(pixels.shape[:2], dtype=np.float64)
    num = _convolve_axis(_convolve_axis(img, k, 0), k, 1)
    den = _convolve_axis(_convolve_axis(ones, k, 0), k, 1)
    if img.ndim == 3:
        den = den[:, :, None]
    return num / den


def defect_mask(seg: SegmentationMap, spec: DefectSpec) -> np.ndarray:
    y0, x0, y1, x1 = spec.region
    m = np.zeros(seg.shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m & (seg.labels == spec.segment)


def apply_defect(img: np.ndarray, seg: SegmentationMap, spec: DefectSpec) -> np.ndarray:
    """Return a perturbed copy of an 8-bit gray (H, W) or color (H, W, C) image."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValidationError(f"expected an 8-bit image, got {img.dtype}")
    seg.check_shape(img.shape[:2], "image")
    if not 0 <= spec.segment < seg.num_segments:
        raise ValidationError(f"defect segment {spec.segment} out of range")
    y0, x0, y1, x1 = spec.region
    if y1 > seg.height or x1 > seg.width:
        raise ValidationError(f"defect region {spec.region} exceeds image {seg.shape}")
    mask = defect_mask(seg, spec)
    out = img.copy()
    if spec.kind == RECTANGLE:
        out[mask] = spec.shade
    else:
        # Blur a window reaching one kernel radius past the region: every masked
        # pixel then sees the same support (and border clipping) as a
        # whole-image blur.
        r = int(math.ceil(3 * spec.sigma))
        wy0, wx0 = max(y0 - r, 0), max(x0 - r, 0)
        wy1, wx1 = min(y1 + r, seg.height), min(x1 + r, seg.width)
        blurred = gaussian_blur(img[wy0:wy1, wx0:wx1], spec.sigma)
        blurred = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
        sub = mask[wy0:wy1, wx0:wx1]
        out[wy0:wy1, wx0:wx1][sub] = blurred[sub]
    return out


@dataclass
class GeneratedCorpus:
    images: list[np.ndarray]
    specs: list[DefectSpec]
    sources: list[str]
    log: list[dict] = field(default_factory=list)


def generate_corpus(images: Sequence[tuple[str, np.ndarray]], seg: SegmentationMap, n: int, seed: int,
                    options: DefectOptions = DefectOptions()) -> GeneratedCorpus:
    """Perturb ``n`` images, cycling through ``images`` (pairs of id, pixels).

    Output ``i`` uses source ``i % len(images)`` and its own random stream
    keyed by ``(seed, i)``.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    if not images:
        raise ValidationError("no source images")
    out = GeneratedCorpus([], [], [])
    for i in range(n):
        sid, pixels = images[i % len(images)]
        if pixels.shape[:2] != seg.shape:
            raise DimensionMismatchError(f"image {sid!r} has shape {pixels.shape[:2]}, segmap {seg.shape}")
        spec = sample_defect(seg, rng_streams.stream(rng_streams.DEFECT, seed, i), options)
        out.images.append(apply_defect(pixels, seg, spec))
        out.specs.append(spec)
        out.sources.append(sid)
        out.log.append(spec_log_row(i, spec, sid))
    return out


LOG_FIELDS = ["index", "kind", "segment", "y0", "x0", "y1", "x1", "whole_segment", "sigma", "shade", "source_id"]


def spec_log_row(index: int, spec: DefectSpec, source_id: str) -> dict:
    y0, x0, y1, x1 = spec.region
    return {"index": index, "kind": spec.kind, "segment": spec.segment, "y0": y0, "x0": x0, "y1": y1, "x1": x1,
            "whole_segment": int(spec.whole_segment), "sigma": repr(spec.sigma), "shade": spec.shade,
            "source_id": source_id}


def format_spec_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def parse_spec_log(text: str) -> list[tuple[int, DefectSpec, str]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != set(LOG_FIELDS):
        raise ValidationError(f"spec log columns must be {LOG_FIELDS}")
    out = []
    for r in rows:
        spec = DefectSpec(r["kind"], int(r["segment"]),
                          (int(r["y0"]), int(r["x0"]), int(r["y1"]), int(r["x1"])),
                          sigma=float(r["sigma"]), shade=int(r["shade"]), whole_segment=bool(int(r["whole_segment"])))
        out.append((int(r["index"]), spec, r["source_id"]))
    return out


def replay(log_text: str, images: dict[str, np.ndarray], seg: SegmentationMap) -> list[np.ndarray]:
    """Re-create a corpus from its spec log and the source images by id."""
    return [apply_defect(images[sid], seg, spec) for _, spec, sid in parse_spec_log(log_text)]
