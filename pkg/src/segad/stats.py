"""Per-segment statistics of anomaly maps and feature-vector assembly.

A feature vector is laid out as::

    [score?] + [stat block 0] + [stat block 1] + ...

where each stat block holds ``K * L`` values ordered detector-major,
segment-minor. The full layout uses the blocks (q, z, c, m): the 99.5 %
quantile, skewness, excess kurtosis and mean of every segment. The "max"
ablation layout uses a single block of per-segment maxima.

Anomaly maps are consumed as-is, without normalization across detectors;
tree learners only see the ordering of each feature column.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import AnomalyMap, DatasetManifest, SegmentationMap, SplitTag
from .errors import (
    DimensionMismatchError,
    EmptyInputError,
    SampleIOError,
    SegmentIndexError,
    ValidationError,
)

QUANTILE = 0.995


def _as_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInputError("statistic of an empty value list")
    return v


def segment_values(amap: AnomalyMap, seg: SegmentationMap, l: int) -> np.ndarray:
    """Values of the pixels in segment ``l``, row-major order."""
    seg.check_shape(amap.shape)
    if not 0 <= l < seg.num_segments:
        raise SegmentIndexError(f"segment index {l} out of range for L={seg.num_segments}")
    return amap.values.ravel()[seg.flat_indices[l]]


def quantile(values, p: float) -> float:
    """Linear-interpolation quantile with ``h = (n - 1) * p``."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"quantile fraction must lie in [0, 1], got {p}")
    v = np.sort(_as_values(values))
    h = (v.size - 1) * p
    lo = math.floor(h)
    if lo >= v.size - 1:
        return float(v[-1])
    return float(v[lo] + (h - lo) * (v[lo + 1] - v[lo]))


def mean(values) -> float:
    v = _as_values(values)
    return float(v.sum() / v.size)


def _central_moments(v: np.ndarray) -> tuple[float, float, float] | None:
    """Second to fourth central moments of ``v`` up to a common power-of-two scale."""
    # Exactly constant input has zero variance; a computed mean that is off by
    # an ulp must not turn it into a tiny positive variance.
    if v.min() == v.max():
        return None
    d = v - v.sum() / v.size
    # The moment ratios are scale-free; rescaling by a power of two is exact
    # and keeps d**4 clear of underflow and overflow.
    d = d * 2.0 ** -math.frexp(float(np.abs(d).max()))[1]
    d2 = d * d
    return float(d2.sum() / v.size), float((d2 * d).sum() / v.size), float((d2 * d2).sum() / v.size)


def skewness(values) -> float:
    """Population skewness ``m3 / m2**1.5``; 0 for zero-variance input."""
    m = _central_moments(_as_values(values))
    if m is None:
        return 0.0
    m2, m3, _ = m
    return m3 / m2 ** 1.5


def kurtosis(values) -> float:
    """Population excess kurtosis ``m4 / m2**2 - 3``; 0 for zero-variance input."""
    m = _central_moments(_as_values(values))
    if m is None:
        return 0.0
    m2, _, m4 = m
    return m4 / (m2 * m2) - 3.0


def segment_stats(values) -> tuple[float, float, float, float]:
    """(quantile_995, skewness, kurtosis, mean) of one segment."""
    v = _as_values(values)
    return quantile(v, QUANTILE), skewness(v), kurtosis(v), mean(v)


# --------------------------------------------------------------------------- #
# Layout

class Variant(str, enum.Enum):
    FULL = "full"
    MAX = "max"


class Setup(str, enum.Enum):
    """Which inputs enter the feature vector."""

    SINGLE_AD = "single_ad"
    ALL_AD = "all_ad"
    ALL_AD_PLUS_SCORE = "all_ad_plus_score"

    @classmethod
    def parse(cls, text: str) -> "Setup":
        return cls(text.strip().lower().replace("-", "_"))


STAT_BLOCKS = {Variant.FULL: ("q", "z", "c", "m"), Variant.MAX: ("max",)}


@dataclass(frozen=True)
class FeatureLayout:
    num_detectors: int
    num_segments: int
    has_score: bool = False
    variant: Variant = Variant.FULL

    def __post_init__(self):
        if self.num_detectors < 1 or self.num_segments < 1:
            raise ValidationError("layout needs K >= 1 and L >= 1")
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def stats(self) -> tuple[str, ...]:
        return STAT_BLOCKS[self.variant]

    @property
    def offset(self) -> int:
        return 1 if self.has_score else 0

    def __len__(self) -> int:
        return self.num_detectors * self.num_segments * len(self.stats) + self.offset

    def index(self, stat: str, k: int, l: int) -> int:
        if not (0 <= k < self.num_detectors and 0 <= l < self.num_segments):
            raise SegmentIndexError(f"(k={k}, l={l}) outside K={self.num_detectors}, L={self.num_segments}")
        block = self.stats.index(stat)
        return self.offset + (block * self.num_detectors + k) * self.num_segments + l

    def locate(self, index: int) -> tuple[str, int, int] | None:
        """Inverse of :meth:`index`; ``None`` is the classifier-score slot."""
        if not 0 <= index < len(self):
            raise SegmentIndexError(f"feature index {index} out of range for length {len(self)}")
        if self.has_score and index == 0:
            return None
        block, rest = divmod(index - self.offset, self.num_detectors * self.num_segments)
        k, l = divmod(rest, self.num_segments)
        return self.stats[block], k, l

    def names(self) -> list[str]:
        out = ["score"] if self.has_score else []
        for stat in self.stats:
            out += [f"{stat}_k{k}_l{l}" for k in range(self.num_detectors) for l in range(self.num_segments)]
        return out


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout

    def __post_init__(self):
        if len(self.values) != len(self.layout):
            raise ValidationError(f"{len(self.values)} values for a layout of length {len(self.layout)}")

    def __len__(self) -> int:
        return len(self.values)

    def get(self, stat: str, k: int, l: int) -> float:
        return float(self.values[self.layout.index(stat, k, l)])


def _fill_row(out: np.ndarray, maps: Sequence[AnomalyMap], seg: SegmentationMap,
              score: float | None, layout: FeatureLayout) -> None:
    kl = layout.num_detectors * layout.num_segments
    if layout.has_score:
        out[0] = score
    for k, amap in enumerate(maps):
        seg.check_shape(amap.shape)
        flat = amap.values.ravel()
        for l, idx in enumerate(seg.flat_indices):
            pos = layout.offset + k * layout.num_segments + l
            vals = flat[idx].astype(np.float64)
            if layout.variant is Variant.MAX:
                out[pos] = vals.max()
            else:
                for b, s in enumerate(segment_stats(vals)):
                    out[pos + b * kl] = s


def extract_features(maps: Sequence[AnomalyMap], seg: SegmentationMap, score: float | None = None,
                     variant: Variant | str = Variant.FULL) -> FeatureVector:
    """Feature vector of one image from its ``K`` anomaly maps."""
    if len(maps) < 1:
        raise ValidationError("need at least one anomaly map")
    layout = FeatureLayout(len(maps), seg.num_segments, score is not None, Variant(variant))
    out = np.empty(len(layout), dtype=np.float64)
    _fill_row(out, maps, seg, score, layout)
    return FeatureVector(out, layout)


def global_max(amap: AnomalyMap) -> float:
    """Image score of a bare detector: the maximum of its anomaly map."""
    return float(np.max(amap.values))


# --------------------------------------------------------------------------- #
# Corpus extraction

@dataclass(frozen=True)
class FeatureConfig:
    setup: Setup = Setup.ALL_AD
    detector: int = 0  # used by SINGLE_AD
    variant: Variant = Variant.FULL
    one_segment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "setup", Setup(self.setup))
        object.__setattr__(self, "variant", Variant(self.variant))

    def detectors(self, num_detectors: int) -> list[int]:
        if self.setup is Setup.SINGLE_AD:
            if not 0 <= self.detector < num_detectors:
                raise ValidationError(f"detector {self.detector} out of range for K={num_detectors}")
            return [self.detector]
        return list(range(num_detectors))

    def uses_score(self, manifest: DatasetManifest) -> bool:
        if self.setup is Setup.ALL_AD_PLUS_SCORE:
            if not manifest.has_score:
                raise ValidationError("setup all_ad_plus_score needs a classifier score column")
            return True
        return False


def load_sample_maps(manifest: DatasetManifest, sample, detectors: Iterable[int]) -> list[AnomalyMap]:
    from .io import read_amap

    maps = []
    for k in detectors:
        path = manifest.resolve(sample.anomaly_map_paths[k])
        try:
            maps.append(read_amap(path))
        except OSError as exc:
            raise SampleIOError(sample.id, path, exc) from exc
    return maps


def extract_corpus(manifest: DatasetManifest, seg: SegmentationMap,
                   tags: Iterable[SplitTag | str] | None = None,
                   config: FeatureConfig = FeatureConfig(),
                   threads: int = 1) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Feature matrix, label vector and ids of the samples carrying ``tags``.

    Rows follow manifest order. ``tags=None`` selects every sample.
    """
    samples = manifest.select(tags)
    detectors = config.detectors(manifest.num_detectors)
    use_score = config.uses_score(manifest)
    if config.one_segment:
        seg = SegmentationMap.single(*seg.shape)
    layout = FeatureLayout(len(detectors), seg.num_segments, use_score, config.variant)
    X = np.empty((len(samples), len(layout)), dtype=np.float64)

    def work(i):
        s = samples[i]
        maps = load_sample_maps(manifest, s, detectors)
        try:
            _fill_row(X[i], maps, seg, s.classifier_score, layout)
        except DimensionMismatchError as exc:
            raise DimensionMismatchError(f"sample {s.id!r}: {exc}") from None

    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(len(samples))))
    else:
        for i in range(len(samples)):
            work(i)
    y = np.array([int(s.label) for s in samples], dtype=np.int64)
    return X, y, [s.id for s in samples]


def corpus_layout(manifest: DatasetManifest, seg: SegmentationMap, config: FeatureConfig) -> FeatureLayout:
    return FeatureLayout(len(config.detectors(manifest.num_detectors)),
                         1 if config.one_segment else seg.num_segments,
                         config.uses_score(manifest), config.variant)


# --------------------------------------------------------------------------- #
# Feature CSV: ``id,label,<feature names...>``

def format_features_csv(X: np.ndarray, y: np.ndarray, ids: Sequence[str], names: Sequence[str],
                        comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", *names])
    for row, lab, rid in zip(X, y, ids):
        w.writerow([rid, "bad" if lab else "good", *(repr(float(v)) for v in row)])
    return buf.getvalue()


def parse_features_csv(text: str) -> tuple[np.ndarray, np.ndarray, list[str], list[str]]:
    """Inverse of :func:`format_features_csv`: ``(X, y, ids, names)``."""
    rows = list(csv.reader(ln for ln in text.split("\n") if ln and not ln.startswith("#")))
    if not rows or rows[0][:2] != ["id", "label"]:
        raise ValidationError("feature CSV must start with an id,label header")
    names = rows[0][2:]
    X = np.empty((len(rows) - 1, len(names)), dtype=np.float64)
    y = np.empty(len(rows) - 1, dtype=np.int64)
    ids = []
    for i, row in enumerate(rows[1:]):
        if len(row) != len(names) + 2:
            raise ValidationError(f"feature CSV row {i + 2} has {len(row)} fields, expected {len(names) + 2}")
        ids.append(row[0])
        if row[1] not in ("good", "bad"):
            raise ValidationError(f"feature CSV row {i + 2}: bad label {row[1]!r}")
        y[i] = row[1] == "bad"
        X[i] = [float(v) for v in row[2:]]
    return X, y, ids, names
