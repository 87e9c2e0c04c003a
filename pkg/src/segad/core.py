"""Domain data model, CSV manifests and benchmark split protocols."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rng_streams
from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    InconsistencyError,
    InsufficientSamplesError,
    ManifestParseError,
    SegmentGapError,
    ValidationError,
)

logger = logging.getLogger(__name__)


class Label(enum.IntEnum):
    GOOD = 0
    BAD = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"label must be 'good' or 'bad', got {text!r}") from None

    def __str__(self) -> str:
        return self.name.lower()


class SplitTag(str, enum.Enum):
    BASE_MODEL = "base_model"
    SEGAD_TRAIN = "segad_train"
    TEST = "test"
    UNUSED = "unused"


class Protocol(str, enum.Enum):
    ONE_CLASS = "one_class"
    HIGH_SHOT = "high_shot"
    LOW_SHOT = "low_shot"

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        return cls(text.strip().lower().replace("-", "_"))


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AnomalyMap:
    """Pixel anomaly scores of one detector, shape ``(height, width)``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise ValidationError(f"anomaly map must be a non-empty 2-D array, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise ValidationError(f"anomaly map has non-finite value at pixel index {int(bad[0])}")
        object.__setattr__(self, "values", _frozen_array(values, values.dtype))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, AnomalyMap):
            return NotImplemented
        return self.values.dtype == other.values.dtype and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Partition of the pixel grid into ``num_segments`` labelled segments.

    Every index in ``[0, num_segments)`` must occur at least once.
    """

    labels: np.ndarray
    num_segments: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValidationError(f"segmentation map must be a non-empty 2-D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError(f"segment labels must be integers, got {labels.dtype}")
        if labels.min() < 0:
            raise ValidationError("segment labels must be non-negative")
        present = np.unique(labels)
        n = int(present[-1]) + 1 if self.num_segments is None else int(self.num_segments)
        if n < 1 or present[-1] >= n:
            raise ValidationError(f"segment index {int(present[-1])} out of range for L={n}")
        if present.size != n:
            missing = sorted(set(range(n)) - set(present.tolist()))
            raise SegmentGapError(f"segment indices {missing} absent from segmentation map (L={n})")
        object.__setattr__(self, "labels", _frozen_array(labels, np.int32))
        object.__setattr__(self, "num_segments", n)

    @classmethod
    def single(cls, height: int, width: int) -> "SegmentationMap":
        """One segment covering the whole image."""
        return cls(np.zeros((height, width), dtype=np.int32))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @cached_property
    def flat_indices(self) -> tuple[np.ndarray, ...]:
        """Row-major pixel indices of each segment, ascending."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, self.num_segments))
        return tuple(np.split(order, bounds))

    def check_shape(self, shape, what="anomaly map") -> None:
        if tuple(shape) != self.shape:
            raise DimensionMismatchError(
                f"{what} has shape {tuple(shape)} but segmentation map has shape {self.shape}")

    def __eq__(self, other):
        if not isinstance(other, SegmentationMap):
            return NotImplemented
        return self.num_segments == other.num_segments and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: Label
    anomaly_map_paths: tuple[str, ...]
    classifier_score: float | None = None
    split_tag: SplitTag | None = None

    def __post_init__(self):
        if not self.anomaly_map_paths:
            raise ValidationError(f"sample {self.id!r} lists no anomaly maps")
        if self.classifier_score is not None and not math.isfinite(self.classifier_score):
            raise ValidationError(f"sample {self.id!r} has non-finite classifier score")
        object.__setattr__(self, "anomaly_map_paths", tuple(self.anomaly_map_paths))
        object.__setattr__(self, "label", Label(self.label))
        if self.split_tag is not None:
            object.__setattr__(self, "split_tag", SplitTag(self.split_tag))


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[SampleRecord, ...]
    num_detectors: int
    # Relative map paths are resolved against this directory.
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DuplicateIdError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if len(s.anomaly_map_paths) != self.num_detectors:
                raise InconsistencyError(
                    f"sample {s.id!r} lists {len(s.anomaly_map_paths)} maps, expected K={self.num_detectors}")
        if len({s.classifier_score is None for s in self.samples}) > 1:
            raise InconsistencyError("classifier score must be present for all samples or for none")

    @property
    def has_score(self) -> bool:
        return bool(self.samples) and self.samples[0].classifier_score is not None

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def with_samples(self, samples: Iterable[SampleRecord]) -> "DatasetManifest":
        return replace(self, samples=tuple(samples))

    def select(self, tags: Iterable[SplitTag | str] | None) -> list[SampleRecord]:
        if tags is None:
            return list(self.samples)
        wanted = {SplitTag(t) for t in tags}
        return [s for s in self.samples if s.split_tag in wanted]

    def count(self, tag: SplitTag | None, label: Label | None = None) -> int:
        return sum(1 for s in self.samples
                   if s.split_tag == tag and (label is None or s.label == label))


# --------------------------------------------------------------------------- #
# CSV manifest: header ``id,label,score,map_1,...,map_K,split``

def _parse_manifest(text: str, source: str, root: Path | None) -> DatasetManifest:
    lines = [ln for ln in text.split("\n") if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ManifestParseError(f"{source}: empty manifest")
    reader = csv.reader(lines, strict=True)
    try:
        header = next(reader)
    except csv.Error as exc:
        raise ManifestParseError(f"{source}: {exc}") from None
    header = [h.strip() for h in header]
    if header[:3] != ["id", "label", "score"] or header[-1] != "split":
        raise ManifestParseError(f"{source}: header must be id,label,score,map_1..map_K,split; got {header}")
    map_cols = header[3:-1]
    if not map_cols or map_cols != [f"map_{i + 1}" for i in range(len(map_cols))]:
        raise ManifestParseError(f"{source}: map columns must be map_1..map_K, got {map_cols}")

    samples = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) < 5:
            raise ManifestParseError(f"{source}:{lineno}: expected at least 5 fields, got {len(row)}")
        # A row with more or fewer map columns than its peers is a K
        # inconsistency, not a parse error, as long as the frame is intact.
        rid, label, score, *maps, split = (c.strip() for c in row)
        if not rid:
            raise ManifestParseError(f"{source}:{lineno}: empty id")
        try:
            lab = Label.parse(label)
        except ValueError as exc:
            raise ManifestParseError(f"{source}:{lineno}: {exc}") from None
        try:
            sc = float(score) if score else None
        except ValueError:
            raise ManifestParseError(f"{source}:{lineno}: score {score!r} is not a number") from None
        if sc is not None and not math.isfinite(sc):
            raise ManifestParseError(f"{source}:{lineno}: score must be finite")
        try:
            tag = SplitTag(split) if split else None
        except ValueError:
            raise ManifestParseError(f"{source}:{lineno}: unknown split tag {split!r}") from None
        maps = [m for m in maps if m]
        if not maps:
            raise ManifestParseError(f"{source}:{lineno}: no anomaly map paths")
        samples.append(SampleRecord(rid, lab, tuple(maps), sc, tag))

    ks = {len(s.anomaly_map_paths) for s in samples}
    if len(ks) > 1:
        raise InconsistencyError(f"{source}: rows disagree on number of anomaly maps: {sorted(ks)}")
    k = ks.pop() if ks else len(map_cols)
    return DatasetManifest(tuple(samples), k, root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return _parse_manifest(text, str(path), path.parent)


def parse_manifest(text: str, root=None) -> DatasetManifest:
    return _parse_manifest(text, "<string>", Path(root) if root is not None else None)


def format_manifest(manifest: DatasetManifest, comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "score", *[f"map_{i + 1}" for i in range(manifest.num_detectors)], "split"])
    for s in manifest.samples:
        score = "" if s.classifier_score is None else repr(float(s.classifier_score))
        split = "" if s.split_tag is None else s.split_tag.value
        w.writerow([s.id, str(s.label), score, *s.anomaly_map_paths, split])
    return buf.getvalue()


def rebase_manifest(manifest: DatasetManifest, root) -> DatasetManifest:
    """Rewrite relative map paths so they resolve from ``root`` instead."""
    root = Path(root)
    if manifest.root is None or Path(manifest.root).resolve() == root.resolve():
        return manifest

    def move(p: str) -> str:
        if Path(p).is_absolute():
            return p
        return Path(os.path.relpath(Path(manifest.root).resolve() / p, root.resolve())).as_posix()

    samples = [replace(s, anomaly_map_paths=tuple(move(p) for p in s.anomaly_map_paths))
               for s in manifest.samples]
    return replace(manifest.with_samples(samples), root=root)


def write_manifest(manifest: DatasetManifest, path, comments: Sequence[str] = ()) -> None:
    """Write ``manifest`` to ``path``, keeping its relative map paths valid."""
    path = Path(path)
    manifest = rebase_manifest(manifest, path.parent)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_manifest(manifest, comments))


# --------------------------------------------------------------------------- #
# Split protocols

def split_dataset(manifest: DatasetManifest, protocol: Protocol | str, seed: int,
                  n_bad: int = 100, base_fraction: float = 0.5) -> DatasetManifest:
    """Assign split tags to every non-test sample.

    Training good samples are shuffled and divided into a ``base_model`` part
    (``ceil(base_fraction * n)``, so an odd extra sample lands there) and a
    ``segad_train`` part. Training bad samples go to ``segad_train``: all of
    them for ``high_shot``, a seeded subset of ``n_bad`` for ``low_shot``,
    none for ``one_class``. Bad samples left out are tagged ``unused``.
    Samples already tagged ``test`` are kept as they are.
    """
    protocol = Protocol.parse(protocol) if isinstance(protocol, str) else Protocol(protocol)
    if not 0.0 < base_fraction < 1.0:
        raise ValidationError(f"base_fraction must lie in (0, 1), got {base_fraction}")
    if n_bad < 0:
        raise ValidationError("n_bad must be non-negative")

    pool = [i for i, s in enumerate(manifest.samples) if s.split_tag != SplitTag.TEST]
    good = [i for i in pool if manifest.samples[i].label == Label.GOOD]
    bad = [i for i in pool if manifest.samples[i].label == Label.BAD]
    if len(good) < 2:
        raise InsufficientSamplesError(f"need at least 2 training good samples, found {len(good)}")

    n_segad_good = int(math.floor(len(good) * (1.0 - base_fraction) + 1e-9))
    n_segad_good = min(max(n_segad_good, 1), len(good) - 1)
    perm = rng_streams.stream(rng_streams.SPLIT_GOOD, seed).permutation(len(good))
    tags: dict[int, SplitTag] = {}
    for rank, j in enumerate(perm):
        tags[good[j]] = SplitTag.BASE_MODEL if rank < len(good) - n_segad_good else SplitTag.SEGAD_TRAIN

    if protocol is Protocol.ONE_CLASS:
        chosen = set()
    elif protocol is Protocol.HIGH_SHOT:
        chosen = set(bad)
    else:
        take = min(n_bad, len(bad))
        if take < n_bad:
            logger.warning("low_shot: only %d bad training samples available, %d requested", len(bad), n_bad)
        perm = rng_streams.stream(rng_streams.SPLIT_BAD, seed).permutation(len(bad))
        chosen = {bad[j] for j in perm[:take]}
    for i in bad:
        tags[i] = SplitTag.SEGAD_TRAIN if i in chosen else SplitTag.UNUSED

    return manifest.with_samples(
        replace(s, split_tag=tags[i]) if i in tags else s for i, s in enumerate(manifest.samples))
