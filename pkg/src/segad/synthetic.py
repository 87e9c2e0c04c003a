"""Synthetic anomaly-map corpus for desk-scale benchmarking.

Stands in for detector outputs on a segmented part. The layout has seven
segments: background, four quadrants of a ring, an inner disk, and a border
strip along the bottom edge. Each segment has its own score level and noise
scale. In every image the border strip carries heavy-tailed noise, which
swamps image-wide maxima, and any normal segment may carry one isolated
spike pixel. A bad image has about 1.5 % of the pixels of one random
non-border segment raised, which lifts that segment's upper tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_streams
from .core import AnomalyMap, DatasetManifest, Label, SampleRecord, SegmentationMap, SplitTag, write_manifest
from .io import write_amap, write_segmap

DISTRACTOR = 6


@dataclass(frozen=True)
class SyntheticConfig:
    n_good: int = 2000
    n_bad: int = 600
    size: int = 64
    num_detectors: int = 1
    # Half of each class goes to the test split.
    test_fraction: float = 0.5
    with_score: bool = False
    anomaly_fraction: float = 0.015
    anomaly_strength: tuple[float, float] = (1.0, 2.5)
    spike_probability: float = 0.3
    spike_strength: tuple[float, float] = (2.5, 5.0)
    distractor_df: float = 1.5
    seed: int = 0


def segmentation(size: int = 64) -> SegmentationMap:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    outer, inner = 0.42 * size, 0.19 * size
    labels = np.zeros((size, size), dtype=np.int32)
    ring = (r < outer) & (r >= inner)
    quad = (yy >= c).astype(int) * 2 + (xx >= c).astype(int)
    labels[ring] = 1 + quad[ring]
    labels[r < inner] = 5
    labels[int(round(size * 7 / 8)):, :] = DISTRACTOR
    return SegmentationMap(labels)


# Per-segment score level and noise scale.
LEVELS = np.array([0.10, 0.30, 0.35, 0.30, 0.35, 0.50, 0.20])
SCALES = np.array([0.05, 0.10, 0.12, 0.10, 0.12, 0.15, 0.08])


def draw_anomaly(seg: SegmentationMap, rng: np.random.Generator, cfg: SyntheticConfig):
    """Segment and pixel indices raised in a bad image, shared by all detectors."""
    l = int(rng.integers(DISTRACTOR))
    idx = seg.flat_indices[l]
    m = max(3, int(math.ceil(cfg.anomaly_fraction * idx.size)))
    return l, rng.choice(idx, size=m, replace=False)


def synth_map(seg: SegmentationMap, anomaly, rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    flat_idx = seg.flat_indices
    values = np.empty(seg.labels.size, dtype=np.float64)
    for l, idx in enumerate(flat_idx):
        noise = np.abs(rng.standard_normal(idx.size))
        if l == DISTRACTOR:
            noise = np.abs(rng.standard_t(cfg.distractor_df, idx.size))
        values[idx] = LEVELS[l] + SCALES[l] * noise
        if l != DISTRACTOR and rng.random() < cfg.spike_probability:
            values[idx[rng.integers(idx.size)]] += SCALES[l] * rng.uniform(*cfg.spike_strength)
    if anomaly is not None:
        l, hit = anomaly
        m = hit.size
        values[hit] += SCALES[l] * rng.uniform(*cfg.anomaly_strength) * (1.0 + np.abs(rng.standard_normal(m)))
    return values.reshape(seg.shape).astype(np.float32)


def make_corpus(out_dir, cfg: SyntheticConfig = SyntheticConfig()) -> tuple[Path, Path]:
    """Write maps, ``segmap.pgm`` and ``manifest.csv`` under ``out_dir``.

    Returns ``(manifest_path, segmap_path)``. Test samples are tagged
    ``test``; training samples are left untagged for the split protocols.
    """
    out = Path(out_dir)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    seg = segmentation(cfg.size)
    write_segmap(seg, out / "segmap.pgm")
    samples = []
    n_test = {Label.GOOD: int(round(cfg.n_good * cfg.test_fraction)),
              Label.BAD: int(round(cfg.n_bad * cfg.test_fraction))}
    i = 0
    for label, count in ((Label.GOOD, cfg.n_good), (Label.BAD, cfg.n_bad)):
        for j in range(count):
            sid = f"{label}_{j:05d}"
            rng = rng_streams.stream(rng_streams.SYNTHETIC, cfg.seed, i)
            anomaly = draw_anomaly(seg, rng, cfg) if label == Label.BAD else None
            paths = []
            for k in range(cfg.num_detectors):
                rel = f"maps/{sid}_k{k}.amap"
                write_amap(AnomalyMap(synth_map(seg, anomaly, rng, cfg)), out / rel)
                paths.append(rel)
            score = None
            if cfg.with_score:
                score = float(rng.normal(1.0 if label == Label.BAD else 0.0, 1.0))
            tag = SplitTag.TEST if j < n_test[label] else None
            samples.append(SampleRecord(sid, label, tuple(paths), score, tag))
            i += 1
    manifest = DatasetManifest(tuple(samples), cfg.num_detectors, out)
    write_manifest(manifest, out / "manifest.csv")
    return out / "manifest.csv", out / "segmap.pgm"
