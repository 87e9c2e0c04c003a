import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from segad import stats
from segad.core import AnomalyMap, DatasetManifest, Label, SampleRecord, SegmentationMap, SplitTag
from segad.errors import (
    DimensionMismatchError,
    EmptyInputError,
    SampleIOError,
    SegmentIndexError,
)
from segad.io import write_amap
from segad.stats import FeatureConfig, FeatureLayout, extract_corpus, extract_features

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_segment_values_selection():
    amap = AnomalyMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
    seg = SegmentationMap(np.array([[0, 0], [1, 1]]))
    assert stats.segment_values(amap, seg, 0).tolist() == [1.0, 2.0]
    assert stats.segment_values(amap, seg, 1).tolist() == [3.0, 4.0]
    with pytest.raises(SegmentIndexError):
        stats.segment_values(amap, seg, 5)
    with pytest.raises(DimensionMismatchError):
        stats.segment_values(AnomalyMap(np.zeros((3, 2))), seg, 0)


def test_segment_values_partition_512(rng):
    labels = rng.integers(0, 7, size=(512, 512))
    seg = SegmentationMap(labels)
    amap = AnomalyMap(rng.random((512, 512)))
    assert sum(stats.segment_values(amap, seg, l).size for l in range(7)) == 512 * 512


@pytest.mark.parametrize("values, p, expected", [
    ([5.0], 0.995, 5.0),
    (list(range(1000)), 0.995, 994.005),  # oracle: h = 999 * 0.995
    ([3.0, 1.0, 2.0], 0.5, 2.0),
    ([3.0, 1.0, 2.0], 1.0, 3.0),
    ([3.0, 1.0, 2.0], 0.0, 1.0),
])
def test_quantile_examples(values, p, expected):
    assert stats.quantile(values, p) == pytest.approx(expected, abs=1e-12)
    assert oracles.quantile(values, p) == pytest.approx(expected, abs=1e-12)


def test_moment_examples():
    assert stats.mean([1, 2, 3]) == 2.0
    assert stats.skewness([1, 2, 3]) == 0.0
    assert stats.skewness([7, 7, 7]) == 0.0
    assert stats.kurtosis([7, 7, 7]) == 0.0
    # oracle: m2 = 3/16, m3 = 3/32, m3 / m2**1.5
    assert stats.skewness([0, 0, 0, 1]) == pytest.approx(1.1547005383792515, rel=1e-12)
    assert stats.kurtosis([0, 1]) == pytest.approx(-2.0, rel=1e-12)


@pytest.mark.parametrize("fn", [stats.mean, stats.skewness, stats.kurtosis, lambda v: stats.quantile(v, 0.5)])
def test_empty_input(fn):
    with pytest.raises(EmptyInputError):
        fn([])


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_statistics_permutation_invariant(values, r):
    shuffled = list(values)
    r.shuffle(shuffled)
    for fn in (stats.mean, stats.skewness, stats.kurtosis):
        assert fn(shuffled) == pytest.approx(fn(values), rel=1e-9, abs=1e-9)
    assert stats.quantile(shuffled, 0.995) == stats.quantile(values, 0.995)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=60), st.floats(0.1, 10), st.floats(-50, 50))
def test_statistics_affine(values, a, b):
    v = np.array(values)
    assume(v.std() > 1e-3)
    w = a * v + b
    assert stats.mean(w) == pytest.approx(a * stats.mean(v) + b, rel=1e-9, abs=1e-9)
    assert stats.quantile(w, 0.995) == pytest.approx(a * stats.quantile(v, 0.995) + b, rel=1e-9, abs=1e-9)
    assert stats.skewness(w) == pytest.approx(stats.skewness(v), rel=1e-6, abs=1e-6)
    assert stats.kurtosis(w) == pytest.approx(stats.kurtosis(v), rel=1e-6, abs=1e-6)


def test_feature_length_four_detectors_seven_segments(rng):
    seg = SegmentationMap(np.arange(7).repeat(10).reshape(7, 10))
    maps = [AnomalyMap(rng.random((7, 10))) for _ in range(4)]
    fv = extract_features(maps, seg, score=0.3)
    assert len(fv) == 113
    assert fv.values[0] == 0.3


def test_feature_constant_map():
    fv = extract_features([AnomalyMap(np.full((4, 4), 3.0))], SegmentationMap(np.zeros((4, 4), int)))
    assert fv.values.tolist() == [3.0, 0.0, 0.0, 3.0]


def test_feature_duplicate_detector(rng):
    seg = SegmentationMap(rng.integers(0, 3, (8, 8)))
    m = AnomalyMap(rng.random((8, 8)))
    fv = extract_features([m, m], seg)
    for stat in fv.layout.stats:
        for l in range(3):
            assert fv.get(stat, 1, l) == fv.get(stat, 0, l)


def test_feature_values_match_segment_stats(rng):
    seg = SegmentationMap(rng.integers(0, 4, (16, 16)))
    maps = [AnomalyMap(rng.normal(size=(16, 16))) for _ in range(2)]
    fv = extract_features(maps, seg)
    for k in range(2):
        for l in range(4):
            v = stats.segment_values(maps[k], seg, l)
            assert fv.get("q", k, l) == stats.quantile(v, 0.995)
            assert fv.get("z", k, l) == stats.skewness(v)
            assert fv.get("c", k, l) == stats.kurtosis(v)
            assert fv.get("m", k, l) == stats.mean(v)


def test_max_variant(rng):
    seg = SegmentationMap(rng.integers(0, 3, (8, 8)))
    m = AnomalyMap(rng.random((8, 8)))
    fv = extract_features([m], seg, variant="max")
    assert len(fv) == 3
    for l in range(3):
        assert fv.get("max", 0, l) == stats.segment_values(m, seg, l).max()


@given(k=st.integers(1, 5), l=st.integers(1, 9), has_score=st.booleans(), variant=st.sampled_from(["full", "max"]))
def test_layout_bijection(k, l, has_score, variant):
    layout = FeatureLayout(k, l, has_score, variant)
    seen = set()
    for stat in layout.stats:
        for kk in range(k):
            for ll in range(l):
                i = layout.index(stat, kk, ll)
                assert layout.locate(i) == (stat, kk, ll)
                seen.add(i)
    if has_score:
        assert layout.locate(0) is None
        seen.add(0)
    assert seen == set(range(len(layout)))
    assert len(layout.names()) == len(layout)


def test_layout_order_is_stat_then_detector_then_segment():
    layout = FeatureLayout(2, 3, True)
    assert layout.names()[:8] == ["score", "q_k0_l0", "q_k0_l1", "q_k0_l2", "q_k1_l0", "q_k1_l1", "q_k1_l2", "z_k0_l0"]


def _write_corpus(tmp_path, rng, n=10, k=1):
    seg = SegmentationMap(np.arange(7).repeat(4).reshape(7, 4))
    samples = []
    for i in range(n):
        paths = []
        for j in range(k):
            rel = f"m{i}_{j}.amap"
            write_amap(AnomalyMap(rng.random((7, 4)).astype(np.float32)), tmp_path / rel)
            paths.append(rel)
        tag = SplitTag.SEGAD_TRAIN if i < 6 else SplitTag.TEST
        samples.append(SampleRecord(f"s{i}", Label(i % 2), tuple(paths), float(i), tag))
    return DatasetManifest(tuple(samples), k, tmp_path), seg


def test_extract_corpus_shape_and_order(tmp_path, rng):
    manifest, seg = _write_corpus(tmp_path, rng)
    X, y, ids = extract_corpus(manifest, seg, ["segad_train"])
    assert X.shape == (6, 28)
    assert ids == [f"s{i}" for i in range(6)]
    assert y.tolist() == [0, 1, 0, 1, 0, 1]
    X2, _, _ = extract_corpus(manifest, seg, ["segad_train"], threads=4)
    assert X2.tobytes() == X.tobytes()


def test_extract_corpus_empty_match(tmp_path, rng):
    manifest, seg = _write_corpus(tmp_path, rng)
    X, y, ids = extract_corpus(manifest, seg, ["unused"])
    assert X.shape == (0, 28) and y.size == 0 and ids == []


def test_extract_corpus_missing_file(tmp_path, rng):
    manifest, seg = _write_corpus(tmp_path, rng)
    (tmp_path / "m3_0.amap").unlink()
    with pytest.raises(SampleIOError, match="s3"):
        extract_corpus(manifest, seg)


def test_extract_corpus_setups(tmp_path, rng):
    manifest, seg = _write_corpus(tmp_path, rng, k=2)
    full, _, _ = extract_corpus(manifest, seg, None, FeatureConfig("all_ad_plus_score"))
    assert full.shape == (10, 2 * 7 * 4 + 1)
    assert full[:, 0].tolist() == [float(i) for i in range(10)]
    single, _, _ = extract_corpus(manifest, seg, None, FeatureConfig("single_ad", detector=1))
    layout = FeatureLayout(2, 7, True)
    single_layout = FeatureLayout(1, 7, False)
    for stat in "qzcm":
        for l in range(7):
            np.testing.assert_array_equal(single[:, single_layout.index(stat, 0, l)],
                                          full[:, layout.index(stat, 1, l)])
    one, _, _ = extract_corpus(manifest, seg, None, FeatureConfig(one_segment=True))
    assert one.shape == (10, 2 * 4)


def test_features_csv_round_trip(tmp_path, rng):
    manifest, seg = _write_corpus(tmp_path, rng)
    X, y, ids = extract_corpus(manifest, seg)
    names = FeatureLayout(1, 7).names()
    text = stats.format_features_csv(X, y, ids, names, ["segad test"])
    X2, y2, ids2, names2 = stats.parse_features_csv(text)
    assert X2.tobytes() == X.tobytes()
    assert y2.tolist() == y.tolist() and ids2 == ids and names2 == names
