import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segad.core import (
    AnomalyMap,
    DatasetManifest,
    Label,
    SampleRecord,
    SegmentationMap,
    SplitTag,
    format_manifest,
    load_manifest,
    parse_manifest,
    split_dataset,
    write_manifest,
)
from segad.errors import (
    DuplicateIdError,
    InconsistencyError,
    InsufficientSamplesError,
    ManifestParseError,
    SegmentGapError,
    ValidationError,
)

MANIFEST = """id,label,score,map_1,map_2,split
img_001,good,,a1.amap,b1.amap,
img_002,good,,a2.amap,b2.amap,test
img_003,bad,,a3.amap,b3.amap,
img_004,bad,,a4.amap,b4.amap,test
"""


def make_manifest(n_good, n_bad, n_test_good=0, n_test_bad=0, k=1):
    samples = []
    for label, n, tag, prefix in ((Label.GOOD, n_good, None, "g"), (Label.BAD, n_bad, None, "b"),
                                  (Label.GOOD, n_test_good, SplitTag.TEST, "tg"),
                                  (Label.BAD, n_test_bad, SplitTag.TEST, "tb")):
        for i in range(n):
            samples.append(SampleRecord(f"{prefix}{i}", label, tuple(f"{prefix}{i}_{j}.amap" for j in range(k)),
                                        None, tag))
    return DatasetManifest(tuple(samples), k)


def test_load_manifest(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(MANIFEST)
    m = load_manifest(p)
    assert len(m.samples) == 4
    assert m.num_detectors == 2
    assert m.samples[0].anomaly_map_paths == ("a1.amap", "b1.amap")
    assert m.samples[1].split_tag is SplitTag.TEST
    assert m.samples[2].label is Label.BAD
    assert m.resolve("a1.amap") == tmp_path / "a1.amap"
    assert not m.has_score


def test_manifest_mixed_k_is_inconsistent():
    text = "id,label,score,map_1,map_2,map_3,split\nx,good,,a,b,c,\ny,good,,a,b,\n"
    with pytest.raises(InconsistencyError):
        parse_manifest(text)


def test_manifest_mixed_score_presence_is_inconsistent():
    text = "id,label,score,map_1,split\nx,good,0.5,a,\ny,bad,,b,\n"
    with pytest.raises(InconsistencyError):
        parse_manifest(text)


def test_manifest_duplicate_id():
    text = "id,label,score,map_1,split\nimg_007,good,,a,\nimg_007,bad,,b,\n"
    with pytest.raises(DuplicateIdError):
        parse_manifest(text)


@pytest.mark.parametrize("text", [
    "",
    "name,label,score,map_1,split\nx,good,,a,\n",
    "id,label,score,map_1,split\nx,okay,,a,\n",
    "id,label,score,map_1,split\nx,good,abc,a,\n",
    "id,label,score,map_1,split\nx,good,inf,a,\n",
    "id,label,score,map_1,split\nx,good,,a,training\n",
    "id,label,score,map_1,split\nx,good\n",
])
def test_manifest_parse_errors(text):
    with pytest.raises(ManifestParseError):
        parse_manifest(text)


def test_manifest_round_trip_with_scores():
    text = "id,label,score,map_1,split\nx,good,0.25,a,segad_train\ny,bad,-1.5,b,test\n"
    m = parse_manifest(text)
    assert m.has_score
    assert parse_manifest(format_manifest(m)) == m
    assert format_manifest(m) == text


def test_anomaly_map_rejects_nonfinite():
    with pytest.raises(ValidationError, match="pixel index 3"):
        AnomalyMap(np.array([[0.0, 1.0], [2.0, np.inf]]))


def test_segmentation_map_gap():
    with pytest.raises(SegmentGapError):
        SegmentationMap(np.array([[0, 2], [2, 0]]))
    seg = SegmentationMap(np.array([[0, 1], [2, 1]]))
    assert seg.num_segments == 3
    assert [list(i) for i in seg.flat_indices] == [[0], [1, 3], [2]]


def test_split_high_shot_benchmark_sizes():
    m = split_dataset(make_manifest(2000, 1000, 1000, 1000), "high_shot", seed=0)
    assert m.count(SplitTag.BASE_MODEL, Label.GOOD) == 1000
    assert m.count(SplitTag.SEGAD_TRAIN, Label.GOOD) == 1000
    assert m.count(SplitTag.SEGAD_TRAIN, Label.BAD) == 1000
    assert m.count(SplitTag.TEST) == 2000


def test_split_low_shot_seeds_differ():
    base = make_manifest(2000, 1000)
    picks = []
    for seed in (1, 2):
        m = split_dataset(base, "low_shot", seed)
        chosen = {s.id for s in m.samples if s.label == Label.BAD and s.split_tag == SplitTag.SEGAD_TRAIN}
        assert len(chosen) == 100
        assert m.count(SplitTag.UNUSED, Label.BAD) == 900
        picks.append(chosen)
    assert picks[0] != picks[1]


def test_split_one_class_minimal():
    m = split_dataset(make_manifest(2, 0), "one_class", 0)
    assert m.count(SplitTag.BASE_MODEL) == 1
    assert m.count(SplitTag.SEGAD_TRAIN) == 1


def test_split_one_class_leaves_bad_unused():
    m = split_dataset(make_manifest(10, 5), "one-class", 0)
    assert m.count(SplitTag.UNUSED, Label.BAD) == 5
    assert m.count(SplitTag.SEGAD_TRAIN, Label.BAD) == 0


def test_split_insufficient():
    with pytest.raises(InsufficientSamplesError):
        split_dataset(make_manifest(1, 10), "high_shot", 0)


def test_split_odd_count_extra_goes_to_base():
    m = split_dataset(make_manifest(7, 0), "one_class", 3)
    assert m.count(SplitTag.BASE_MODEL) == 4
    assert m.count(SplitTag.SEGAD_TRAIN) == 3


def test_split_ninety_ten():
    m = split_dataset(make_manifest(1000, 0), "one_class", 0, base_fraction=0.9)
    assert m.count(SplitTag.BASE_MODEL) == 900
    assert m.count(SplitTag.SEGAD_TRAIN) == 100


def test_low_shot_takes_what_is_available(caplog):
    m = split_dataset(make_manifest(10, 30), "low_shot", 0, n_bad=100)
    assert m.count(SplitTag.SEGAD_TRAIN, Label.BAD) == 30
    assert "only 30" in caplog.text


@settings(max_examples=60, deadline=None)
@given(n_good=st.integers(2, 60), n_bad=st.integers(0, 40), n_test=st.integers(0, 10),
       protocol=st.sampled_from(["one_class", "high_shot", "low_shot"]), seed=st.integers(0, 2**32 - 1),
       n_bad_req=st.integers(0, 50))
def test_split_properties(n_good, n_bad, n_test, protocol, seed, n_bad_req):
    base = make_manifest(n_good, n_bad, n_test, n_test)
    a = split_dataset(base, protocol, seed, n_bad=n_bad_req)
    b = split_dataset(base, protocol, seed, n_bad=n_bad_req)
    assert a == b
    for before, after in zip(base.samples, a.samples):
        assert after.split_tag is not None
        assert (before.split_tag == SplitTag.TEST) == (after.split_tag == SplitTag.TEST)
    diff = a.count(SplitTag.BASE_MODEL, Label.GOOD) - a.count(SplitTag.SEGAD_TRAIN, Label.GOOD)
    assert diff in (0, 1)
    assert a.count(SplitTag.BASE_MODEL, Label.BAD) == 0
    expected_bad = {"one_class": 0, "high_shot": n_bad, "low_shot": min(n_bad_req, n_bad)}[protocol]
    assert a.count(SplitTag.SEGAD_TRAIN, Label.BAD) == expected_bad


def test_write_manifest_rebases_relative_paths(tmp_path):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "m.csv").write_text("id,label,score,map_1,split\nx,good,,maps/x.amap,\ny,bad,,/abs/y.amap,\n")
    m = load_manifest(tmp_path / "data" / "m.csv")
    (tmp_path / "runs" / "a").mkdir(parents=True)
    write_manifest(m, tmp_path / "runs" / "a" / "split.csv")
    moved = load_manifest(tmp_path / "runs" / "a" / "split.csv")
    assert moved.samples[0].anomaly_map_paths == ("../../data/maps/x.amap",)
    assert moved.resolve(moved.samples[0].anomaly_map_paths[0]).resolve() == (tmp_path / "data/maps/x.amap")
    assert moved.samples[1].anomaly_map_paths == ("/abs/y.amap",)
    write_manifest(m, tmp_path / "data" / "same.csv")
    assert load_manifest(tmp_path / "data" / "same.csv").samples == m.samples
