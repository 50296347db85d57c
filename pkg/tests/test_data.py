import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from derain.data import (
    AlignedPair,
    DatasetSplit,
    EvaluationTrio,
    SceneGroundTruth,
    default_split_counts,
    load_pair_directory,
    read_image,
    read_trio_set,
    register_naming_scheme,
    split_dataset,
    write_image,
    write_trio_set,
)
from derain.errors import DecodeFailure, DimensionMismatch, InsufficientPairs, MissingCounterpart


def grid_image(rng, w=16, h=16):
    return rng.integers(0, 256, size=(h, w, 3)).astype(np.float32) / 255.0


def make_pairs(n, seed=0, w=16, h=16):
    rng = np.random.default_rng(seed)
    return [AlignedPair(grid_image(rng, w, h), grid_image(rng, w, h), f"p{i:03d}") for i in range(n)]


def test_raster_invariants_enforced():
    with pytest.raises(DimensionMismatch):
        AlignedPair(np.zeros((4, 16, 3)), np.zeros((4, 16, 3)), "tiny")
    with pytest.raises(ValueError):
        AlignedPair(np.full((8, 8, 3), 1.5), np.zeros((8, 8, 3)), "range")
    with pytest.raises(DimensionMismatch):
        AlignedPair(np.zeros((8, 8, 4)), np.zeros((8, 8, 4)), "rgba")


def test_pair_images_are_read_only():
    pair = make_pairs(1)[0]
    with pytest.raises(ValueError):
        pair.clear[0, 0, 0] = 0.0


def test_load_directory_sorted(tmp_path):
    rng = np.random.default_rng(1)
    for pid in ("c", "a", "b"):
        write_image(tmp_path / f"{pid}_rain.png", grid_image(rng))
        write_image(tmp_path / f"{pid}_clear.png", grid_image(rng))
    pairs = load_pair_directory(tmp_path)
    assert [p.id for p in pairs] == ["a", "b", "c"]


def test_load_directory_missing_counterpart(tmp_path):
    rng = np.random.default_rng(1)
    write_image(tmp_path / "a_rain.png", grid_image(rng))
    write_image(tmp_path / "a_clear.png", grid_image(rng))
    write_image(tmp_path / "lonely_rain.png", grid_image(rng))
    with pytest.raises(MissingCounterpart, match="lonely_rain"):
        load_pair_directory(tmp_path)


def test_load_directory_dimension_mismatch(tmp_path):
    rng = np.random.default_rng(1)
    write_image(tmp_path / "x_rain.png", grid_image(rng, 64, 60))
    write_image(tmp_path / "x_clear.png", grid_image(rng, 64, 64))
    with pytest.raises(DimensionMismatch):
        load_pair_directory(tmp_path)


def test_load_directory_decode_failure(tmp_path):
    (tmp_path / "x_rain.png").write_bytes(b"not a png")
    write_image(tmp_path / "x_clear.png", grid_image(np.random.default_rng(0)))
    with pytest.raises(DecodeFailure):
        load_pair_directory(tmp_path)


def test_subdirectory_scheme_and_custom_adapter(tmp_path):
    rng = np.random.default_rng(3)
    (tmp_path / "data").mkdir()
    (tmp_path / "gt").mkdir()
    for pid in ("0002", "0001"):
        write_image(tmp_path / "data" / f"{pid}.png", grid_image(rng))
        write_image(tmp_path / "gt" / f"{pid}.png", grid_image(rng))
    assert [p.id for p in load_pair_directory(tmp_path, "data_gt")] == ["0001", "0002"]

    register_naming_scheme("flipped", lambda root: [(s, root / "gt" / f"{s}.png", root / "data" / f"{s}.png")
                                                    for s in ("0001",)])
    (pair,) = load_pair_directory(tmp_path, "flipped")
    np.testing.assert_array_equal(pair.distorted, read_image(tmp_path / "gt" / "0001.png"))


def test_split_full_scale_counts():
    ids = [f"{i}" for i in range(50000)]
    # light stand-ins: only ids matter for partitioning
    class P:
        def __init__(self, i):
            self.id = i
    pairs = [P(i) for i in ids]
    split = split_dataset(pairs, (40000, 500, 500), seed=7)
    assert split.sizes == (40000, 500, 500)
    assert default_split_counts(50000) == (40000, 500, 500)


def test_split_degenerate_and_insufficient():
    pairs = make_pairs(10)
    split = split_dataset(pairs, (10, 0, 0), seed=123)
    assert sorted(p.id for p in split.train) == sorted(p.id for p in pairs)
    assert split.validation == () and split.test == ()
    with pytest.raises(InsufficientPairs):
        split_dataset(make_pairs(5), (4, 1, 1), seed=0)


def test_split_proportional_fallback():
    assert default_split_counts(200) == (195, 2, 2)
    assert default_split_counts(82) == (80, 1, 1)
    split = split_dataset(make_pairs(164), seed=1)
    assert split.sizes == (160, 2, 2)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 40), seed=st.integers(0, 2**64 - 1), data=st.data())
def test_split_is_deterministic_and_disjoint(n, seed, data):
    pairs = make_pairs(n)
    a = data.draw(st.integers(0, n))
    b = data.draw(st.integers(0, n - a))
    c = data.draw(st.integers(0, n - a - b))
    s1 = split_dataset(pairs, (a, b, c), seed)
    s2 = split_dataset(pairs, (a, b, c), seed)
    ids = lambda part: [p.id for p in part]
    assert (ids(s1.train), ids(s1.validation), ids(s1.test)) == (ids(s2.train), ids(s2.validation), ids(s2.test))
    assert s1.sizes == (a, b, c)
    everything = ids(s1.train) + ids(s1.validation) + ids(s1.test)
    assert len(set(everything)) == len(everything)


def test_split_rejects_overlapping_partitions():
    p = make_pairs(2)
    with pytest.raises(ValueError):
        DatasetSplit(train=(p[0],), validation=(p[0],))


def test_trio_set_counts(tmp_path):
    rng = np.random.default_rng(5)
    trios = [EvaluationTrio(grid_image(rng), grid_image(rng), grid_image(rng), f"t{i}") for i in range(2)]
    manifest = write_trio_set(trios, tmp_path / "set")
    obj = json.loads(manifest.read_text())
    assert len(obj["trios"]) == 2
    assert len(list((tmp_path / "set").glob("*.png"))) == 6
    assert set(obj["trios"][0]) == {"id", "input", "predicted", "ground_truth"}


def test_trio_set_empty(tmp_path):
    manifest = write_trio_set([], tmp_path / "empty")
    assert json.loads(manifest.read_text()) == {"trios": []}
    assert read_trio_set(manifest) == []


def test_trio_round_trip_pixel_identical(tmp_path):
    rng = np.random.default_rng(9)
    trios = [EvaluationTrio(grid_image(rng, 24, 16), grid_image(rng, 24, 16), grid_image(rng, 24, 16), f"t{i}")
             for i in range(3)]
    back = read_trio_set(write_trio_set(trios, tmp_path))
    for a, b in zip(trios, back):
        assert a.id == b.id
        for role in ("input", "predicted", "ground_truth"):
            # every pixel compared exactly
            assert np.array_equal(getattr(a, role), getattr(b, role))


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(8, 20), st.integers(8, 20), st.just(3))))
def test_image_write_read_identity(tmp_path_factory, u8):
    path = tmp_path_factory.mktemp("img") / "x.png"
    img = u8.astype(np.float32) / 255.0
    write_image(path, img)
    assert np.array_equal(read_image(path), img)


def test_scene_ground_truth_validation():
    gt = SceneGroundTruth(boxes=((0, 0, 8, 4),), labels=("car",))
    gt.validate((8, 8))
    with pytest.raises(DimensionMismatch):
        SceneGroundTruth(boxes=((4, 4, 8, 4),), labels=("car",)).validate((8, 8))
    with pytest.raises(ValueError):
        SceneGroundTruth(boxes=((0, 0, 1, 1),), labels=())
    assert SceneGroundTruth.from_json(gt.to_json()) == gt
