import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cataphase import dataio
from cataphase.dataio import (
    DataError,
    FrameRecord,
    PhaseAnnotation,
    VideoMeta,
    annotate_phases,
    discard_no_tool_frames,
    extract_frame_times,
    split_videos,
)

NO_TOOLS = (0,) * 21


def _tools(*on):
    return tuple(1 if c in on else 0 for c in range(21))


def _frames(video_id, times, tools=NO_TOOLS):
    return [FrameRecord(video_id, k, t, tools) for k, t in times]


def test_frame_times_examples():
    assert extract_frame_times(VideoMeta("v", 30, 1.0), 3) == [(0, 0.0), (1, 1 / 3), (2, 2 / 3)]
    times = extract_frame_times(VideoMeta("v", 30, 10.0), 3)
    assert len(times) == 30 and times[-1] == (29, 29 / 3)
    assert len(extract_frame_times(VideoMeta("v", 25, 2.0), 25)) == 50


@given(st.floats(0, 600), st.sampled_from([1.0, 3.0, 7.5, 30.0]))
def test_frame_times_cover_duration(duration, fps):
    times = extract_frame_times(VideoMeta("v", 30, duration), fps)
    assert all(t < duration for _, t in times)
    assert len(times) / fps >= duration
    assert all(t == k / fps for k, t in times)


def test_frame_times_reject_bad_rate():
    with pytest.raises(DataError):
        extract_frame_times(VideoMeta("v", 30, 1.0), 0)
    with pytest.raises(DataError):
        extract_frame_times(VideoMeta("v", 30, 1.0), 60)
    with pytest.raises(DataError):
        VideoMeta("v", 0, 1.0)


def test_discard_examples():
    tooled = _frames("v", extract_frame_times(VideoMeta("v", 30, 5), 3), _tools(2))
    assert discard_no_tool_frames(tooled, 0.5, seed=1) == tooled
    mixed = _frames("v", [(k, k / 3) for k in range(20)])
    for r in mixed[::2]:
        r.tools = _tools(0)
    assert all(r.has_tools for r in discard_no_tool_frames(mixed, 1.0, seed=0))


def test_discard_removes_ceil_half_reproducibly():
    recs = _frames("v", [(k, k / 3) for k in range(10)])
    a = discard_no_tool_frames(recs, 0.5, seed=7)
    b = discard_no_tool_frames(recs, 0.5, seed=7)
    assert len(a) == 5 and a == b


@settings(max_examples=60)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_discard_count_and_preservation(seed, fraction):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 80))
    recs = [FrameRecord("v", k, k / 3, tuple(rng.random(21) < 0.03)) for k in range(n)]
    m = sum(not r.has_tools for r in recs)
    out = discard_no_tool_frames(recs, fraction, seed=seed)
    assert len(out) == n - math.ceil(fraction * m)
    assert [r for r in recs if r.has_tools] == [r for r in out if r.has_tools]
    assert [r.frame_index for r in out] == sorted(r.frame_index for r in out)


def test_annotate_boundary_is_inclusive():
    recs = _frames("v", extract_frame_times(VideoMeta("v", 30, 20), 3))
    out = annotate_phases(recs, PhaseAnnotation(((1, 0.0), (2, 10.0))))
    assert {r.phase for r in out[:30]} == {1}
    assert {r.phase for r in out[30:]} == {2}
    assert out[30].time_s == 10.0


def test_annotate_single_and_every_frame():
    recs = _frames("v", extract_frame_times(VideoMeta("v", 30, 3), 3))
    assert {r.phase for r in annotate_phases(recs, PhaseAnnotation(((4, 0.0),)))} == {4}
    trans = tuple((k % 14, r.time_s) for k, r in enumerate(recs))
    assert [r.phase for r in annotate_phases(recs, PhaseAnnotation(trans))] == [p for p, _ in trans]


def test_annotate_frame_before_first_transition_errors():
    recs = _frames("v", [(0, 0.0), (1, 1 / 3)])
    with pytest.raises(DataError, match="t=0.0"):
        annotate_phases(recs, PhaseAnnotation(((0, 0.2),)))


@given(st.lists(st.floats(0.01, 30), min_size=1, max_size=8), st.integers(0, 2**31))
def test_annotate_change_points_within_one_frame(gaps, seed):
    rng = np.random.default_rng(seed)
    starts = np.concatenate([[0.0], np.cumsum(gaps)])
    phases = rng.integers(0, 14, size=len(starts))
    for k in range(1, len(phases)):
        if phases[k] == phases[k - 1]:
            phases[k] = (phases[k] + 1) % 14
    ann = PhaseAnnotation(tuple(zip(phases, starts)))
    recs = _frames("v", extract_frame_times(VideoMeta("v", 30, starts[-1] + 5), 3))
    for phase, t in dataio.phase_transitions(annotate_phases(recs, ann)):
        k = int(np.searchsorted(starts, t, side="right")) - 1
        assert phases[k] == phase
        assert t - starts[k] < 1 / 3 + 1e-12


def test_annotation_validation():
    with pytest.raises(DataError, match="increasing"):
        PhaseAnnotation(((0, 1.0), (1, 1.0)))
    with pytest.raises(DataError):
        PhaseAnnotation(((14, 0.0),))
    with pytest.raises(DataError):
        PhaseAnnotation(())


def test_frame_record_validation():
    with pytest.raises(DataError, match="21"):
        FrameRecord("v", 0, 0.0, (0,) * 20)
    with pytest.raises(DataError):
        FrameRecord("v", 0, 0.0, (2,) + (0,) * 20)


def _random_records(rng, n_videos=3, n_frames=40):
    out = []
    for v in range(n_videos):
        for k in range(n_frames):
            out.append(FrameRecord(f"vid{v}", k, k / 3, tuple(rng.integers(0, 2, 21)),
                                   None if k % 7 == 0 else int(rng.integers(0, 14))))
    return out


def test_frame_table_round_trip(tmp_path):
    recs = _random_records(np.random.default_rng(0))
    path = tmp_path / "frames.csv"
    dataio.save_frame_table(recs[::-1], path)
    assert dataio.load_frame_table(path) == recs
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    assert raw.splitlines()[0].decode() == ",".join(dataio.FRAME_COLUMNS)


def test_frame_table_wrong_tool_count(tmp_path):
    header = ["video_id", "frame_index", "time_s"] + [f"tool_{c:02d}" for c in range(20)] + ["phase_id"]
    path = tmp_path / "f.csv"
    path.write_text(",".join(header) + "\n")
    with pytest.raises(DataError, match="expected 21"):
        dataio.load_frame_table(path)


@pytest.mark.parametrize("mutate,needle", [
    (lambda row: row[:-1], "line 3: 24 columns"),
    (lambda row: row[:3] + ["2"] + row[4:], "line 3: tool_00"),
    (lambda row: row[:-1] + ["14"], "line 3: phase_id 14"),
])
def test_frame_table_errors_cite_line(tmp_path, mutate, needle):
    recs = _random_records(np.random.default_rng(1), 1, 3)
    lines = dataio.format_frame_table(recs).splitlines()
    lines[2] = ",".join(mutate(lines[2].split(",")))
    with pytest.raises(DataError, match=needle):
        dataio.parse_frame_table("\n".join(lines) + "\n")


def test_frame_table_full_size(tmp_path):
    # size of the largest split in the source dataset
    n = 32_529
    recs = [FrameRecord(f"v{k // 3000:02d}", k % 3000, (k % 3000) / 3, _tools(k % 21), k % 14) for k in range(n)]
    path = tmp_path / "big.csv"
    dataio.save_frame_table(recs, path)
    assert len(dataio.load_frame_table(path)) == n


def test_feature_store_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    vecs = {(f"v{k % 7}", k): rng.normal(size=16).astype(np.float32) for k in range(1000)}
    path = tmp_path / "f.phft"
    dataio.save_feature_store(vecs, path)
    back = dataio.load_feature_store(path)
    assert back.keys() == vecs.keys()
    for key, v in vecs.items():
        assert back[key].dtype == np.float64 and back[key].shape == (16,)
        assert back[key].astype(np.float32).tobytes() == v.tobytes()
    assert path.read_bytes() == dataio.encode_feature_store(back)


def test_feature_store_empty(tmp_path):
    path = tmp_path / "e.phft"
    dataio.save_feature_store({}, path, dim=8)
    assert dataio.load_feature_store(path) == {}
    assert dataio.feature_store_dim(path) == 8


def test_feature_store_errors(tmp_path):
    data = dataio.encode_feature_store({("a", 0): np.ones(4), ("a", 1): np.ones(4)})
    with pytest.raises(DataError, match="offset"):
        dataio.decode_feature_store(data[:-3])
    with pytest.raises(DataError, match="header"):
        dataio.decode_feature_store(b"XXXX" + data[4:])
    with pytest.raises(DataError, match="dimension"):
        dataio.encode_feature_store({("a", 0): np.ones(4), ("a", 1): np.ones(5)})
    with pytest.raises(DataError, match="shape"):
        dataio.encode_feature_store({("a", 0): np.ones(5)}, dim=4)


@given(st.integers(1, 60), st.integers(0, 2**31))
def test_splits_partition_videos(n, seed):
    ids = [f"v{k:03d}" for k in range(n)]
    ratios = {"train": 0.7, "validation": 0.15, "holdout_test": 0.15}
    split = split_videos(ids, ratios, seed)
    assert sorted(split) == ids
    assert set(split.values()) <= set(ratios)
    counts = {s: sum(v == s for v in split.values()) for s in ratios}
    for s, r in ratios.items():
        assert abs(counts[s] - r * n) < 1
    assert split == split_videos(ids[::-1], ratios, seed)


def test_split_manifest_round_trip(tmp_path):
    split = split_videos([f"v{k}" for k in range(9)], {"train": 2, "external_test": 1}, 4)
    path = tmp_path / "splits.csv"
    path.write_text(dataio.format_splits(split))
    assert dataio.load_splits(path) == split
    path.write_text("video_id,split\nv1,train\nv1,validation\n")
    with pytest.raises(DataError, match="line 3"):
        dataio.load_splits(path)
    with pytest.raises(DataError):
        split_videos(["a"], {"tests": 1.0})


def test_annotations_round_trip(tmp_path):
    ann = {"a": PhaseAnnotation(((0, 0.0), (3, 12.5))), "b": PhaseAnnotation(((1, 0.0),))}
    path = tmp_path / "ann.csv"
    path.write_text(dataio.format_annotations(ann))
    assert dataio.load_annotations(path) == ann


def test_dataset_round_trip(tmp_path, small_dataset):
    dataio.save_dataset(small_dataset, tmp_path / "d")
    back = dataio.load_dataset(tmp_path / "d", require_features=True)
    assert back.records == small_dataset.records
    assert back.splits == small_dataset.splits
    assert back.annotations == small_dataset.annotations
    assert back.feature_dim == small_dataset.feature_dim
    for a, b in zip(back.records, small_dataset.records):
        assert a.features.tobytes() == b.features.tobytes()
    # rewriting a loaded dataset reproduces identical bytes
    dataio.save_dataset(back, tmp_path / "e")
    for name in ("frames.csv", "features.phft", "annotations.csv", "splits.csv"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()


def test_missing_feature_store_names_path(tmp_path, small_dataset):
    dataio.save_dataset(small_dataset, tmp_path / "d")
    (tmp_path / "d" / "features.phft").unlink()
    with pytest.raises(DataError, match="features.phft"):
        dataio.load_dataset(tmp_path / "d", require_features=True)
