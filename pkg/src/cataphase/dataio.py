"""Dataset preparation rules and on-disk formats.

Frames are extracted at a fixed rate, a share of tool-free frames is dropped,
phase transitions (timestamps) become per-frame labels, and videos are split
into train / validation / test sets as whole units.

Formats written here:

* frame table: CSV ``video_id,frame_index,time_s,tool_00..tool_20,phase_id``
* feature store: binary ``PHFT`` file of float32 vectors keyed by
  ``(video_id, frame_index)``
* annotations: CSV ``video_id,phase_id,start_time_s``
* split manifest: CSV ``video_id,split``
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import atomic_write_bytes

N_TOOLS = 21
N_PHASES = 14
EXTRACTION_FPS = 3.0

TOOL_NAMES = (
    "biomarker",
    "charleux_cannula",
    "hydrodissection_cannula",
    "rycroft_cannula",
    "viscoelastic_cannula",
    "cotton",
    "capsulorhexis_cystotome",
    "bonn_forceps",
    "capsulorhexis_forceps",
    "troutman_forceps",
    "needle_holder",
    "irrigation_aspiration_handpiece",
    "phacoemulsifier_handpiece",
    "vitrectomy_handpiece",
    "implant_injector",
    "primary_incision_knife",
    "secondary_incision_knife",
    "micromanipulator",
    "suture_needle",
    "mendez_ring",
    "vannas_scissors",
)

PHASE_NAMES = (
    "ACC: sideport incision",
    "ACC: mainport incision",
    "ICL: inject viscoelastic",
    "ICL: removal of lens",
    "PE: inject viscoelastic",
    "PE: capsulorhexis",
    "PE: hydrodissection of lens",
    "PE: phacoemulsification",
    "PE: removal of soft lens matter",
    "IIL: inject viscoelastic",
    "IIL: intraocular lens insertion",
    "IIL: aspiration of viscoelastic",
    "IIL: wound closure",
    "IIL: wound closure with suture",
)

SPLITS = ("train", "validation", "holdout_test", "external_test")

FRAME_COLUMNS = ["video_id", "frame_index", "time_s"] + [f"tool_{c:02d}" for c in range(N_TOOLS)] + ["phase_id"]

FEATURE_MAGIC = b"PHFT"
FEATURE_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    fps: float = 30.0
    duration_s: float = 0.0

    def __post_init__(self):
        if not self.fps > 0:
            raise DataError(f"video {self.video_id}: fps must be positive, got {self.fps}")
        if self.duration_s < 0:
            raise DataError(f"video {self.video_id}: negative duration {self.duration_s}")


@dataclass(frozen=True)
class PhaseAnnotation:
    """Ordered ``(phase_id, start_time_s)`` transitions of one video."""

    transitions: tuple

    def __post_init__(self):
        trans = tuple((int(p), float(t)) for p, t in self.transitions)
        object.__setattr__(self, "transitions", trans)
        if not trans:
            raise DataError("a phase annotation needs at least one transition")
        for p, _ in trans:
            if not 0 <= p < N_PHASES:
                raise DataError(f"phase id {p} outside [0, {N_PHASES})")
        for (_, a), (_, b) in zip(trans, trans[1:]):
            if not b > a:
                raise DataError(f"transition times must be strictly increasing ({a} then {b})")

    @property
    def phases(self):
        return [p for p, _ in self.transitions]

    @property
    def starts(self):
        return [t for _, t in self.transitions]


@dataclass
class FrameRecord:
    video_id: str
    frame_index: int
    time_s: float
    tools: tuple
    phase: int = None
    features: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.tools = tuple(int(b) for b in self.tools)
        if len(self.tools) != N_TOOLS:
            raise DataError(f"tool vector must have {N_TOOLS} entries, got {len(self.tools)}")
        if any(b not in (0, 1) for b in self.tools):
            raise DataError("tool vector entries must be 0 or 1")
        if self.phase is not None and not 0 <= self.phase < N_PHASES:
            raise DataError(f"phase id {self.phase} outside [0, {N_PHASES})")

    @property
    def has_tools(self):
        return any(self.tools)


def extract_frame_times(meta: VideoMeta, extraction_fps=EXTRACTION_FPS):
    """``(frame_index, time_s)`` for frames sampled at ``extraction_fps``."""
    if not extraction_fps > 0 or extraction_fps > meta.fps:
        raise DataError(
            f"extraction rate {extraction_fps} fps must be positive and at most the source rate {meta.fps}"
        )
    n = max(int(math.ceil(meta.duration_s * extraction_fps)), 0)
    while n > 0 and (n - 1) / extraction_fps >= meta.duration_s:
        n -= 1
    while n / extraction_fps < meta.duration_s:
        n += 1
    return [(k, k / extraction_fps) for k in range(n)]


def discard_no_tool_frames(records, fraction=0.5, seed=0):
    """Drop ``ceil(fraction * m)`` of the ``m`` tool-free frames at random.

    Frames showing any tool are always kept and temporal order is preserved.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    empty = [i for i, r in enumerate(records) if not r.has_tools]
    n_drop = math.ceil(fraction * len(empty))
    drop = set()
    if n_drop:
        chosen = rng.choice(len(empty), size=n_drop, replace=False)
        drop = {empty[j] for j in chosen}
    return [r for i, r in enumerate(records) if i not in drop]


def annotate_phases(records, annotation: PhaseAnnotation):
    """Label each frame with the latest transition at or before its time."""
    starts = np.asarray(annotation.starts)
    phases = annotation.phases
    out = []
    for r in records:
        k = int(np.searchsorted(starts, r.time_s, side="right")) - 1
        if k < 0:
            raise DataError(
                f"frame {r.video_id}:{r.frame_index} at t={r.time_s!r} s precedes the first "
                f"annotated transition at t={starts[0]!r} s"
            )
        out.append(FrameRecord(r.video_id, r.frame_index, r.time_s, r.tools, phases[k], r.features))
    return out


def phase_transitions(records):
    """Collapse a per-frame label sequence back into ``(phase, time)`` transitions."""
    out = []
    for r in records:
        if not out or out[-1][0] != r.phase:
            out.append((r.phase, r.time_s))
    return out


# frame table

def format_frame_table(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRAME_COLUMNS)
    for r in sorted(records, key=lambda r: (r.video_id, r.frame_index)):
        w.writerow(
            [r.video_id, r.frame_index, repr(float(r.time_s))]
            + list(r.tools)
            + ["" if r.phase is None else r.phase]
        )
    return buf.getvalue()


def save_frame_table(records, path):
    atomic_write_bytes(path, format_frame_table(records).encode("utf-8"))


def parse_frame_table(text: str, source="<frame table>"):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{source}: empty file, expected a header row") from None
    n_tools = sum(1 for h in header if h.startswith("tool_"))
    if n_tools != N_TOOLS:
        raise DataError(f"{source}: line 1: found {n_tools} tool columns, expected {N_TOOLS}")
    if header != FRAME_COLUMNS:
        raise DataError(f"{source}: line 1: header does not match {','.join(FRAME_COLUMNS)}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(FRAME_COLUMNS):
            raise DataError(
                f"{source}: line {lineno}: {len(row)} columns, expected {len(FRAME_COLUMNS)}"
            )
        try:
            frame_index = int(row[1])
            time_s = float(row[2])
        except ValueError:
            raise DataError(f"{source}: line {lineno}: bad frame_index or time_s") from None
        tool_cells = row[3:3 + N_TOOLS]
        for c, cell in enumerate(tool_cells):
            if cell not in ("0", "1"):
                raise DataError(f"{source}: line {lineno}: tool_{c:02d} is {cell!r}, expected 0 or 1")
        phase_cell = row[-1]
        phase = None
        if phase_cell != "":
            try:
                phase = int(phase_cell)
            except ValueError:
                raise DataError(f"{source}: line {lineno}: phase_id {phase_cell!r} is not an integer") from None
            if not 0 <= phase < N_PHASES:
                raise DataError(f"{source}: line {lineno}: phase_id {phase} outside [0, {N_PHASES})")
        records.append(FrameRecord(row[0], frame_index, time_s, tuple(int(c) for c in tool_cells), phase))
    return records


def load_frame_table(path):
    path = Path(path)
    return parse_frame_table(path.read_text(encoding="utf-8"), source=str(path))


# feature store

def encode_feature_store(features: dict, dim=None) -> bytes:
    """``features`` maps ``(video_id, frame_index)`` to a vector; stored as float32."""
    if dim is None:
        dims = {np.size(v) for v in features.values()}
        if len(dims) > 1:
            raise DataError(f"feature vectors have differing dimensions {sorted(dims)}")
        dim = dims.pop() if dims else 0
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, dim)]
    for (video_id, frame_index), vec in sorted(features.items()):
        vec = np.asarray(vec)
        if vec.shape != (dim,):
            raise DataError(f"feature vector for {video_id}:{frame_index} has shape {vec.shape}, expected ({dim},)")
        vb = video_id.encode("utf-8")
        parts.append(struct.pack("<H", len(vb)))
        parts.append(vb)
        parts.append(struct.pack("<I", frame_index))
        parts.append(vec.astype("<f4").tobytes())
    return b"".join(parts)


def decode_feature_store(data: bytes, source="<feature store>"):
    if len(data) < 12 or data[:4] != FEATURE_MAGIC:
        raise DataError(f"{source}: offset 0: missing PHFT header")
    version, dim = struct.unpack_from("<II", data, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"{source}: offset 4: unsupported version {version}")
    out = {}
    pos = 12
    rec_tail = 4 + 4 * dim
    while pos < len(data):
        start = pos
        if pos + 2 > len(data):
            raise DataError(f"{source}: offset {start}: truncated record header")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + rec_tail > len(data):
            raise DataError(f"{source}: offset {start}: truncated record")
        video_id = data[pos:pos + n].decode("utf-8")
        pos += n
        (frame_index,) = struct.unpack_from("<I", data, pos)
        pos += 4
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        out[(video_id, frame_index)] = vec
    return out, dim


def save_feature_store(features, path, dim=None):
    atomic_write_bytes(path, encode_feature_store(features, dim))


def load_feature_store(path):
    path = Path(path)
    store, _ = decode_feature_store(path.read_bytes(), source=str(path))
    return store


def feature_store_dim(path):
    return decode_feature_store(Path(path).read_bytes(), source=str(path))[1]


# annotations and splits

def format_annotations(annotations: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "phase_id", "start_time_s"])
    for vid in sorted(annotations):
        for p, t in annotations[vid].transitions:
            w.writerow([vid, p, repr(float(t))])
    return buf.getvalue()


def load_annotations(path):
    path = Path(path)
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["video_id", "phase_id", "start_time_s"]:
            raise DataError(f"{path}: line 1: expected header video_id,phase_id,start_time_s")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path}: line {lineno}: {len(row)} columns, expected 3")
            try:
                rows.setdefault(row[0], []).append((int(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{path}: line {lineno}: bad phase_id or start_time_s") from None
    try:
        return {vid: PhaseAnnotation(tuple(tr)) for vid, tr in rows.items()}
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def split_videos(video_ids, ratios, seed=0):
    """Assign whole videos to splits in proportion to ``ratios``.

    Counts use largest-remainder rounding; the assignment is a seeded shuffle.
    """
    video_ids = sorted(video_ids)
    names = [s for s in SPLITS if ratios.get(s, 0) > 0]
    unknown = set(ratios) - set(SPLITS)
    if unknown:
        raise DataError(f"unknown split names {sorted(unknown)}")
    weights = np.array([ratios[s] for s in names], dtype=float)
    if weights.size == 0 or np.any(weights < 0):
        raise DataError("split ratios must be non-negative with at least one positive")
    exact = weights / weights.sum() * len(video_ids)
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for j in order[: len(video_ids) - counts.sum()]:
        counts[j] += 1
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(len(video_ids))
    out = {}
    pos = 0
    for name, n in zip(names, counts):
        for j in perm[pos:pos + n]:
            out[video_ids[j]] = name
        pos += n
    return dict(sorted(out.items()))


def format_splits(splits: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "split"])
    for vid in sorted(splits):
        w.writerow([vid, splits[vid]])
    return buf.getvalue()


def load_splits(path):
    path = Path(path)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["video_id", "split"]:
            raise DataError(f"{path}: line 1: expected header video_id,split")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[1] not in SPLITS:
                raise DataError(f"{path}: line {lineno}: expected video_id and one of {', '.join(SPLITS)}")
            if row[0] in out:
                raise DataError(f"{path}: line {lineno}: video {row[0]} listed twice")
            out[row[0]] = row[1]
    return out


# whole datasets

FRAMES_FILE = "frames.csv"
FEATURES_FILE = "features.phft"
ANNOTATIONS_FILE = "annotations.csv"
SPLITS_FILE = "splits.csv"


@dataclass
class Dataset:
    records: list
    splits: dict = field(default_factory=dict)
    annotations: dict = field(default_factory=dict)
    feature_dim: int = 0

    def videos(self, split=None):
        """Records grouped per video (sorted by frame index), optionally for one split."""
        grouped = {}
        for r in self.records:
            if split is None or self.splits.get(r.video_id) == split:
                grouped.setdefault(r.video_id, []).append(r)
        return {vid: sorted(rs, key=lambda r: r.frame_index) for vid, rs in sorted(grouped.items())}

    def split_records(self, split):
        return [r for rs in self.videos(split).values() for r in rs]

    @property
    def has_features(self):
        return bool(self.records) and all(r.features is not None for r in self.records)


def save_dataset(dataset: Dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_frame_table(dataset.records, directory / FRAMES_FILE)
    if dataset.feature_dim:
        store = {(r.video_id, r.frame_index): r.features for r in dataset.records if r.features is not None}
        save_feature_store(store, directory / FEATURES_FILE, dataset.feature_dim)
    atomic_write_bytes(directory / ANNOTATIONS_FILE, format_annotations(dataset.annotations).encode())
    atomic_write_bytes(directory / SPLITS_FILE, format_splits(dataset.splits).encode())


def load_dataset(directory, require_features=False):
    directory = Path(directory)
    frames = directory / FRAMES_FILE
    if not frames.exists():
        raise DataError(f"frame table not found: {frames}")
    records = load_frame_table(frames)
    feature_dim = 0
    fpath = directory / FEATURES_FILE
    if fpath.exists():
        store, feature_dim = decode_feature_store(fpath.read_bytes(), source=str(fpath))
        for r in records:
            r.features = store.get((r.video_id, r.frame_index))
    elif require_features:
        raise DataError(f"feature store not found: {fpath}")
    splits = load_splits(directory / SPLITS_FILE) if (directory / SPLITS_FILE).exists() else {}
    annotations = load_annotations(directory / ANNOTATIONS_FILE) if (directory / ANNOTATIONS_FILE).exists() else {}
    return Dataset(records, splits, annotations, feature_dim)
