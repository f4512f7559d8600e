"""Synthetic cataract-surgery workflows with known ground truth.

A video is a walk over the 14 phases driven by a row-stochastic transition
matrix, with a uniform duration per visited phase. Every extracted frame gets
a tool-presence vector drawn from the phase's Bernoulli emission row and then
bit-flipped with probability ``noise``; feature vectors are a phase template
plus the templates of the present tools plus Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    EXTRACTION_FPS,
    N_PHASES,
    N_TOOLS,
    TOOL_NAMES,
    DataError,
    Dataset,
    FrameRecord,
    PhaseAnnotation,
    VideoMeta,
    annotate_phases,
    extract_frame_times,
    split_videos,
)

SOURCE_FPS = 30.0
MAX_PHASE_VISITS = 1000

# characteristic instruments per phase, by name
PHASE_TOOLS = (
    ("secondary_incision_knife",),
    ("primary_incision_knife", "bonn_forceps"),
    ("viscoelastic_cannula", "mendez_ring"),
    ("troutman_forceps", "vitrectomy_handpiece"),
    ("viscoelastic_cannula", "cotton"),
    ("capsulorhexis_cystotome", "capsulorhexis_forceps"),
    ("hydrodissection_cannula",),
    ("phacoemulsifier_handpiece", "micromanipulator"),
    ("irrigation_aspiration_handpiece",),
    ("viscoelastic_cannula", "biomarker"),
    ("implant_injector",),
    ("irrigation_aspiration_handpiece", "charleux_cannula"),
    ("rycroft_cannula",),
    ("needle_holder", "suture_needle", "vannas_scissors"),
)


@dataclass
class WorkflowModel:
    transition: np.ndarray  # (14, 14), row-stochastic; a row with T[p, p] == 1 ends the video
    durations: np.ndarray  # (14, 2) uniform (min_s, max_s) per phase
    emission: np.ndarray  # (14, 21) Bernoulli tool probabilities
    noise: float = 0.05
    feature_dim: int = 32
    feature_noise: float = 0.1
    feature_scale: float = 1.0  # overall magnitude; SNR does not depend on it
    phase_templates: np.ndarray = None  # (14, D)
    tool_templates: np.ndarray = None  # (21, D)
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.durations = np.asarray(self.durations, dtype=float)
        self.emission = np.asarray(self.emission, dtype=float)
        n = self.transition.shape[0]
        if self.transition.shape != (n, n) or self.emission.shape[0] != n or self.durations.shape != (n, 2):
            raise ValueError("transition, emission and duration tables disagree on the phase count")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        if np.any((self.emission < 0) | (self.emission > 1)):
            raise ValueError("emission probabilities must lie in [0, 1]")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise rate must lie in [0, 1]")
        if not self.feature_scale > 0:
            raise ValueError("feature scale must be positive")
        if np.any(self.durations[:, 0] <= 0) or np.any(self.durations[:, 1] < self.durations[:, 0]):
            raise ValueError("phase durations need 0 < min_s <= max_s")
        if self.phase_templates is None or self.tool_templates is None:
            self.phase_templates, self.tool_templates = make_templates(
                n, self.emission.shape[1], self.feature_dim, self.seed
            )
        self.phase_templates = np.asarray(self.phase_templates, dtype=float)
        self.tool_templates = np.asarray(self.tool_templates, dtype=float)

    @property
    def n_phases(self):
        return self.transition.shape[0]

    @property
    def n_tools(self):
        return self.emission.shape[1]

    def effective_emission(self):
        """Per-bit probability of reading 1 after the noisy flip."""
        return self.emission * (1.0 - self.noise) + (1.0 - self.emission) * self.noise

    def is_terminal(self, phase):
        return self.transition[phase, phase] == 1.0

    def to_dict(self):
        return {
            "transition": self.transition.tolist(),
            "durations": self.durations.tolist(),
            "emission": self.emission.tolist(),
            "noise": self.noise,
            "feature_dim": self.feature_dim,
            "feature_noise": self.feature_noise,
            "feature_scale": self.feature_scale,
            "phase_templates": self.phase_templates.tolist(),
            "tool_templates": self.tool_templates.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_templates(n_phases, n_tools, dim, seed, phase_scale=0.5):
    """Unit tool directions (orthonormal when ``dim >= n_tools``) and small phase offsets."""
    rng = np.random.default_rng([seed, 7])
    if dim <= 0:
        return np.zeros((n_phases, 0)), np.zeros((n_tools, 0))
    g = rng.normal(size=(dim, max(n_tools, 1)))
    if dim >= n_tools:
        q, _ = np.linalg.qr(g)
        tools = q[:, :n_tools].T
    else:
        tools = g[:, :n_tools].T
        tools /= np.linalg.norm(tools, axis=1, keepdims=True)
    phases = rng.normal(scale=phase_scale / np.sqrt(dim), size=(n_phases, dim))
    return phases, tools


def default_model(noise=0.05, feature_dim=32, skip_prob=0.1, tool_prob=0.9, background_prob=0.02,
                  durations=(15.0, 45.0), feature_scale=1.0, seed=0):
    """Mostly linear 14-phase workflow; each phase shows 1-3 characteristic tools."""
    T = np.zeros((N_PHASES, N_PHASES))
    for p in range(N_PHASES - 1):
        if p + 2 < N_PHASES:
            T[p, p + 1] = 1.0 - skip_prob
            T[p, p + 2] = skip_prob
        else:
            T[p, p + 1] = 1.0
    T[-1, -1] = 1.0
    E = np.full((N_PHASES, N_TOOLS), background_prob)
    for p, names in enumerate(PHASE_TOOLS):
        for name in names:
            E[p, TOOL_NAMES.index(name)] = tool_prob
    D = np.tile(np.asarray(durations, dtype=float), (N_PHASES, 1))
    return WorkflowModel(T, D, E, noise=noise, feature_dim=feature_dim, feature_scale=feature_scale, seed=seed)


@dataclass
class SyntheticVideo:
    meta: VideoMeta
    annotation: PhaseAnnotation
    records: list


def _walk(model, rng):
    phase = 0
    path = [phase]
    while not model.is_terminal(phase):
        phase = int(rng.choice(model.n_phases, p=model.transition[phase]))
        path.append(phase)
        if len(path) > MAX_PHASE_VISITS:
            raise DataError("workflow walk did not reach a terminal phase")
    return path


def generate_video(model, video_id, rng, duration_range_s=None, extraction_fps=EXTRACTION_FPS,
                   with_features=True):
    path = _walk(model, rng)
    lengths = np.array([rng.uniform(*model.durations[p]) for p in path])
    if duration_range_s is not None:
        lengths *= rng.uniform(*duration_range_s) / lengths.sum()
    starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    duration = float(lengths.sum())
    meta = VideoMeta(video_id, SOURCE_FPS, duration)
    annotation = PhaseAnnotation(tuple((p, float(t)) for p, t in zip(path, starts)))
    times = extract_frame_times(meta, extraction_fps)
    blank = (0,) * model.n_tools
    records = annotate_phases([FrameRecord(video_id, k, t, blank) for k, t in times], annotation)
    phases = np.array([r.phase for r in records])
    bits = rng.random((len(records), model.n_tools)) < model.emission[phases]
    flips = rng.random(bits.shape) < model.noise
    bits = (bits ^ flips).astype(np.int64)
    feats = None
    if with_features and model.feature_dim > 0:
        feats = model.phase_templates[phases] + bits @ model.tool_templates
        feats = model.feature_scale * (feats + rng.normal(scale=model.feature_noise, size=feats.shape))
        # the feature store keeps float32; round now so round-trips are exact
        feats = feats.astype(np.float32).astype(np.float64)
    out = []
    for j, r in enumerate(records):
        out.append(FrameRecord(video_id, r.frame_index, r.time_s, tuple(bits[j]), r.phase,
                               None if feats is None else feats[j]))
    return SyntheticVideo(meta, annotation, out)


def generate(model, n_videos, duration_range_s=None, seed=0, extraction_fps=EXTRACTION_FPS,
             with_features=True, id_prefix="sim"):
    """Generate ``n_videos`` videos; video ``k`` draws from the stream ``(seed, k)``."""
    if n_videos < 1:
        raise ValueError("n_videos must be at least 1")
    if duration_range_s is not None:
        lo, hi = duration_range_s
        if not (0 < lo <= hi):
            raise DataError(f"impossible duration range {duration_range_s}: need 0 < low <= high")
        if lo * extraction_fps < 1:
            raise DataError(f"duration range {duration_range_s} yields videos shorter than one frame")
    width = max(3, len(str(n_videos - 1)))
    return [
        generate_video(model, f"{id_prefix}{k:0{width}d}", np.random.default_rng([seed, k]),
                       duration_range_s, extraction_fps, with_features)
        for k in range(n_videos)
    ]


def to_dataset(videos, split_ratios=None, seed=0):
    records = [r for v in videos for r in v.records]
    ids = [v.meta.video_id for v in videos]
    if split_ratios is None:
        split_ratios = {"train": 0.7, "validation": 0.15, "holdout_test": 0.15}
    splits = split_videos(ids, split_ratios, seed)
    annotations = {v.meta.video_id: v.annotation for v in videos}
    dim = 0
    if records and records[0].features is not None:
        dim = int(records[0].features.size)
    return Dataset(records, splits, annotations, dim)


def map_phases(model, tools):
    """Frame-wise maximum-a-posteriori phase under a uniform prior (ties: lowest id)."""
    q = np.clip(model.effective_emission(), 1e-300, 1.0)
    log1 = np.log(q)
    log0 = np.log(np.clip(1.0 - q, 1e-300, 1.0))
    b = np.asarray(tools, dtype=float)
    ll = b @ log1.T + (1.0 - b) @ log0.T
    # exact ties can differ by summation roundoff; treat those as ties
    best = ll.max(axis=1, keepdims=True)
    return np.argmax(ll >= best - 1e-9 * np.maximum(1.0, np.abs(best)), axis=1)


def bayes_accuracy(model, records):
    """Per-frame accuracy of :func:`map_phases` against the true labels."""
    if isinstance(records, Dataset):
        records = records.records
    elif records and isinstance(records[0], SyntheticVideo):
        records = [r for v in records for r in v.records]
    if not records:
        raise ValueError("no frames to score")
    tools = np.array([r.tools for r in records])
    gold = np.array([r.phase for r in records])
    return float(np.mean(map_phases(model, tools) == gold))
