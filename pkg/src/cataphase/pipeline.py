"""Training and inference orchestration.

* :func:`train_tool_head` fits the 21-way sigmoid head on per-frame features
  (standing in for the CNN's output layer) with momentum SGD.
* :func:`train_phase_model` fits an LSTM / GRU on windows of tool bits or
  features with Adam and per-step softmax cross-entropy.
* :func:`infer_phases` classifies windows independently and averages the
  per-frame probabilities where windows overlap.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import archive
from .dataio import N_PHASES, N_TOOLS, DataError
from .losses import one_hot, sigmoid_ce, softmax_ce
from .metrics import MetricsReport
from .numerics import DTYPE, DenseLayer, dense_backward, dense_forward, seeded_gaussian, sigmoid, softmax, substream
from .optim import make_optimizer
from .recurrent import RecurrentModel, backward_sequence, clip_grad_norm, forward_sequence, init_model


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


DEFAULT_OPTIMIZERS = {
    "phase": {"kind": "adam", "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "tools": {"kind": "sgd", "lr": 1e-4, "momentum": 0.9},
}
DEFAULT_HIDDEN = {"lstm": (256,), "gru": (128, 128)}

# JSON section -> dataclass fields
SECTIONS = {
    "model": {"kind": "model", "hidden_sizes": "hidden_sizes", "per_step": "per_step",
              "forget_bias": "forget_bias"},
    "input": {"kind": "input_kind", "dim": "input_dim"},
    "window": {"length": "window_length", "stride": "window_stride", "train_stride": "train_stride",
               "overlap_vote": "overlap_vote"},
    "training": {"epochs": "epochs", "batch_size": "batch_size", "iterations": "iterations",
                 "clip_norm": "clip_norm", "init_std": "init_std", "threshold": "threshold"},
}


@dataclass
class RunConfig:
    task: str = "phase"
    model: str = "lstm"
    input_kind: str = "binary"
    input_dim: int = N_TOOLS
    hidden_sizes: tuple = None
    per_step: bool = True
    forget_bias: float = 1.0
    window_length: int = 100
    window_stride: int = None
    train_stride: int = None
    overlap_vote: str = "mean_prob"
    optimizer: dict = None
    epochs: int = 4
    batch_size: int = 8
    iterations: int = 10_000
    clip_norm: float = 5.0
    init_std: float = 0.01
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("phase", "tools"):
            raise ValueError(f"task must be 'phase' or 'tools', got {self.task!r}")
        if self.model not in DEFAULT_HIDDEN:
            raise ValueError(f"model must be 'lstm' or 'gru', got {self.model!r}")
        if self.input_kind not in ("binary", "features"):
            raise ValueError(f"input kind must be 'binary' or 'features', got {self.input_kind!r}")
        if self.task == "tools":
            self.input_kind = "features"
        if self.input_kind == "binary" and self.input_dim != N_TOOLS:
            raise ValueError(f"binary inputs have dimension {N_TOOLS}, config says {self.input_dim}")
        if self.hidden_sizes is None:
            self.hidden_sizes = DEFAULT_HIDDEN[self.model]
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.window_stride is None:
            self.window_stride = self.window_length
        if self.train_stride is None:
            self.train_stride = self.window_length
        if self.window_length < 1:
            raise ValueError("window length must be at least 1")
        for name in ("window_stride", "train_stride"):
            s = getattr(self, name)
            if not 1 <= s <= self.window_length:
                raise ValueError(f"{name} must lie in [1, {self.window_length}], got {s}")
        if self.overlap_vote != "mean_prob":
            raise ValueError(f"unsupported overlap vote rule {self.overlap_vote!r}")
        opt = dict(DEFAULT_OPTIMIZERS[self.task])
        if self.optimizer:
            if self.optimizer.get("kind", opt["kind"]) != opt["kind"]:
                opt = {"kind": self.optimizer["kind"]}
            opt.update(self.optimizer)
        self.optimizer = opt
        if self.batch_size < 1 or self.epochs < 0 or self.iterations < 0:
            raise ValueError("batch size must be >= 1 and epochs / iterations >= 0")

    def to_dict(self):
        flat = asdict(self)
        flat["hidden_sizes"] = list(self.hidden_sizes)
        out = {"task": flat.pop("task"), "seed": flat.pop("seed"), "optimizer": flat.pop("optimizer")}
        for section, keys in SECTIONS.items():
            out[section] = {k: flat.pop(f) for k, f in keys.items()}
        out["conventions"] = {
            "phase_loss": "softmax cross-entropy summed over timesteps, divided by the number of windows",
            "initial_state": "zeros for every window",
            "gru_update": "h = (1 - z) * h_prev + z * candidate",
            "tie_break": "lowest phase id",
            "random_streams": "numpy SeedSequence(seed, crc32(name)) for names init, shuffle",
        }
        assert not flat, flat
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("conventions", None)
        kwargs = {}
        for section, keys in SECTIONS.items():
            sub = d.pop(section, {}) or {}
            unknown = set(sub) - set(keys)
            if unknown:
                raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
            for k, v in sub.items():
                kwargs[keys[k]] = v
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class SequenceWindow:
    inputs: np.ndarray  # (T, D)
    labels: np.ndarray  # (T,), -1 when unknown
    video_id: str
    start: int


@dataclass
class ToolHead:
    layer: DenseLayer

    def scores(self, features):
        return sigmoid(dense_forward(self.layer, features))

    @property
    def params(self):
        return {"head.W": self.layer.weights, "head.b": self.layer.bias}


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, iteration, loss, val_accuracy=None):
        self.rows.append({"epoch": epoch, "iteration": iteration, "loss": loss, "val_accuracy": val_accuracy})

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "iteration", "loss", "val_accuracy"])
        for r in self.rows:
            va = r["val_accuracy"]
            w.writerow([r["epoch"], r["iteration"], repr(r["loss"]), "" if va is None else repr(va)])
        return buf.getvalue()

    def losses(self):
        return [r["loss"] for r in self.rows]


# inputs and windows

def frame_inputs(records, input_kind):
    """Stack per-frame model inputs: tool bits or feature vectors."""
    if input_kind == "binary":
        return np.array([r.tools for r in records], dtype=DTYPE).reshape(len(records), N_TOOLS)
    missing = [f"{r.video_id}:{r.frame_index}" for r in records if r.features is None]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise DataError(f"{len(missing)} frames have no feature vector: {shown}")
    dims = {r.features.size for r in records}
    if len(dims) > 1:
        raise DataError(f"feature vectors have inconsistent dimensions {sorted(dims)}")
    return np.stack([r.features for r in records]).astype(DTYPE)


def window_bounds(n, length, stride):
    """``[start, end)`` pairs; starts step by ``stride`` and the last window ends at ``n``."""
    if n < 1:
        raise ValueError("cannot window an empty video")
    if length < 1 or not 1 <= stride <= length:
        raise ValueError(f"need length >= 1 and 1 <= stride <= length (got {length}, {stride})")
    out = []
    start = 0
    while True:
        end = min(start + length, n)
        out.append((start, end))
        if end == n:
            return out
        start += stride


def make_windows(records, length=100, stride=None, input_kind="binary"):
    if not records:
        raise ValueError("cannot window an empty video")
    stride = length if stride is None else stride
    X = frame_inputs(records, input_kind)
    y = np.array([-1 if r.phase is None else r.phase for r in records], dtype=np.int64)
    vid = records[0].video_id
    return [
        SequenceWindow(X[a:b], y[a:b], vid, records[a].frame_index)
        for a, b in window_bounds(len(records), length, stride)
    ]


def _batch(windows, dim):
    T = max(len(w.labels) for w in windows)
    X = np.zeros((len(windows), T, dim), dtype=DTYPE)
    y = np.full((len(windows), T), -1, dtype=np.int64)
    for i, w in enumerate(windows):
        X[i, : len(w.labels)] = w.inputs
        y[i, : len(w.labels)] = w.labels
    return X, y


def sequence_loss(model, X, y, per_step=True):
    """Window-batch loss and parameter gradients.

    Per-step mode sums the cross-entropy over the labelled timesteps of each
    window and divides by the number of windows; padded steps (label -1)
    contribute nothing. Final-step mode uses each window's last label.
    """
    logits, cache = forward_sequence(model, X, per_step)
    B = X.shape[0]
    G = np.zeros_like(logits)
    if per_step:
        mask = y >= 0
        n_valid = int(mask.sum())
        loss, g = softmax_ce(one_hot(y[mask], model.n_classes), logits[mask])
        loss *= n_valid / B
        G[mask] = g * (n_valid / B)
    else:
        last = np.array([row[row >= 0][-1] for row in y])
        loss, G = softmax_ce(one_hot(last, model.n_classes), logits)
    grads = backward_sequence(model, cache, G)
    return loss, grads


# phase models

def _phase_windows(videos, config, stride):
    windows = []
    for vid, recs in sorted(videos.items()):
        if any(r.phase is None for r in recs):
            raise DataError(f"video {vid} has frames without a phase label")
        windows.extend(make_windows(recs, config.window_length, stride, config.input_kind))
    dims = {w.inputs.shape[1] for w in windows}
    if dims != {config.input_dim}:
        raise DataError(f"input dimension {sorted(dims)} does not match configured {config.input_dim}")
    return windows


def new_phase_model(config):
    return init_model(config.model, config.input_dim, config.hidden_sizes, N_PHASES,
                      substream(config.seed, "init"), config.forget_bias)


def train_phase_model(videos, config: RunConfig, validation=None, model=None, optimizer=None):
    """Fit a phase classifier.

    ``videos`` and ``validation`` map video id to its frame records. Windows
    are reshuffled every epoch from the ``shuffle`` stream. Returns
    ``(model, log, optimizer)``; the log has one row per epoch.
    """
    if not videos:
        raise DataError("no training videos")
    windows = _phase_windows(videos, config, config.train_stride)
    model = model or new_phase_model(config)
    opt = optimizer or make_optimizer(**config.optimizer)
    rng = substream(config.seed, "shuffle")
    log = TrainingLog()
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(windows))
        losses = []
        for k in range(0, len(order), config.batch_size):
            X, y = _batch([windows[j] for j in order[k:k + config.batch_size]], config.input_dim)
            loss, grads = sequence_loss(model, X, y, config.per_step)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, iteration {iteration + 1}")
            grads, norm = clip_grad_norm(grads, config.clip_norm)
            if not math.isfinite(norm):
                raise NumericalError(f"non-finite gradient at epoch {epoch}, iteration {iteration + 1}")
            opt.step(model.params, grads)
            iteration += 1
            losses.append(loss)
        val = None
        if validation:
            val = phase_accuracy(model, validation, config)
        log.add(epoch, iteration, float(np.mean(losses)), val)
    return model, log, opt


def window_probabilities(model, window_inputs, per_step=True):
    logits, _ = forward_sequence(model, window_inputs, per_step)
    return softmax(logits, axis=-1)


def infer_phases(model, records, config: RunConfig, threads=1):
    """Per-frame phase ids for one video.

    Each window starts from a zero state. Overlapping windows contribute the
    mean of their per-frame probabilities; argmax ties go to the lower id.
    """
    if not records:
        raise ValueError("cannot run inference on an empty video")
    if not config.per_step:
        raise ValueError("per-frame inference needs a per-step model")
    X = frame_inputs(records, config.input_kind)
    if X.shape[1] != model.input_size:
        raise DataError(f"record inputs have dimension {X.shape[1]}, model expects {model.input_size}")
    bounds = window_bounds(len(records), config.window_length, config.window_stride)

    def run(ab):
        a, b = ab
        return window_probabilities(model, X[a:b])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            probs = list(pool.map(run, bounds))
    else:
        probs = [run(ab) for ab in bounds]
    total = np.zeros((len(records), model.n_classes), dtype=DTYPE)
    count = np.zeros(len(records), dtype=DTYPE)
    for (a, b), p in zip(bounds, probs):
        total[a:b] += p
        count[a:b] += 1
    return np.argmax(total / count[:, None], axis=1)


def phase_accuracy(model, videos, config):
    hits = n = 0
    for recs in videos.values():
        pred = infer_phases(model, recs, config)
        gold = np.array([r.phase for r in recs])
        hits += int(np.sum(pred == gold))
        n += len(recs)
    return hits / n if n else float("nan")


def predict_phases(model, videos, config, threads=1):
    """``(video_id, frame_index, gold, pred)`` rows for every frame."""
    rows = []
    for vid, recs in sorted(videos.items()):
        pred = infer_phases(model, recs, config, threads)
        for r, p in zip(recs, pred):
            rows.append((vid, r.frame_index, r.phase, int(p)))
    return rows


def format_predictions(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "frame_index", "gold_phase", "pred_phase"])
    for vid, k, g, p in rows:
        w.writerow([vid, k, "" if g is None else g, p])
    return buf.getvalue()


# tool head

def new_tool_head(input_dim, config):
    W = seeded_gaussian(N_TOOLS, input_dim, 0.0, config.init_std, substream(config.seed, "init"))
    return ToolHead(DenseLayer(W, np.zeros(N_TOOLS)))


def train_tool_head(records, config: RunConfig, head=None, optimizer=None):
    """Momentum-SGD fit of the sigmoid tool head; one log row per iteration."""
    X = frame_inputs(records, "features")
    Y = np.array([r.tools for r in records], dtype=DTYPE)
    if X.shape[1] != config.input_dim:
        raise DataError(f"features have dimension {X.shape[1]}, config says {config.input_dim}")
    head = head or new_tool_head(X.shape[1], config)
    opt = optimizer or make_optimizer(**config.optimizer)
    rng = substream(config.seed, "shuffle")
    log = TrainingLog()
    order = np.empty(0, dtype=np.int64)
    epoch = 0
    params = head.params
    for it in range(1, config.iterations + 1):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(records))])
            epoch += 1
        idx, order = order[: config.batch_size], order[config.batch_size:]
        logits = dense_forward(head.layer, X[idx])
        loss, g = sigmoid_ce(Y[idx], logits)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {it}")
        gW, gb, _ = dense_backward(head.layer, X[idx], g)
        opt.step(params, {"head.W": gW, "head.b": gb})
        log.add(epoch, it, loss)
    return head, log, opt


# evaluation

def evaluate_tools(head, records, threshold=0.5):
    if not records:
        raise DataError("no frames to evaluate")
    X = frame_inputs(records, "features")
    gold = np.array([r.tools for r in records])
    return MetricsReport.for_tools(gold, head.scores(X), threshold)


def evaluate_phases(model, videos, config, threads=1):
    """Report plus prediction rows for the given videos."""
    if not videos:
        raise DataError("no videos to evaluate")
    rows = predict_phases(model, videos, config, threads)
    gold = [g for _, _, g, _ in rows]
    if any(g is None for g in gold):
        raise DataError("evaluation frames must carry phase labels")
    return MetricsReport.for_phases(gold, [p for *_, p in rows]), rows


def evaluate_run(model_or_head, dataset, config, splits=None, threads=1):
    """One :class:`MetricsReport` per requested split (all non-empty splits by default)."""
    names = splits or [s for s in ("train", "validation", "holdout_test", "external_test")
                       if s in set(dataset.splits.values())]
    out = {}
    for split in names:
        videos = dataset.videos(split)
        if not videos:
            raise DataError(f"dataset has no videos in split {split!r}")
        if isinstance(model_or_head, ToolHead):
            out[split] = evaluate_tools(model_or_head, dataset.split_records(split), config.threshold)
        else:
            out[split] = evaluate_phases(model_or_head, videos, config, threads)[0]
    return out


def results_table(results):
    """Text grid of (accuracy, F1) percentages, rows ``(model, input)`` and split columns.

    ``results`` maps ``(model_name, input_kind)`` to ``{split: MetricsReport}``.
    """
    splits = []
    for per_split in results.values():
        for s in per_split:
            if s not in splits:
                splits.append(s)
    head = ["Model", "Input"] + [f"{s} {m}" for s in splits for m in ("Acc.", "F1")]
    lines = [" | ".join(head)]
    for (model_name, input_kind), per_split in results.items():
        cells = [model_name.upper(), input_kind]
        for s in splits:
            r = per_split.get(s)
            if r is None:
                cells += ["-", "-"]
            else:
                cells += [f"{100 * r.per_frame_accuracy:.2f}", f"{100 * r.macro_f1:.2f}"]
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


# checkpoints

def save_checkpoint(path, model_or_head, config: RunConfig, optimizer=None):
    if isinstance(model_or_head, ToolHead):
        tensors = dict(model_or_head.params)
        manifest = {"arch": "tool_head", "input_size": model_or_head.layer.in_dim,
                    "hidden_sizes": [], "head_size": N_TOOLS}
    else:
        tensors = dict(model_or_head.params)
        manifest = {"arch": model_or_head.arch, "input_size": model_or_head.input_size,
                    "hidden_sizes": list(model_or_head.hidden_sizes), "head_size": model_or_head.n_classes}
    manifest["seed"] = config.seed
    manifest["config"] = config.to_dict()
    if optimizer is not None:
        manifest["optimizer"] = optimizer.hyperparams()
        tensors.update(optimizer.state_tensors())
    archive.save(path, manifest, tensors)


def load_checkpoint(path):
    """Returns ``(model_or_head, config, optimizer_or_None)``."""
    manifest, tensors = archive.load(path)
    config = RunConfig.from_dict(manifest["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    if manifest["arch"] == "tool_head":
        obj = ToolHead(DenseLayer(params["head.W"], params["head.b"]))
        expected_arch = "tool_head" if config.task == "tools" else None
    else:
        obj = RecurrentModel(manifest["arch"], manifest["input_size"], tuple(manifest["hidden_sizes"]),
                             manifest["head_size"], params)
        expected_arch = config.model if config.task == "phase" else None
    if expected_arch != manifest["arch"]:
        raise DataError(
            f"checkpoint architecture {manifest['arch']!r} does not match its config "
            f"(task {config.task!r}, model {config.model!r})"
        )
    opt = None
    if "optimizer" in manifest:
        meta = dict(manifest["optimizer"])
        opt = make_optimizer(**meta)
        opt.load_state(meta, {k: v for k, v in tensors.items() if k.startswith("opt.")})
    return obj, config, opt
