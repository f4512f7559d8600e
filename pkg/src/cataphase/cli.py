"""Command-line entry point: ``cataphase {simulate,prepare,train,infer,eval}``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
failure. Every command writes into a temporary sibling directory and renames
it into place, so a failed or interrupted run leaves no partial output.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import signal
import sys
import tempfile
from pathlib import Path

from . import dataio, simgen
from .archive import ArchiveError, _umask, atomic_write_bytes
from .numerics import substream
from .pipeline import (
    NumericalError,
    RunConfig,
    ToolHead,
    evaluate_phases,
    evaluate_tools,
    format_predictions,
    load_checkpoint,
    predict_phases,
    save_checkpoint,
    train_phase_model,
    train_tool_head,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT_FILE = "checkpoint.phck"
CONFIG_FILE = "config.json"
LOG_FILE = "train_log.csv"

SIM_DEFAULTS = {
    "n_videos": 14,
    "duration_range_s": None,
    "extraction_fps": dataio.EXTRACTION_FPS,
    "with_features": True,
    "split_ratios": {"train": 0.7, "validation": 0.15, "holdout_test": 0.15},
    "workflow": {"noise": 0.05, "feature_dim": 32, "skip_prob": 0.1, "tool_prob": 0.9,
                 "background_prob": 0.02, "durations": [15.0, 45.0], "feature_scale": 1.0},
}


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise dataio.DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise dataio.DataError(f"{path}: invalid JSON: {exc}") from None


@contextlib.contextmanager
def staged_dir(target):
    """Yield a temp dir next to ``target``; on success it replaces ``target``."""
    target = Path(target)
    parent = target.parent if str(target.parent) else Path(".")
    try:
        parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=parent))
        tmp.chmod(0o777 & ~_umask())
    except OSError as exc:
        raise dataio.DataError(f"cannot write to {target}: {exc.strerror or exc}") from None
    try:
        yield tmp
        if target.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{target.name}.old.", dir=parent))
            os.replace(target, old / "prev")
            os.replace(tmp, target)
            shutil.rmtree(old)
        else:
            os.replace(tmp, target)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def resolve_sim_config(path=None):
    cfg = json.loads(json.dumps(SIM_DEFAULTS))
    if path:
        user = _read_json(path)
        unknown = set(user) - set(cfg) - {"workflow_model"}
        if unknown:
            raise dataio.DataError(f"unknown simulation config keys: {sorted(unknown)}")
        workflow = dict(cfg["workflow"])
        user_workflow = user.pop("workflow", {}) or {}
        unknown = set(user_workflow) - set(workflow)
        if unknown:
            raise dataio.DataError(f"unknown workflow keys: {sorted(unknown)}")
        workflow.update(user_workflow)
        cfg.update(user)
        cfg["workflow"] = workflow
    return cfg


def cmd_simulate(args):
    cfg = resolve_sim_config(args.config)
    if "workflow_model" in cfg:
        model = simgen.WorkflowModel.from_dict(cfg["workflow_model"])
    else:
        w = cfg["workflow"]
        model = simgen.default_model(**dict(w, durations=tuple(w["durations"])), seed=args.seed)
    videos = simgen.generate(model, cfg["n_videos"], cfg["duration_range_s"], seed=args.seed,
                             extraction_fps=cfg["extraction_fps"], with_features=cfg["with_features"])
    dataset = simgen.to_dataset(videos, cfg["split_ratios"], seed=substream(args.seed, "split"))
    with staged_dir(args.out) as tmp:
        dataio.save_dataset(dataset, tmp)
        echo = dict(cfg, seed=args.seed, workflow_model=model.to_dict())
        atomic_write_bytes(tmp / "simulation.json", (json.dumps(echo, indent=2, sort_keys=True) + "\n").encode())
    print(f"simulated {len(videos)} videos, {len(dataset.records)} frames -> {args.out}", file=sys.stderr)


def cmd_prepare(args):
    dataset = dataio.load_dataset(args.data)
    rng = substream(args.seed, "discard")
    kept = []
    for vid, recs in dataset.videos().items():
        if vid in dataset.annotations:
            recs = dataio.annotate_phases(recs, dataset.annotations[vid])
        kept.extend(dataio.discard_no_tool_frames(recs, args.discard_fraction, rng))
    out = dataio.Dataset(kept, dataset.splits, dataset.annotations, dataset.feature_dim)
    with staged_dir(args.out) as tmp:
        dataio.save_dataset(out, tmp)
    print(f"kept {len(kept)} of {len(dataset.records)} frames -> {args.out}", file=sys.stderr)


def _load_train_config(args):
    raw = _read_json(args.config) if args.config else {}
    raw["task"] = args.task
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise dataio.DataError(f"invalid run config: {exc}") from None


def cmd_train(args):
    config = _load_train_config(args)
    needs_features = config.task == "tools" or config.input_kind == "features"
    dataset = dataio.load_dataset(args.data, require_features=needs_features)
    if config.task == "tools":
        records = dataset.split_records("train")
        if not records:
            raise dataio.DataError(f"{args.data}: no frames in the train split")
        if dataset.feature_dim != config.input_dim:
            raise dataio.DataError(
                f"feature store dimension {dataset.feature_dim} does not match configured input dim {config.input_dim}"
            )
        obj, log, opt = train_tool_head(records, config)
    else:
        if config.input_kind == "features" and dataset.feature_dim != config.input_dim:
            raise dataio.DataError(
                f"feature store dimension {dataset.feature_dim} does not match configured input dim {config.input_dim}"
            )
        train = dataset.videos("train")
        if not train:
            raise dataio.DataError(f"{args.data}: no videos in the train split")
        obj, log, opt = train_phase_model(train, config, validation=dataset.videos("validation"))
    with staged_dir(args.out) as tmp:
        save_checkpoint(tmp / CHECKPOINT_FILE, obj, config, opt)
        atomic_write_bytes(tmp / CONFIG_FILE, config.to_json().encode())
        atomic_write_bytes(tmp / LOG_FILE, log.to_csv().encode())
    final = log.rows[-1]["loss"] if log.rows else float("nan")
    print(f"trained {config.task} model, final loss {final:.6g} -> {args.out}", file=sys.stderr)


def _eval_inputs(args):
    checkpoint = Path(args.checkpoint)
    if checkpoint.is_dir():
        checkpoint = checkpoint / CHECKPOINT_FILE
    if not checkpoint.exists():
        raise dataio.DataError(f"checkpoint not found: {checkpoint}")
    obj, config, _ = load_checkpoint(checkpoint)
    if getattr(args, "config", None):
        override = _read_json(args.config)
        override.setdefault("task", config.task)
        try:
            other = RunConfig.from_dict(override)
        except (TypeError, ValueError) as exc:
            raise dataio.DataError(f"invalid run config: {exc}") from None
        if (other.task, other.model, other.input_kind, other.input_dim, other.hidden_sizes) != (
            config.task, config.model, config.input_kind, config.input_dim, config.hidden_sizes
        ):
            raise dataio.DataError(
                f"architecture mismatch: checkpoint is {config.task}/{config.model}/{config.input_kind}"
                f"/{config.input_dim}/{list(config.hidden_sizes)}, config asks for {other.task}/{other.model}"
                f"/{other.input_kind}/{other.input_dim}/{list(other.hidden_sizes)}"
            )
        config = other
    needs_features = isinstance(obj, ToolHead) or config.input_kind == "features"
    dataset = dataio.load_dataset(args.data, require_features=needs_features)
    if args.split not in dataset.splits.values():
        raise dataio.DataError(f"{args.data}: dataset has no videos in split {args.split!r}")
    return obj, config, dataset


def cmd_eval(args):
    obj, config, dataset = _eval_inputs(args)
    with staged_dir(args.report) as tmp:
        if isinstance(obj, ToolHead):
            report = evaluate_tools(obj, dataset.split_records(args.split), config.threshold)
        else:
            report, rows = evaluate_phases(obj, dataset.videos(args.split), config, args.threads)
            atomic_write_bytes(tmp / "predictions.csv", format_predictions(rows).encode())
        atomic_write_bytes(tmp / "report.json", report.to_json().encode())
        atomic_write_bytes(tmp / "report.csv", report.to_csv().encode())
    summary = (f"accuracy {report.per_frame_accuracy:.4f}, macro F1 {report.macro_f1:.4f}"
               if report.per_frame_accuracy is not None else
               f"mean AUC {report.mean_auc:.4f}, hAcc {report.hamming_accuracy:.4f}")
    print(f"{args.split}: {summary} -> {args.report}", file=sys.stderr)


def cmd_infer(args):
    obj, config, dataset = _eval_inputs(args)
    if isinstance(obj, ToolHead):
        raise dataio.DataError("infer needs a phase checkpoint")
    rows = predict_phases(obj, dataset.videos(args.split), config, args.threads)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out, format_predictions(rows).encode())
    except OSError as exc:
        raise dataio.DataError(f"cannot write {out}: {exc.strerror or exc}") from None
    print(f"{len(rows)} frame predictions -> {out}", file=sys.stderr)


def build_parser():
    p = Parser(prog="cataphase", description="Tool-driven surgical phase recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("simulate", help="generate a synthetic workflow dataset")
    s.add_argument("--config", help="simulation config (JSON)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", help="label frames from annotations and drop tool-free frames")
    s.add_argument("--data", required=True, help="input dataset directory")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--discard-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train the tool head or a phase model")
    s.add_argument("--task", choices=("tools", "phase"), required=True)
    s.add_argument("--config", help="run config (JSON)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="run output directory")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint on one split"),
                              ("infer", cmd_infer, "write per-frame phase predictions")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
        s.add_argument("--data", required=True, help="dataset directory")
        s.add_argument("--split", default="holdout_test", choices=dataio.SPLITS)
        s.add_argument("--config", help="run config overriding inference settings (JSON)")
        s.add_argument("--threads", type=int, default=1, help="parallel window classification")
        if name == "eval":
            s.add_argument("--report", required=True, help="report output directory")
        else:
            s.add_argument("--out", required=True, help="predictions CSV path")
        s.set_defaults(func=func)
    return p


def _sigterm(signum, frame):
    raise SystemExit(128 + signum)


def main(argv=None):
    args = build_parser().parse_args(argv)
    previous = signal.signal(signal.SIGTERM, _sigterm)
    try:
        args.func(args)
    except (dataio.DataError, ArchiveError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        signal.signal(signal.SIGTERM, previous)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
