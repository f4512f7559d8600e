"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed in the terminal
summary (see ``conftest.pytest_terminal_summary``) and also echoed live.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from cataphase import dataio, pipeline, simgen
from cataphase.cli import main as cli_main
from cataphase.dataio import FrameRecord, PhaseAnnotation, VideoMeta
from cataphase.losses import one_hot, sigmoid_ce, softmax_ce
from cataphase.metrics import auc, hamming_accuracy, subset_accuracy
from cataphase.numerics import DenseLayer, dense_backward, dense_forward
from cataphase.pipeline import RunConfig
from cataphase.recurrent import forward_sequence, gru, lstm

from conftest import bptt_check, central_diff, max_rel_error

RESULTS = {}


@pytest.fixture
def record(capsys):
    def _record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        RESULTS[number] = line
        with capsys.disabled():
            print(f"\n    {line}")
        assert ok, line

    return _record


def test_criterion_1_gradients(record):
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(100)
    for name, fn in (("sigmoid_ce", sigmoid_ce), ("softmax_ce", softmax_ce)):
        errs = []
        for _ in range(10):
            n, c = rng.integers(1, 6), rng.integers(2, 15)
            z = rng.normal(scale=2, size=(n, c))
            y = rng.integers(0, 2, (n, c)) if name == "sigmoid_ce" else one_hot(rng.integers(0, c, n), c)
            errs.append(max_rel_error(fn(y, z)[1], central_diff(lambda: fn(y, z)[0], z)))
        worst[name] = max(errs)
    errs = []
    for _ in range(10):
        n_out, n_in = rng.integers(1, 7, size=2)
        layer = DenseLayer(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out))
        x, w = rng.normal(size=n_in), rng.normal(size=n_out)
        f = lambda: float(w @ dense_forward(layer, x))  # noqa: E731
        gW, gb, gx = dense_backward(layer, x, w)
        errs += [max_rel_error(gW, central_diff(f, layer.weights)), max_rel_error(gb, central_diff(f, layer.bias)),
                 max_rel_error(gx, central_diff(f, x))]
    worst["dense"] = max(errs)
    for arch in ("lstm", "gru"):
        errs = []
        for seed in range(10):
            r = np.random.default_rng(seed)
            n_layers = 1 if arch == "lstm" else int(r.integers(1, 3))
            hidden = tuple(int(h) for h in r.integers(2, 5, size=n_layers))
            errs.append(bptt_check(arch, hidden, int(r.integers(2, 5)), int(r.integers(2, 6)), seed,
                                   per_step=bool(seed % 3), batch=None if seed % 2 else 2))
        worst[arch] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 60
    record(1, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s")


def _brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _naive_rates(g, p):
    n, c = g.shape
    ham = Fraction(0)
    exact = 0
    for i in range(n):
        agree = sum(int(g[i, j] == p[i, j]) for j in range(c))
        ham += Fraction(agree, c)
        exact += agree == c
    return float(ham / n), float(Fraction(exact, n))


def test_criterion_2_metric_oracles(record):
    rng = np.random.default_rng(200)
    worst_auc = worst_cube = 0.0
    mismatches = order_violations = 0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        a = auc(s, y)
        worst_auc = max(worst_auc, abs(a - _brute_auc(s, y)))
        worst_cube = max(worst_cube, abs(auc(s**3, y) - a))
        rows, cols = rng.integers(1, 30), rng.integers(1, 22)
        g = rng.integers(0, 2, (rows, cols))
        p = np.where(rng.random((rows, cols)) < 0.9, g, 1 - g)
        h, sa = hamming_accuracy(g, p), subset_accuracy(g, p)
        mismatches += (h, sa) != _naive_rates(g, p)
        order_violations += sa > h
    ok = worst_auc < 1e-12 and worst_cube < 1e-12 and mismatches == 0 and order_violations == 0
    record(2, ok, f"auc err {worst_auc:.1e}, cube err {worst_cube:.1e}, "
                  f"{mismatches} accuracy mismatches, {order_violations} subset>hamming")


def test_criterion_3_loss_anchors(record):
    rng = np.random.default_rng(300)
    sig = sigmoid_ce(rng.integers(0, 2, (16, 21)), np.zeros((16, 21)))[0]
    soft = softmax_ce(one_hot(rng.integers(0, 14, 16), 14), np.zeros((16, 14)))[0]
    d1, d2 = abs(sig - math.log(2)), abs(soft - math.log(14))
    record(3, d1 <= 1e-12 and d2 <= 1e-12, f"|sigmoid - ln 2| {d1:.1e}, |softmax - ln 14| {d2:.1e}")


E2E_EPOCHS = 12


def test_criterion_4_synthetic_end_to_end(record):
    start = time.perf_counter()
    workflow = simgen.default_model(noise=0.05)
    dataset = simgen.to_dataset(simgen.generate(workflow, 14, seed=0), seed=0)
    counts = {s: len(dataset.videos(s)) for s in ("train", "validation", "holdout_test")}
    assert counts == {"train": 10, "validation": 2, "holdout_test": 2}
    bayes = simgen.bayes_accuracy(workflow, dataset.split_records("holdout_test"))
    accs = {}
    for arch in ("lstm", "gru"):
        cfg = RunConfig(model=arch, input_kind="binary", epochs=E2E_EPOCHS, seed=0)
        model, _, _ = pipeline.train_phase_model(dataset.videos("train"), cfg)
        accs[arch] = pipeline.evaluate_phases(model, dataset.videos("holdout_test"), cfg)[0].per_frame_accuracy
    elapsed = time.perf_counter() - start
    bar = 0.9 * bayes
    ok = all(a >= bar for a in accs.values()) and elapsed < 300
    record(4, ok, f"bayes {bayes:.3f}, bar {bar:.3f}, lstm {accs['lstm']:.3f}, gru {accs['gru']:.3f}; "
                  f"{elapsed:.0f} s")


def test_criterion_5_overfit(record, overfit_run):
    acc = overfit_run["accuracy"]
    record(5, acc >= 0.99, f"training accuracy {acc:.4f} on one video")


def test_criterion_6_tool_head(record):
    workflow = simgen.default_model(feature_scale=30.0)
    dataset = simgen.to_dataset(simgen.generate(workflow, 10, seed=1))
    cfg = RunConfig(task="tools", input_dim=workflow.feature_dim, seed=0)
    assert cfg.optimizer == {"kind": "sgd", "lr": 1e-4, "momentum": 0.9}
    assert (cfg.batch_size, cfg.init_std, cfg.iterations) == (8, 0.01, 10_000)
    head, _, _ = pipeline.train_tool_head(dataset.split_records("train"), cfg)
    rep = pipeline.evaluate_tools(head, dataset.split_records("holdout_test"))
    record(6, rep.mean_auc >= 0.99, f"holdout mean AUC {rep.mean_auc:.4f}")


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(record, tmp_path):
    sim = tmp_path / "sim.json"
    sim.write_text(json.dumps({"n_videos": 5, "duration_range_s": [60, 120],
                               "split_ratios": {"train": 3, "validation": 1, "holdout_test": 1}}))
    run = tmp_path / "run.json"
    run.write_text(json.dumps({"model": {"kind": "gru", "hidden_sizes": [16, 16]}, "training": {"epochs": 2}}))
    trees = []
    for k in range(2):
        root = tmp_path / f"rep{k}"
        codes = [
            cli_main(["simulate", "--config", str(sim), "--out", str(root / "data"), "--seed", "7"]),
            cli_main(["train", "--task", "phase", "--config", str(run), "--data", str(root / "data"),
                      "--out", str(root / "run"), "--seed", "7"]),
            cli_main(["eval", "--checkpoint", str(root / "run"), "--data", str(root / "data"),
                      "--report", str(root / "report")]),
        ]
        assert codes == [0, 0, 0]
        trees.append(_files(root))
    same = trees[0] == trees[1]
    record(7, same, f"{len(trees[0])} files compared, {'identical' if same else 'differ'}")


def test_criterion_8_full_scale_shapes(record):
    rng = np.random.default_rng(800)
    timings = {}
    for name, model, dim in (("lstm", lstm(2048, 256, 14, rng=rng), 2048),
                             ("gru", gru(2048, (128, 128), 14, rng=rng), 2048)):
        X = rng.normal(size=(100, dim))
        forward_sequence(model, X)
        t = time.perf_counter()
        logits, _ = forward_sequence(model, X)
        timings[name] = time.perf_counter() - t
        assert logits.shape == (100, 14)
    for stride in (100, 50, 1):
        for arch in ("lstm", "gru"):
            for kind, dim in (("binary", 21), ("features", 2048)):
                cfg = RunConfig(model=arch, input_kind=kind, input_dim=dim, window_length=100, window_stride=stride)
                assert pipeline.window_bounds(1000, cfg.window_length, cfg.window_stride)[-1][1] == 1000
    ok = all(t < 1.0 for t in timings.values())
    record(8, ok, ", ".join(f"{k} 100-step forward {v * 1000:.0f} ms" for k, v in timings.items()))


def test_criterion_9_data_rules(record, tmp_path, small_dataset):
    recs = [FrameRecord("v", k, t, (0,) * 21) for k, t in dataio.extract_frame_times(VideoMeta("v", 30, 20), 3)]
    labelled = dataio.annotate_phases(recs, PhaseAnnotation(((1, 0.0), (2, 10.0))))
    boundary_ok = labelled[29].phase == 1 and labelled[30].phase == 2 and labelled[30].time_s == 10.0

    rng = np.random.default_rng(900)
    discard_ok = True
    for trial in range(20):
        frames = [FrameRecord("v", k, k / 3, tuple(int(b) for b in rng.random(21) < 0.04)) for k in range(101)]
        m = sum(not f.has_tools for f in frames)
        kept = dataio.discard_no_tool_frames(frames, 0.5, seed=trial)
        discard_ok &= len(kept) == len(frames) - math.ceil(m / 2)
        discard_ok &= [f for f in frames if f.has_tools] == [f for f in kept if f.has_tools]

    dataio.save_dataset(small_dataset, tmp_path / "a")
    back = dataio.load_dataset(tmp_path / "a", require_features=True)
    dataio.save_dataset(back, tmp_path / "b")
    files_ok = back.records == small_dataset.records and _files(tmp_path / "a") == _files(tmp_path / "b")
    files_ok &= all(x.features.tobytes() == y.features.tobytes() for x, y in zip(back.records, small_dataset.records))
    ok = boundary_ok and discard_ok and files_ok
    record(9, ok, f"boundary {'ok' if boundary_ok else 'wrong'}, discard {'ok' if discard_ok else 'wrong'}, "
                  f"round-trip {'bit-exact' if files_ok else 'differs'}")
