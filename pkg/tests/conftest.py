import numpy as np
import pytest

from cataphase import simgen


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-4):
    """Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps coordinates with tiny gradients from being judged on
    finite-difference roundoff (about 1e-11 absolute for O(1) losses at h=1e-5).
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@pytest.fixture(scope="session")
def workflow():
    return simgen.default_model()


@pytest.fixture(scope="session")
def small_videos(workflow):
    return simgen.generate(workflow, 4, duration_range_s=(60, 90), seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_videos):
    return simgen.to_dataset(small_videos, {"train": 0.5, "validation": 0.25, "holdout_test": 0.25}, seed=0)


def bptt_check(arch, hidden_sizes, input_size, seq_len, seed, per_step=True, batch=None):
    """Worst relative error of BPTT gradients of the summed softmax CE vs central differences."""
    from cataphase.losses import one_hot, softmax_ce
    from cataphase.recurrent import backward_sequence, forward_sequence, init_model

    rng = np.random.default_rng(seed)
    model = init_model(arch, input_size, hidden_sizes, 14, rng)
    for k, v in model.params.items():
        v[...] = rng.normal(scale=0.6, size=v.shape)
    shape = (seq_len, input_size) if batch is None else (batch, seq_len, input_size)
    X = rng.normal(size=shape)
    n_labels = (seq_len if per_step else 1) * (1 if batch is None else batch)
    labels = one_hot(rng.integers(0, 14, size=n_labels), 14)

    def loss_and_grad():
        logits, cache = forward_sequence(model, X, per_step)
        flat = logits.reshape(-1, 14)
        loss, g = softmax_ce(labels, flat)
        # summed over timesteps
        return loss * len(flat), g.reshape(logits.shape) * len(flat), cache

    _, g, cache = loss_and_grad()
    grads = backward_sequence(model, cache, g)
    worst = 0.0
    for name, p in model.params.items():
        num = central_diff(lambda: loss_and_grad()[0], p)
        worst = max(worst, max_rel_error(grads[name], num))
    return worst


@pytest.fixture(scope="session")
def overfit_run(workflow):
    """One long noisy video memorized by a small LSTM, trained full-batch."""
    from cataphase.pipeline import RunConfig, phase_accuracy, train_phase_model

    video = simgen.generate(workflow, 1, duration_range_s=(900, 1000), seed=1)[0]
    videos = {video.meta.video_id: video.records}
    config = RunConfig(model="lstm", hidden_sizes=(64,), epochs=250, batch_size=32, seed=0)
    model, log, _ = train_phase_model(videos, config)
    return {"accuracy": phase_accuracy(model, videos, config), "losses": log.losses(), "config": config}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
