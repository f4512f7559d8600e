"""
Checking recurrent gradients by hand
====================================

Backpropagation through time is easy to get subtly wrong. This walk-through
builds a tiny LSTM and a two-layer GRU, runs them over a short sequence and
compares the analytic gradients against central finite differences.
"""

import numpy as np

from cataphase.losses import one_hot, softmax_ce
from cataphase.recurrent import backward_sequence, forward_sequence, gru, lstm, step, zero_state

###############################################################################
# A single LSTM step
# ------------------
#
# With every weight at zero and every bias at 0.5, one step from a zero state
# gives ``c = sigmoid(0.5) * tanh(0.5)`` and ``h = sigmoid(0.5) * tanh(c)``.

model = lstm(input_size=3, hidden=2, n_classes=14, rng=np.random.default_rng(0))
for name, value in model.params.items():
    value[...] = 0.5 if "b_" in name else 0.0
state = step(model, np.ones(3), zero_state(model))
print("c after one step:", state.c[0])
print("h after one step:", state.h[0])

###############################################################################
# Finite differences
# ------------------
#
# The loss is the softmax cross-entropy summed over timesteps. Each parameter
# entry is nudged by +-1e-5 and the slope compared to the BPTT gradient.


def summed_loss(model, X, labels):
    logits, cache = forward_sequence(model, X)
    loss, grad = softmax_ce(labels, logits)
    return loss * len(X), grad * len(X), cache


def worst_relative_error(model, X, labels, h=1e-5):
    _, grad, cache = summed_loss(model, X, labels)
    grads = backward_sequence(model, cache, grad)
    worst = 0.0
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = summed_loss(model, X, labels)[0]
            p[idx] = old - h
            down = summed_loss(model, X, labels)[0]
            p[idx] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(grads[name][idx] - num) / max(abs(num), abs(grads[name][idx]), 1e-4))
    return worst


rng = np.random.default_rng(1)
X = rng.normal(size=(5, 4))
labels = one_hot(rng.integers(0, 14, size=5), 14)
for label, m in (("lstm(3)", lstm(4, 3, rng=rng)), ("gru(3, 2)", gru(4, (3, 2), rng=rng))):
    print(f"{label:10s} worst relative error {worst_relative_error(m, X, labels):.2e}")

###############################################################################
# Everything stays below 1e-5, the tolerance the test-suite enforces over
# many random configurations.
