"""In-place optimizers over a ``dict`` of named float64 parameter arrays."""

from __future__ import annotations

import numpy as np


def _check(params, grads, buffers):
    if set(grads) != set(params):
        raise ValueError(
            f"gradient names {sorted(set(grads) ^ set(params))} do not match parameter names"
        )
    for name, p in params.items():
        if np.shape(grads[name]) != p.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(grads[name])}, expected {p.shape}")
        if name in buffers and buffers[name].shape != p.shape:
            raise ValueError(f"optimizer buffer for {name} has shape {buffers[name].shape}, expected {p.shape}")


class SGD:
    """Heavy-ball momentum: ``v <- mu v + g``; ``theta <- theta - lr v``."""

    kind = "sgd"

    def __init__(self, lr=1e-4, momentum=0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        _check(params, grads, self.velocity)
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v += grads[name]
            p -= self.lr * v

    def hyperparams(self):
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum}

    def state_tensors(self):
        return {f"opt.v.{k}": v for k, v in self.velocity.items()}

    def load_state(self, meta, tensors):
        self.velocity = {k[len("opt.v."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.v.")}


class Adam:
    """Adam with bias correction."""

    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        _check(params, grads, self.m)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def hyperparams(self):
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t}

    def state_tensors(self):
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, meta, tensors):
        self.t = int(meta.get("t", 0))
        self.m = {k[len("opt.m."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: v.copy() for k, v in tensors.items() if k.startswith("opt.v.")}


def make_optimizer(kind, **hyper):
    hyper = {k: v for k, v in hyper.items() if k != "t"}
    if kind == "sgd":
        return SGD(**hyper)
    if kind == "adam":
        return Adam(**hyper)
    raise ValueError(f"unknown optimizer {kind!r}")
