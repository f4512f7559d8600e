"""LSTM and stacked-GRU sequence classifiers with backpropagation through time.

A model is a :class:`RecurrentModel`: an architecture tag, its sizes, and a
flat ``dict`` of named float64 tensors. Layer ``k`` owns the tensors prefixed
``l{k}.``; the softmax head owns ``head.W`` and ``head.b``. Keeping parameters
in a flat mapping lets the optimizers and the checkpoint archive treat every
model the same way.

All sequence functions accept a single sequence ``(T, D)`` or a batch
``(B, T, D)``; the initial state is always zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, DenseLayer, dense_backward, dense_forward, seeded_uniform, sigmoid

N_PHASES = 14
LSTM_GATES = ("i", "f", "o", "g")
GRU_GATES = ("z", "r", "h")


@dataclass
class RecurrentModel:
    arch: str
    input_size: int
    hidden_sizes: tuple
    n_classes: int = N_PHASES
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ("lstm", "gru"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in self.params.items()}
        expected = expected_shapes(self.arch, self.input_size, self.hidden_sizes, self.n_classes)
        if self.params:
            if set(self.params) != set(expected):
                missing = sorted(set(expected) - set(self.params))
                extra = sorted(set(self.params) - set(expected))
                raise ValueError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
            for name, shape in expected.items():
                if self.params[name].shape != shape:
                    raise ValueError(
                        f"{name} has shape {self.params[name].shape}, expected {shape}"
                    )

    @property
    def gates(self):
        return LSTM_GATES if self.arch == "lstm" else GRU_GATES

    def layer(self, k):
        prefix = f"l{k}."
        return {name[len(prefix):]: v for name, v in self.params.items() if name.startswith(prefix)}

    @property
    def head(self) -> DenseLayer:
        return DenseLayer(self.params["head.W"], self.params["head.b"])

    def copy(self):
        return RecurrentModel(
            self.arch, self.input_size, self.hidden_sizes, self.n_classes,
            {k: v.copy() for k, v in self.params.items()},
        )

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))


def expected_shapes(arch, input_size, hidden_sizes, n_classes):
    gates = LSTM_GATES if arch == "lstm" else GRU_GATES
    shapes = {}
    width = input_size
    for k, hid in enumerate(hidden_sizes):
        for g in gates:
            shapes[f"l{k}.W_{g}"] = (hid, width)
            shapes[f"l{k}.U_{g}"] = (hid, hid)
            shapes[f"l{k}.b_{g}"] = (hid,)
        width = hid
    shapes["head.W"] = (n_classes, width)
    shapes["head.b"] = (n_classes,)
    return shapes


def init_model(arch, input_size, hidden_sizes=None, n_classes=N_PHASES, rng=None, forget_bias=1.0):
    """Seeded initialization: uniform in [-k, k] with k = 1/sqrt(hidden).

    LSTM forget-gate biases start at ``forget_bias``.
    """
    if hidden_sizes is None:
        hidden_sizes = (256,) if arch == "lstm" else (128, 128)
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    shapes = expected_shapes(arch, input_size, tuple(hidden_sizes), n_classes)
    params = {}
    for name, shape in shapes.items():
        fan = shape[0] if name.startswith("l") else shapes["head.W"][1]
        params[name] = seeded_uniform(shape, 1.0 / np.sqrt(fan), rng)
    if arch == "lstm":
        for k in range(len(hidden_sizes)):
            params[f"l{k}.b_f"][:] = forget_bias
    return RecurrentModel(arch, input_size, tuple(hidden_sizes), n_classes, params)


def lstm(input_size, hidden=256, n_classes=N_PHASES, rng=None):
    return init_model("lstm", input_size, (hidden,), n_classes, rng)


def gru(input_size, hidden_sizes=(128, 128), n_classes=N_PHASES, rng=None):
    return init_model("gru", input_size, tuple(hidden_sizes), n_classes, rng)


# single steps

def _check_cell(layer, x, h):
    hid, width = (layer["W_i"] if "W_i" in layer else layer["W_z"]).shape
    if np.shape(x)[-1] != width:
        raise ValueError(f"input dimension {np.shape(x)[-1]} does not match cell input size {width}")
    if np.shape(h)[-1] != hid:
        raise ValueError(f"state dimension {np.shape(h)[-1]} does not match hidden size {hid}")


def lstm_cell(layer, x_t, h, c):
    """One LSTM step (no peepholes). Returns ``(h_next, c_next)``."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    _check_cell(layer, x_t, h)
    pre = {g: x_t @ layer[f"W_{g}"].T + h @ layer[f"U_{g}"].T + layer[f"b_{g}"] for g in LSTM_GATES}
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    g = np.tanh(pre["g"])
    c_next = f * c + i * g
    return o * np.tanh(c_next), c_next


def gru_cell(layer, x_t, h):
    """One GRU step; ``z`` weights the new candidate: ``h' = (1-z) h + z n``."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    _check_cell(layer, x_t, h)
    z = sigmoid(x_t @ layer["W_z"].T + h @ layer["U_z"].T + layer["b_z"])
    r = sigmoid(x_t @ layer["W_r"].T + h @ layer["U_r"].T + layer["b_r"])
    n = np.tanh(x_t @ layer["W_h"].T + (r * h) @ layer["U_h"].T + layer["b_h"])
    return (1.0 - z) * h + z * n


@dataclass
class RecurrentState:
    h: list
    c: list = None


def zero_state(model, batch_shape=()):
    h = [np.zeros(batch_shape + (hid,), dtype=DTYPE) for hid in model.hidden_sizes]
    c = [np.zeros_like(v) for v in h] if model.arch == "lstm" else None
    return RecurrentState(h, c)


def step(model, x_t, state):
    """Advance every layer by one timestep; returns the new state."""
    h_new, c_new = [], []
    inp = x_t
    for k in range(len(model.hidden_sizes)):
        if model.arch == "lstm":
            h, c = lstm_cell(model.layer(k), inp, state.h[k], state.c[k])
            c_new.append(c)
        else:
            h = gru_cell(model.layer(k), inp, state.h[k])
        h_new.append(h)
        inp = h
    return RecurrentState(h_new, c_new if model.arch == "lstm" else None)


# whole sequences

@dataclass
class SequenceCache:
    arch: str
    shapes: dict
    batched: bool
    per_step: bool
    inputs: np.ndarray
    layers: list
    top: np.ndarray


def _lstm_layer_forward(layer, X):
    B, T, _ = X.shape
    H = layer["U_i"].shape[0]
    W = np.concatenate([layer[f"W_{g}"] for g in LSTM_GATES])
    U = np.concatenate([layer[f"U_{g}"] for g in LSTM_GATES])
    b = np.concatenate([layer[f"b_{g}"] for g in LSTM_GATES])
    XW = X @ W.T + b
    gates = np.empty((B, T, 4 * H), dtype=DTYPE)
    cs = np.empty((B, T + 1, H), dtype=DTYPE)
    hs = np.empty((B, T + 1, H), dtype=DTYPE)
    tc = np.empty((B, T, H), dtype=DTYPE)
    cs[:, 0] = 0.0
    hs[:, 0] = 0.0
    for t in range(T):
        a = XW[:, t] + hs[:, t] @ U.T
        a[:, : 3 * H] = sigmoid(a[:, : 3 * H])
        a[:, 3 * H:] = np.tanh(a[:, 3 * H:])
        i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        cs[:, t + 1] = f * cs[:, t] + i * g
        tc[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tc[:, t]
        gates[:, t] = a
    return hs[:, 1:], dict(X=X, gates=gates, cs=cs, hs=hs, tc=tc, W=W, U=U)


def _lstm_layer_backward(cache, dH):
    X, gates, cs, hs, tc, W, U = (cache[k] for k in ("X", "gates", "cs", "hs", "tc", "W", "U"))
    B, T, H = dH.shape
    dA = np.empty((B, T, 4 * H), dtype=DTYPE)
    dh_next = np.zeros((B, H), dtype=DTYPE)
    dc_next = np.zeros((B, H), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        a = gates[:, t]
        i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        dh = dH[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc[:, t] ** 2)
        da = dA[:, t]
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dh * tc[:, t] * o * (1.0 - o)
        da[:, 3 * H:] = dc * i * (1.0 - g ** 2)
        dc_next = dc * f
        dh_next = da @ U
    flat = dA.reshape(B * T, 4 * H)
    dW = flat.T @ X.reshape(B * T, -1)
    dU = flat.T @ hs[:, :-1].reshape(B * T, H)
    db = flat.sum(axis=0)
    dX = dA @ W
    grads = {}
    for n, gname in enumerate(LSTM_GATES):
        sl = slice(n * H, (n + 1) * H)
        grads[f"W_{gname}"] = dW[sl]
        grads[f"U_{gname}"] = dU[sl]
        grads[f"b_{gname}"] = db[sl]
    return grads, dX


def _gru_layer_forward(layer, X):
    B, T, _ = X.shape
    H = layer["U_z"].shape[0]
    Wzr = np.concatenate([layer["W_z"], layer["W_r"]])
    Uzr = np.concatenate([layer["U_z"], layer["U_r"]])
    XZR = X @ Wzr.T + np.concatenate([layer["b_z"], layer["b_r"]])
    XN = X @ layer["W_h"].T + layer["b_h"]
    Uh = layer["U_h"]
    hs = np.empty((B, T + 1, H), dtype=DTYPE)
    zs = np.empty((B, T, H), dtype=DTYPE)
    rs = np.empty((B, T, H), dtype=DTYPE)
    ns = np.empty((B, T, H), dtype=DTYPE)
    hs[:, 0] = 0.0
    for t in range(T):
        h = hs[:, t]
        zr = sigmoid(XZR[:, t] + h @ Uzr.T)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(XN[:, t] + (r * h) @ Uh.T)
        hs[:, t + 1] = (1.0 - z) * h + z * n
        zs[:, t], rs[:, t], ns[:, t] = z, r, n
    return hs[:, 1:], dict(X=X, hs=hs, zs=zs, rs=rs, ns=ns, layer=layer)


def _gru_layer_backward(cache, dH):
    X, hs, zs, rs, ns, layer = (cache[k] for k in ("X", "hs", "zs", "rs", "ns", "layer"))
    B, T, H = dH.shape
    dAz = np.empty((B, T, H), dtype=DTYPE)
    dAr = np.empty((B, T, H), dtype=DTYPE)
    dAn = np.empty((B, T, H), dtype=DTYPE)
    dh_next = np.zeros((B, H), dtype=DTYPE)
    Uz, Ur, Uh = layer["U_z"], layer["U_r"], layer["U_h"]
    for t in range(T - 1, -1, -1):
        h_prev, z, r, n = hs[:, t], zs[:, t], rs[:, t], ns[:, t]
        dh = dH[:, t] + dh_next
        dan = dh * z * (1.0 - n ** 2)
        daz = dh * (n - h_prev) * z * (1.0 - z)
        drh = dan @ Uh
        dar = drh * h_prev * r * (1.0 - r)
        dh_next = dh * (1.0 - z) + drh * r + daz @ Uz + dar @ Ur
        dAz[:, t], dAr[:, t], dAn[:, t] = daz, dar, dan
    Xf = X.reshape(B * T, -1)
    Hp = hs[:, :-1].reshape(B * T, H)
    RH = (rs * hs[:, :-1]).reshape(B * T, H)
    grads = {}
    for g, dA, rec in (("z", dAz, Hp), ("r", dAr, Hp), ("h", dAn, RH)):
        flat = dA.reshape(B * T, H)
        grads[f"W_{g}"] = flat.T @ Xf
        grads[f"U_{g}"] = flat.T @ rec
        grads[f"b_{g}"] = flat.sum(axis=0)
    dX = dAz @ layer["W_z"] + dAr @ layer["W_r"] + dAn @ layer["W_h"]
    return grads, dX


def forward_sequence(model, inputs, per_step=True):
    """Run the model over a sequence (or batch of equal-length sequences).

    Returns ``(logits, cache)``. With ``per_step`` the logits have one row per
    timestep; otherwise only the final hidden state is classified.
    """
    X = np.asarray(inputs, dtype=DTYPE)
    if X.ndim == 2:
        batched = False
        X = X[None]
    elif X.ndim == 3:
        batched = True
    else:
        raise ValueError(f"inputs must be (T, D) or (B, T, D), got shape {X.shape}")
    if X.shape[1] == 0 or X.shape[0] == 0:
        raise ValueError("cannot run a recurrent model on an empty sequence")
    if X.shape[2] != model.input_size:
        raise ValueError(
            f"input dimension {X.shape[2]} does not match model input size {model.input_size}"
        )
    layer_fwd = _lstm_layer_forward if model.arch == "lstm" else _gru_layer_forward
    caches = []
    out = X
    for k in range(len(model.hidden_sizes)):
        out, cache = layer_fwd(model.layer(k), out)
        caches.append(cache)
    top = out if per_step else out[:, -1]
    logits = dense_forward(model.head, top)
    cache = SequenceCache(
        model.arch, {k: v.shape for k, v in model.params.items()}, batched, per_step, X, caches, top
    )
    return (logits if batched else logits[0]), cache


def backward_sequence(model, cache, grad_logits):
    """Backpropagation through time; returns a gradient per parameter name."""
    if cache.arch != model.arch or cache.shapes != {k: v.shape for k, v in model.params.items()}:
        raise ValueError("cache was produced by a model with a different architecture")
    G = np.asarray(grad_logits, dtype=DTYPE)
    if not cache.batched:
        G = G[None]
    if G.shape[:-1] != cache.top.shape[:-1] or G.shape[-1] != model.n_classes:
        raise ValueError(
            f"upstream gradient shape {G.shape} does not match logits shape "
            f"{cache.top.shape[:-1] + (model.n_classes,)}"
        )
    grads = {}
    gW, gb, dtop = dense_backward(model.head, cache.top, G)
    grads["head.W"], grads["head.b"] = gW, gb
    B, T = cache.inputs.shape[:2]
    if cache.per_step:
        dH = dtop
    else:
        dH = np.zeros((B, T, model.hidden_sizes[-1]), dtype=DTYPE)
        dH[:, -1] = dtop
    layer_bwd = _lstm_layer_backward if model.arch == "lstm" else _gru_layer_backward
    for k in range(len(model.hidden_sizes) - 1, -1, -1):
        lg, dH = layer_bwd(cache.layers[k], dH)
        for name, g in lg.items():
            grads[f"l{k}.{name}"] = g
    return {name: grads[name] for name in model.params}


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm_before)``; a non-positive ``max_norm`` disables
    clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm
