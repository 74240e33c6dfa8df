"""Simple-RNN and GRU stacks over windows of CNN feature vectors, trained with
full backpropagation through time. Many-to-one: a linear head reads the top
layer's hidden state at the last step of the window."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, check_shape
from .layers import glorot_limit

STANDARD_STACKS = ((100,), (100, 100, 50))
GRU_GATES = ("z", "r", "h")


@dataclass
class RnnSpec:
    cell: str = "gru"
    layers: tuple = (100,)
    input_dim: int = 300
    output_dim: int = 2
    window: int = 100
    kind: str = field(default="rnn", init=False)

    def __post_init__(self):
        self.layers = tuple(int(w) for w in self.layers)
        if self.cell not in ("simple", "gru"):
            raise ConfigError(f"cell must be 'simple' or 'gru', got {self.cell!r}")
        if not self.layers or min(self.layers) < 1:
            raise ConfigError(f"bad layer widths {self.layers}")
        if self.window < 1:
            raise ConfigError("window must be >= 1")

    def to_dict(self):
        return {"kind": self.kind, "cell": self.cell, "layers": list(self.layers),
                "input_dim": self.input_dim, "output_dim": self.output_dim, "window": self.window}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("kind", None)
        return cls(**d)


def stack_for(n_layers):
    """Layer widths for the 1- or 3-layer configuration."""
    for widths in STANDARD_STACKS:
        if len(widths) == n_layers:
            return widths
    raise ConfigError(f"layers must be 1 or 3, got {n_layers}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def simple_rnn_step(x, h_prev, p):
    """h = tanh(W x + U h_prev + b). Works on vectors or (B, dim) batches."""
    check_shape("simple_rnn_step W", p["W"].shape, (h_prev.shape[-1], x.shape[-1]))
    return np.tanh(x @ p["W"].T + h_prev @ p["U"].T + p["b"])


def gru_step(x, h_prev, p):
    check_shape("gru_step Wz", p["Wz"].shape, (h_prev.shape[-1], x.shape[-1]))
    z = sigmoid(x @ p["Wz"].T + h_prev @ p["Uz"].T + p["bz"])
    r = sigmoid(x @ p["Wr"].T + h_prev @ p["Ur"].T + p["br"])
    cand = np.tanh(x @ p["Wh"].T + (r * h_prev) @ p["Uh"].T + p["bh"])
    return (1 - z) * h_prev + z * cand


class RNN:
    kind = "rnn"

    def __init__(self, spec: RnnSpec, params=None, seed=0, dtype=np.float32):
        self.spec = spec
        self.params = params if params is not None else self._init_params(seed, dtype)
        self._cache = None

    def _init_params(self, seed, dtype):
        s = self.spec
        rng = np.random.default_rng(seed)
        p = {}

        def glorot(shape):
            lim = glorot_limit(shape[1], shape[0])
            return rng.uniform(-lim, lim, size=shape).astype(dtype)

        d_in = s.input_dim
        suffixes = ("",) if s.cell == "simple" else GRU_GATES
        for i, h in enumerate(s.layers):
            for g in suffixes:
                p[f"l{i}.W{g}"] = glorot((h, d_in))
                p[f"l{i}.U{g}"] = glorot((h, h))
                p[f"l{i}.b{g}"] = np.zeros(h, dtype)
            d_in = h
        p["head.w"] = glorot((s.output_dim, d_in))
        p["head.b"] = np.zeros(s.output_dim, dtype)
        return p

    @property
    def trainable(self):
        return list(self.params)

    @property
    def no_decay(self):
        return set()

    def layer_params(self, i):
        prefix = f"l{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, X, train=False, rng=None):
        """X: (B, T, input_dim) -> (B, output_dim). ``train``/``rng`` are
        accepted for interface parity with the CNN and ignored."""
        s = self.spec
        if X.ndim != 3 or X.shape[1:] != (s.window, s.input_dim):
            raise ShapeError(f"RNN input: expected (B, {s.window}, {s.input_dim}), got {X.shape}")
        caches = []
        h_seq = X
        for i in range(len(s.layers)):
            step = _simple_forward if s.cell == "simple" else _gru_forward
            h_seq, cache = step(h_seq, self.layer_params(i))
            caches.append(cache)
        last = h_seq[:, -1]
        self._cache = (caches, last)
        return last @ self.params["head.w"].T + self.params["head.b"]

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        caches, last = self._cache
        s = self.spec
        g = {"head.w": grad_out.T @ last, "head.b": grad_out.sum(axis=0)}
        B, T = caches[-1]["x"].shape[:2]
        d_seq = np.zeros((B, T, s.layers[-1]), dtype=grad_out.dtype)
        d_seq[:, -1] = grad_out @ self.params["head.w"]
        for i in reversed(range(len(s.layers))):
            back = _simple_backward if s.cell == "simple" else _gru_backward
            d_seq, grads = back(d_seq, caches[i], self.layer_params(i))
            for k, v in grads.items():
                g[f"l{i}.{k}"] = v
        return g

    def predict(self, X, batch_size=128):
        outs = [self.forward(X[s:s + batch_size]) for s in range(0, len(X), batch_size)]
        self._cache = None
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.output_dim), np.float32)


def rnn_forward(window, spec: RnnSpec, params):
    """Single-window convenience wrapper: (T, input_dim) -> (valence, arousal)."""
    out = RNN(spec, params).forward(np.asarray(window)[None])[0]
    return float(out[0]), float(out[1])


def _simple_forward(X, p):
    B, T, _ = X.shape
    H = p["b"].shape[0]
    xw = X @ p["W"].T + p["b"]
    hs = np.zeros((B, T + 1, H), dtype=xw.dtype)
    for t in range(T):
        hs[:, t + 1] = np.tanh(xw[:, t] + hs[:, t] @ p["U"].T)
    return hs[:, 1:], {"x": X, "hs": hs}


def _simple_backward(d_seq, cache, p):
    X, hs = cache["x"], cache["hs"]
    B, T, D = X.shape
    da = np.empty_like(d_seq)
    dh_next = np.zeros_like(d_seq[:, 0])
    for t in reversed(range(T)):
        h = hs[:, t + 1]
        da_t = (d_seq[:, t] + dh_next) * (1 - h * h)
        da[:, t] = da_t
        dh_next = da_t @ p["U"]
    H = da.shape[2]
    flat_da = da.reshape(B * T, H)
    grads = {
        "W": flat_da.T @ X.reshape(B * T, D),
        "U": flat_da.T @ hs[:, :-1].reshape(B * T, H),
        "b": flat_da.sum(axis=0),
    }
    return da @ p["W"], grads


def _gru_forward(X, p):
    B, T, _ = X.shape
    H = p["bz"].shape[0]
    xz = X @ p["Wz"].T + p["bz"]
    xr = X @ p["Wr"].T + p["br"]
    xh = X @ p["Wh"].T + p["bh"]
    hs = np.zeros((B, T + 1, H), dtype=xz.dtype)
    zs = np.empty((B, T, H), dtype=xz.dtype)
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    for t in range(T):
        h = hs[:, t]
        z = sigmoid(xz[:, t] + h @ p["Uz"].T)
        r = sigmoid(xr[:, t] + h @ p["Ur"].T)
        c = np.tanh(xh[:, t] + (r * h) @ p["Uh"].T)
        hs[:, t + 1] = (1 - z) * h + z * c
        zs[:, t], rs[:, t], cs[:, t] = z, r, c
    return hs[:, 1:], {"x": X, "hs": hs, "z": zs, "r": rs, "c": cs}


def _gru_backward(d_seq, cache, p):
    X, hs, zs, rs, cs = cache["x"], cache["hs"], cache["z"], cache["r"], cache["c"]
    B, T, D = X.shape
    H = hs.shape[2]
    daz = np.empty_like(d_seq)
    dar = np.empty_like(d_seq)
    dac = np.empty_like(d_seq)
    dUh = np.zeros_like(p["Uh"])
    dh_next = np.zeros_like(d_seq[:, 0])
    for t in reversed(range(T)):
        h_prev, z, r, c = hs[:, t], zs[:, t], rs[:, t], cs[:, t]
        dh = d_seq[:, t] + dh_next
        dac_t = dh * z * (1 - c * c)
        daz_t = dh * (c - h_prev) * z * (1 - z)
        drh = dac_t @ p["Uh"]
        dar_t = drh * h_prev * r * (1 - r)
        dUh += dac_t.T @ (r * h_prev)
        dh_next = dh * (1 - z) + drh * r + daz_t @ p["Uz"] + dar_t @ p["Ur"]
        daz[:, t], dar[:, t], dac[:, t] = daz_t, dar_t, dac_t
    flat_x = X.reshape(B * T, D)
    flat_h = hs[:, :-1].reshape(B * T, H)
    grads = {"Uh": dUh}
    for gate, da in (("z", daz), ("r", dar), ("h", dac)):
        flat = da.reshape(B * T, H)
        grads[f"W{gate}"] = flat.T @ flat_x
        grads[f"b{gate}"] = flat.sum(axis=0)
        if gate != "h":
            grads[f"U{gate}"] = flat.T @ flat_h
    d_x = daz @ p["Wz"] + dar @ p["Wr"] + dac @ p["Wh"]
    return d_x, grads
