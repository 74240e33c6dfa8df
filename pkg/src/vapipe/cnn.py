"""The single-frame CNN: input batchnorm, three 5x5 conv blocks, quadrant
pooling, a 300-unit FC layer with dropout, and a regression or softmax head."""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError

STANDARD_FILTERS = (64, 128, 256)


@dataclass
class CNNSpec:
    head: str = "regression"
    image_size: int = 96
    filters: tuple = STANDARD_FILTERS
    kernel: int = 5
    fc_units: int = 300
    n_outputs: int = 0
    drop_prob: float = 0.5
    kind: str = field(default="cnn", init=False)

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.head not in ("regression", "classification"):
            raise ConfigError(f"head must be 'regression' or 'classification', got {self.head!r}")
        if self.n_outputs == 0:
            self.n_outputs = 2 if self.head == "regression" else 8
        if len(self.filters) != 3:
            raise ConfigError(f"expected three conv widths, got {self.filters}")
        if self.image_size % 8:
            raise ConfigError(f"image_size must be a multiple of 8, got {self.image_size}")

    def layers(self):
        convs = []
        for i, f in enumerate(self.filters):
            pool = "maxpool2x2" if i < 2 else "quadrantpool"
            convs += [L.LayerSpec("conv2d", kernel=self.kernel, filters=f),
                      L.LayerSpec("relu"), L.LayerSpec(pool)]
        head = (L.LayerSpec("dense", units=self.n_outputs),)
        if self.head == "classification":
            head += (L.LayerSpec("softmax"),)
        return [L.LayerSpec("batchnorm"), *convs,
                L.LayerSpec("dense", units=self.fc_units), L.LayerSpec("relu"),
                L.LayerSpec("dropout", drop_prob=self.drop_prob), *head]

    @property
    def flat_dim(self):
        return self.filters[2] * 4

    def to_dict(self):
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("kind", None)
        return cls(**d)


def validate_stack(specs):
    """Check a layer list against the fixed architecture; raises ConfigError."""
    kinds = [s.kind for s in specs]
    body = ["batchnorm",
            "conv2d", "relu", "maxpool2x2",
            "conv2d", "relu", "maxpool2x2",
            "conv2d", "relu", "quadrantpool",
            "dense", "relu", "dropout"]
    if kinds[:len(body)] != body:
        raise ConfigError(f"layer stack does not match the expected CNN: {kinds}")
    tail = kinds[len(body):]
    if tail == ["dense", "softmax"]:
        if specs[-2].units != 8:
            raise ConfigError("softmax head must have 8 outputs")
    elif tail == ["dense"]:
        if specs[-1].units != 2:
            raise ConfigError("regression head must have 2 outputs")
    else:
        raise ConfigError(f"unknown head {tail}")
    if specs[12].drop_prob != 0.5:
        raise ConfigError("dropout probability must be 0.5")


class CNN:
    kind = "cnn"

    def __init__(self, spec: CNNSpec, params=None, seed=0, dtype=np.float32):
        self.spec = spec
        if params is None:
            params = self._init_params(seed, dtype)
        self.params = params
        self._cache = None

    def _init_params(self, seed, dtype):
        s = self.spec
        seeds = np.random.SeedSequence(seed).spawn(6)
        conv = lambda f: L.LayerSpec("conv2d", kernel=s.kernel, filters=f)
        p = {}
        for k, v in L.xavier_init(L.LayerSpec("batchnorm"), 1, seeds[0], dtype).items():
            p[f"bn.{k}"] = v
        in_ch = 1
        for i, f in enumerate(s.filters):
            for k, v in L.xavier_init(conv(f), in_ch, seeds[1 + i], dtype).items():
                p[f"conv{i + 1}.{k}"] = v
            in_ch = f
        for k, v in L.xavier_init(L.LayerSpec("dense", units=s.fc_units), s.flat_dim, seeds[4], dtype).items():
            p[f"fc.{k}"] = v
        for k, v in L.xavier_init(L.LayerSpec("dense", units=s.n_outputs), s.fc_units, seeds[5], dtype).items():
            p[f"head.{k}"] = v
        return p

    @property
    def trainable(self):
        return [k for k in self.params if not k.startswith("bn.running")]

    @property
    def no_decay(self):
        return {"bn.gamma", "bn.beta"}

    def _check_input(self, x):
        S = self.spec.image_size
        if x.ndim != 4 or x.shape[1:] != (1, S, S):
            raise ShapeError(f"CNN input: expected (B, 1, {S}, {S}), got {x.shape}")

    def forward(self, x, train=False, rng=None, return_features=False):
        """Returns (B, 2) valence/arousal, or (B, 8) class probabilities.

        With ``return_features`` the post-ReLU FC activations are returned
        instead of the head output.
        """
        self._check_input(x)
        p = self.params
        mode = "train" if train else "eval"
        cache = {}
        h, cache["bn"] = L.batchnorm_forward(x, p["bn.gamma"], p["bn.beta"],
                                             p["bn.running_mean"], p["bn.running_var"], mode)
        for i in (1, 2, 3):
            cache[f"conv{i}.in"] = h
            h = L.conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
            cache[f"relu{i}.in"] = h
            h = L.relu(h)
            if i < 3:
                h, cache[f"pool{i}"] = L.maxpool2x2(h)
            else:
                cache["qpool.shape"] = h.shape
                h = L.quadrant_pool(h)
        flat = h.reshape(h.shape[0], -1)
        cache["fc.in"] = flat
        h = L.dense_forward(flat, p["fc.w"], p["fc.b"])
        cache["fc.relu_in"] = h
        feats = L.relu(h)
        if return_features:
            return feats
        h, cache["dropout"] = L.dropout(feats, self.spec.drop_prob, mode, rng)
        cache["head.in"] = h
        out = L.dense_forward(h, p["head.w"], p["head.b"])
        if self.spec.head == "classification":
            out = L.softmax(out)
        self._cache = cache
        return out

    def backward(self, grad_out):
        """Gradients of every trainable parameter from the last forward call.

        For the classification head ``grad_out`` is taken w.r.t. the logits
        (fused softmax + cross-entropy), not the probabilities.
        """
        c = self._cache
        if c is None:
            raise RuntimeError("backward called before forward")
        p = self.params
        g = {}
        dh, g["head.w"], g["head.b"] = L.dense_backward(grad_out, c["head.in"], p["head.w"])
        dh = L.dropout_backward(dh, c["dropout"])
        dh = L.relu_backward(dh, c["fc.relu_in"])
        dh, g["fc.w"], g["fc.b"] = L.dense_backward(dh, c["fc.in"], p["fc.w"])
        shape = c["qpool.shape"]
        dh = L.quadrant_pool_backward(dh.reshape(shape[0], shape[1], 2, 2), shape)
        for i in (3, 2, 1):
            if i < 3:
                dh = L.maxpool2x2_backward(dh, c[f"pool{i}"])
            dh = L.relu_backward(dh, c[f"relu{i}.in"])
            dh, g[f"conv{i}.w"], g[f"conv{i}.b"] = L.conv2d_backward(dh, c[f"conv{i}.in"], p[f"conv{i}.w"])
        _, g["bn.gamma"], g["bn.beta"] = L.batchnorm_backward(dh, c["bn"])
        return g

    def predict(self, x, batch_size=64):
        outs = [self.forward(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
        self._cache = None
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.n_outputs), np.float32)

    def features(self, x, batch_size=64):
        """Eval-mode FC activations (after ReLU, before dropout)."""
        outs = [self.forward(x[s:s + batch_size], return_features=True)
                for s in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.fc_units), np.float32)
