"""Index network f_theta: 5 -> 32 -> 8 -> 1, tanh hidden units, plain numpy.

Parameters live in one flat float64 vector laid out as
``W1 (5x32, row-major), b1 (32), W2 (32x8), b2 (8), W3 (8x1), b3 (1)``;
gradients and Adam moments share that layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FEATURES = 5
HIDDEN = (32, 8)
SHAPES = ((N_FEATURES, HIDDEN[0]), (HIDDEN[0],), (HIDDEN[0], HIDDEN[1]), (HIDDEN[1],), (HIDDEN[1], 1), (1,))
N_PARAMS = sum(int(np.prod(s)) for s in SHAPES)  # 465
MODEL_FORMAT = "whittle-index-net"
MODEL_VERSION = 1
PROB_CLAMP = 1e-12


class ModelFormatError(ValueError):
    pass


def _offsets():
    out, pos = [], 0
    for s in SHAPES:
        n = int(np.prod(s))
        out.append((pos, pos + n, s))
        pos += n
    return out


_OFFSETS = _offsets()


@dataclass
class AdamState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(N_PARAMS))
    v: np.ndarray = field(default_factory=lambda: np.zeros(N_PARAMS))
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class WhittleNetwork:
    def __init__(self, theta: np.ndarray | None = None, *, input_scale=None, input_offset=None,
                 class_id: str = "", adam: AdamState | None = None):
        self.theta = np.zeros(N_PARAMS) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (N_PARAMS,):
            raise ValueError(f"theta must have {N_PARAMS} entries")
        self.input_scale = np.ones(N_FEATURES) if input_scale is None else np.array(input_scale, dtype=float)
        self.input_offset = np.zeros(N_FEATURES) if input_offset is None else np.array(input_offset, dtype=float)
        self.class_id = class_id
        self.adam = adam or AdamState()
        self._unpack()

    @classmethod
    def init(cls, rng: np.random.Generator, **kw) -> "WhittleNetwork":
        """Xavier-uniform hidden layers, zero output layer (f == 0 everywhere)."""
        theta = np.zeros(N_PARAMS)
        for (lo, hi, shape), k in zip(_OFFSETS, range(len(SHAPES))):
            if k in (0, 2):
                fan_in, fan_out = shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                theta[lo:hi] = rng.uniform(-a, a, size=hi - lo)
        return cls(theta, **kw)

    @classmethod
    def for_features(cls, rng: np.random.Generator, *, max_buffer: float, tsls_bound: float,
                     class_id: str = "") -> "WhittleNetwork":
        scale = np.array([1.0 / max_buffer, 1.0 / 15.0, 1.0 / tsls_bound, 1.0, 1.0])
        return cls.init(rng, input_scale=scale, class_id=class_id)

    def _unpack(self):
        # views into theta, so in-place updates to theta are seen here
        self.W1, self.b1, self.W2, self.b2, self.W3, self.b3 = (
            self.theta[lo:hi].reshape(shape) for lo, hi, shape in _OFFSETS
        )

    def copy(self) -> "WhittleNetwork":
        adam = AdamState(self.adam.m.copy(), self.adam.v.copy(), self.adam.t,
                         self.adam.beta1, self.adam.beta2, self.adam.eps)
        return WhittleNetwork(self.theta.copy(), input_scale=self.input_scale.copy(),
                              input_offset=self.input_offset.copy(), class_id=self.class_id, adam=adam)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_offset) * self.input_scale

    def _hidden(self, z: np.ndarray):
        h1 = np.tanh(z @ self.W1 + self.b1)
        h2 = np.tanh(h1 @ self.W2 + self.b2)
        return h1, h2

    def forward(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} features, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        _, h2 = self._hidden(self.normalize(x))
        return float(h2 @ self.W3[:, 0] + self.b3[0])

    def forward_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != N_FEATURES:
            raise ValueError(f"expected (n, {N_FEATURES}) inputs")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite network input")
        _, h2 = self._hidden(self.normalize(X))
        return h2 @ self.W3[:, 0] + self.b3[0]

    def index(self, state) -> float:
        """Index of a UEState-like object (anything with ``as_vector``)."""
        return self.forward(state.as_vector())

    def weighted_grad(self, X, coeffs) -> np.ndarray:
        """sum_i coeffs[i] * d f(X[i]) / d theta, as a flat vector."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        c = np.asarray(coeffs, dtype=float).reshape(-1)
        z = self.normalize(X)
        h1, h2 = self._hidden(z)
        g = np.empty(N_PARAMS)
        # output layer
        d3 = c  # df/d(out) = 1 per sample
        gW3 = h2.T @ d3
        gb3 = d3.sum()
        d2 = np.outer(d3, self.W3[:, 0]) * (1.0 - h2 * h2)
        gW2 = h1.T @ d2
        gb2 = d2.sum(axis=0)
        d1 = (d2 @ self.W2.T) * (1.0 - h1 * h1)
        gW1 = z.T @ d1
        gb1 = d1.sum(axis=0)
        for (lo, hi, _), part in zip(_OFFSETS, (gW1, gb1, gW2, gb2, gW3, [gb3])):
            g[lo:hi] = np.ravel(part)
        return g

    def grad(self, x) -> np.ndarray:
        return self.weighted_grad(np.asarray(x, dtype=float)[None, :], [1.0])

    # serialization -------------------------------------------------------

    def to_dict(self, with_optimizer: bool = True) -> dict:
        layers = []
        for k in range(0, len(SHAPES), 2):
            (lo, hi, shape), (blo, bhi, _) = _OFFSETS[k], _OFFSETS[k + 1]
            layers.append({"shape": list(shape), "weights": self.theta[lo:hi].tolist(),
                           "bias": self.theta[blo:bhi].tolist()})
        d = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "class_id": self.class_id,
            "activation": "tanh",
            "input_scale": self.input_scale.tolist(),
            "input_offset": self.input_offset.tolist(),
            "layers": layers,
        }
        if with_optimizer:
            d["adam"] = {"t": self.adam.t, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                         "eps": self.adam.eps, "m": self.adam.m.tolist(), "v": self.adam.v.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WhittleNetwork":
        if d.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"not a {MODEL_FORMAT} file (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
        if d.get("activation") != "tanh":
            raise ModelFormatError(f"unsupported activation {d.get('activation')!r}")
        layers = d["layers"]
        if [tuple(l["shape"]) for l in layers] != [SHAPES[k] for k in range(0, len(SHAPES), 2)]:
            raise ModelFormatError("layer shapes do not match 5-32-8-1")
        theta = np.concatenate([np.concatenate([np.asarray(l["weights"], float), np.asarray(l["bias"], float)])
                                for l in layers])
        adam = None
        if "adam" in d:
            a = d["adam"]
            adam = AdamState(np.asarray(a["m"], float), np.asarray(a["v"], float), int(a["t"]),
                             a["beta1"], a["beta2"], a["eps"])
        return cls(theta, input_scale=d["input_scale"], input_offset=d["input_offset"],
                   class_id=d.get("class_id", ""), adam=adam)

    def save(self, path: str | Path, with_optimizer: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(with_optimizer), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "WhittleNetwork":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: {e}") from None
        return cls.from_dict(d)


def action_prob(index: float | np.ndarray, lam: float, m: float) -> float | np.ndarray:
    """Scaled sigmoid 1 / (1 + exp(-m (index - lam))), kept inside [1e-12, 1 - 1e-12]."""
    if m <= 0:
        raise ValueError("sigmoid sharpness m must be positive")
    x = m * (np.asarray(index, dtype=float) - lam)
    p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(p) if p.ndim == 0 else p


def score_coeff(index, lam: float, m: float, action) -> np.ndarray:
    """d/d(index) of log pi(action); (a - p) * m by the chain rule."""
    p = 1.0 / (1.0 + np.exp(-m * (np.asarray(index, dtype=float) - lam)))
    return (np.asarray(action, dtype=float) - p) * m


def logprob_grad(net: WhittleNetwork, x, lam: float, m: float, action: int) -> np.ndarray:
    """Gradient of ln sigma_m(f - lam) (action 1) or ln(1 - sigma_m(f - lam)) (action 0)."""
    if action not in (0, 1):
        raise ValueError("action must be 0 or 1")
    f = net.forward(x)
    return net.weighted_grad(np.asarray(x, dtype=float)[None, :], [score_coeff(f, lam, m, action)])


def adam_step(net: WhittleNetwork, grad: np.ndarray, lr: float) -> WhittleNetwork:
    """One Adam update applied as gradient ascent; parameters untouched on bad input."""
    g = np.asarray(grad, dtype=float)
    if g.shape != (N_PARAMS,):
        raise ValueError(f"gradient must have {N_PARAMS} entries")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient; parameters left unchanged")
    a = net.adam
    a.t += 1
    a.m *= a.beta1
    a.m += (1.0 - a.beta1) * g
    a.v *= a.beta2
    a.v += (1.0 - a.beta2) * g * g
    m_hat = a.m / (1.0 - a.beta1 ** a.t)
    v_hat = a.v / (1.0 - a.beta2 ** a.t)
    net.theta += lr * m_hat / (np.sqrt(v_hat) + a.eps)
    return net
