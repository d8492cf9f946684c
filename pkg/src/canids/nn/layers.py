"""Layer implementations for the numpy engine.

Every layer owns views into its model's flat parameter and gradient buffers,
so optimizers and federated averaging can work on a single contiguous vector.
Shapes exclude the batch dimension unless stated otherwise.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch

ACTIVATIONS = ("relu", "softmax", "linear", "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.input_shape: tuple[int, ...] | None = None
        self.output_shape: tuple[int, ...] | None = None
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def build(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        self.input_shape = tuple(input_shape)
        self.output_shape = self._infer_output(self.input_shape)
        return self.output_shape

    def _infer_output(self, input_shape):
        return input_shape

    def param_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def bind(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.params = params
        self.grads = grads

    def initialize(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"type": self.kind}

    def count_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_specs())


class Dense(Layer):
    """Fully connected layer; applied per time step on 3-D input."""

    kind = "dense"

    def __init__(self, units: int, activation: str = "linear") -> None:
        super().__init__()
        if units < 1:
            raise ValueError("units must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.units = units
        self.activation = activation
        self._cache = None

    def _infer_output(self, input_shape):
        return input_shape[:-1] + (self.units,)

    def param_specs(self):
        fan_in = self.input_shape[-1]
        return [("kernel", (fan_in, self.units)), ("bias", (self.units,))]

    def initialize(self, rng):
        fan_in = self.input_shape[-1]
        self.params["kernel"][...] = _glorot(rng, fan_in, self.units, (fan_in, self.units))
        self.params["bias"][...] = 0.0

    def forward(self, x, train, rng):
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])
        z = x2 @ self.params["kernel"] + self.params["bias"]
        if self.activation == "relu":
            a = np.maximum(z, 0.0)
        elif self.activation == "softmax":
            a = _softmax(z)
        elif self.activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
        self._cache = (x2, z, a, lead)
        return a.reshape(lead + (self.units,))

    def backward(self, dy, from_logits: bool = False):
        x2, z, a, lead = self._cache
        dy2 = dy.reshape(-1, self.units)
        if from_logits or self.activation == "linear":
            dz = dy2
        elif self.activation == "relu":
            dz = dy2 * (z > 0)
        elif self.activation == "tanh":
            dz = dy2 * (1.0 - a * a)
        else:
            dz = a * (dy2 - (dy2 * a).sum(axis=-1, keepdims=True))
        self.grads["kernel"][...] = x2.T @ dz
        self.grads["bias"][...] = dz.sum(axis=0)
        dx = dz @ self.params["kernel"].T
        return dx.reshape(lead + (x2.shape[-1],))

    def config(self):
        return {"type": self.kind, "units": self.units, "activation": self.activation}


class Lstm(Layer):
    """LSTM over [time x features] input with gates ordered input, forget, cell, output.

    ``activation`` is applied to the cell candidate and to the cell state before
    the output gate; gate nonlinearities are always the logistic sigmoid.
    """

    kind = "lstm"

    def __init__(self, units: int, return_sequences: bool = False, activation: str = "tanh") -> None:
        super().__init__()
        if units < 1:
            raise ValueError("units must be positive")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported LSTM activation {activation!r}")
        self.units = units
        self.return_sequences = return_sequences
        self.activation = activation
        self._cache = None

    def _infer_output(self, input_shape):
        if len(input_shape) != 2:
            raise ShapeMismatch(f"LSTM expects [time x features] input, got {input_shape}")
        steps = input_shape[0]
        return (steps, self.units) if self.return_sequences else (self.units,)

    def param_specs(self):
        d, u = self.input_shape[-1], self.units
        return [("kernel", (d, 4 * u)), ("recurrent_kernel", (u, 4 * u)), ("bias", (4 * u,))]

    def initialize(self, rng):
        d, u = self.input_shape[-1], self.units
        self.params["kernel"][...] = _glorot(rng, d, 4 * u, (d, 4 * u))
        self.params["recurrent_kernel"][...] = _glorot(rng, u, 4 * u, (u, 4 * u))
        bias = self.params["bias"]
        bias[...] = 0.0
        bias[u:2 * u] = 1.0

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z, a):
        return 1.0 - a * a if self.activation == "tanh" else (z > 0).astype(z.dtype)

    def forward(self, x, train, rng):
        batch, steps, dim = x.shape
        u = self.units
        w, rk, b = self.params["kernel"], self.params["recurrent_kernel"], self.params["bias"]
        xw = (x.reshape(batch * steps, dim) @ w).reshape(batch, steps, 4 * u) + b
        h = np.zeros((batch, u))
        c = np.zeros((batch, u))
        per_step = []
        hs = np.empty((batch, steps, u))
        for t in range(steps):
            z = xw[:, t] if t == 0 else xw[:, t] + h @ rk
            i = _sigmoid(z[:, :u])
            f = _sigmoid(z[:, u:2 * u])
            zg = z[:, 2 * u:3 * u]
            g = self._act(zg)
            o = _sigmoid(z[:, 3 * u:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            ac = self._act(c)
            h = o * ac
            hs[:, t] = h
            per_step.append((i, f, zg, g, o, c_prev, c, ac, h_prev))
        self._cache = (x, per_step)
        return hs if self.return_sequences else h

    def backward(self, dy):
        x, per_step = self._cache
        batch, steps, dim = x.shape
        u = self.units
        w, rk = self.params["kernel"], self.params["recurrent_kernel"]
        dz_all = np.empty((batch, steps, 4 * u))
        grad_rk = np.zeros_like(rk)
        dh_next = np.zeros((batch, u))
        dc_next = np.zeros((batch, u))
        for t in reversed(range(steps)):
            i, f, zg, g, o, c_prev, c, ac, h_prev = per_step[t]
            if self.return_sequences:
                dh = dy[:, t] + dh_next
            elif t == steps - 1:
                dh = dy + dh_next
            else:
                dh = dh_next
            do = dh * ac
            dc = dh * o * self._act_grad(c, ac) + dc_next
            dz = dz_all[:, t]
            dz[:, :u] = dc * g * i * (1.0 - i)
            dz[:, u:2 * u] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * u:3 * u] = dc * i * self._act_grad(zg, g)
            dz[:, 3 * u:] = do * o * (1.0 - o)
            dc_next = dc * f
            if t > 0:
                grad_rk += h_prev.T @ dz
                dh_next = dz @ rk.T
        dz2 = dz_all.reshape(batch * steps, 4 * u)
        self.grads["kernel"][...] = x.reshape(batch * steps, dim).T @ dz2
        self.grads["recurrent_kernel"][...] = grad_rk
        self.grads["bias"][...] = dz2.sum(axis=0)
        return (dz2 @ w.T).reshape(batch, steps, dim)

    def config(self):
        return {
            "type": self.kind,
            "units": self.units,
            "return_sequences": self.return_sequences,
            "activation": self.activation,
        }


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by 1/(1-rate) in training only."""

    kind = "dropout"

    def __init__(self, rate: float) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self._mask = None

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a random generator")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask

    def config(self):
        return {"type": self.kind, "rate": self.rate}


class RepeatVector(Layer):
    kind = "repeat_vector"

    def __init__(self, n: int) -> None:
        super().__init__()
        if n < 1:
            raise ValueError("repeat count must be positive")
        self.n = n

    def _infer_output(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeMismatch(f"RepeatVector expects a flat input, got {input_shape}")
        return (self.n, input_shape[0])

    def forward(self, x, train, rng):
        return np.repeat(x[:, None, :], self.n, axis=1)

    def backward(self, dy):
        return dy.sum(axis=1)

    def config(self):
        return {"type": self.kind, "n": self.n}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Lstm, Dropout, RepeatVector)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("type")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None
    return cls(**cfg)
