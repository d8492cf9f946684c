from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import LayoutMismatch, ShapeMismatch
from .layers import Dense, Layer

LOSSES = ("categorical_crossentropy", "mse")
_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ParamSlot:
    layer: int
    role: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParameterSet:
    """Flat copy of a model's trainable values plus the layout that produced them."""

    values: np.ndarray
    layout: tuple[ParamSlot, ...]

    def __len__(self) -> int:
        return int(self.values.size)

    def compatible(self, other: "ParameterSet") -> bool:
        return self.layout == other.layout

    def check_compatible(self, other: "ParameterSet") -> None:
        if not self.compatible(other):
            raise LayoutMismatch("parameter layouts differ")

    def tensor(self, layer: int, role: str) -> np.ndarray:
        for slot in self.layout:
            if slot.layer == layer and slot.role == role:
                return self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        raise KeyError((layer, role))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr([(s.layer, s.role, s.shape) for s in self.layout]).encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def with_values(self, values: np.ndarray) -> "ParameterSet":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise LayoutMismatch("value vector length does not match layout")
        return ParameterSet(values.copy(), self.layout)


def one_hot(codes: np.ndarray, num_classes: int) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 1:
        raise ShapeMismatch("class codes must be a 1-D array")
    if codes.size and (codes.min() < 0 or codes.max() >= num_classes):
        raise ShapeMismatch(f"class code out of range for {num_classes} classes")
    out = np.zeros((codes.size, num_classes))
    out[np.arange(codes.size), codes] = 1.0
    return out


class SequentialModel:
    """Ordered stack of layers with one flat parameter buffer.

    ``input_shape`` excludes the batch axis: ``(features,)`` for dense-first
    models, ``(time_steps, features)`` for recurrent-first models.
    """

    def __init__(self, layers: list[Layer], loss: str, input_shape: tuple[int, ...], seed: int = 0) -> None:
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        if not layers:
            raise ValueError("a model needs at least one layer")
        self.layers = list(layers)
        self.loss = loss
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = seed
        self.trained = False

        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape)
        self.output_shape = shape

        slots = []
        offset = 0
        for idx, layer in enumerate(self.layers):
            for role, pshape in layer.param_specs():
                slots.append(ParamSlot(idx, role, tuple(pshape), offset))
                offset += int(np.prod(pshape))
        self.layout = tuple(slots)
        self.params = np.zeros(offset)
        self.grads = np.zeros(offset)
        for idx, layer in enumerate(self.layers):
            mine = [s for s in slots if s.layer == idx]
            layer.bind(
                {s.role: self.params[s.offset:s.offset + s.size].reshape(s.shape) for s in mine},
                {s.role: self.grads[s.offset:s.offset + s.size].reshape(s.shape) for s in mine},
            )
        self.reinitialize(seed)

    def reinitialize(self, seed: int) -> None:
        self.seed = seed
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.initialize(rng)
        self.trained = False

    def count_params(self) -> int:
        return int(self.params.size)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"expected batch of shape [N x {' x '.join(map(str, self.input_shape))}], got {list(x.shape)}")
        return x

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        out = self._check_input(x)
        for layer in self.layers:
            out = layer.forward(out, train, rng)
        return out

    def _fused_softmax(self) -> bool:
        last = self.layers[-1]
        return self.loss == "categorical_crossentropy" and isinstance(last, Dense) and last.activation == "softmax"

    def loss_value(self, outputs: np.ndarray, targets: np.ndarray) -> float:
        if self.loss == "mse":
            return float(np.mean((outputs - targets) ** 2))
        p = np.clip(outputs, _LOG_FLOOR, 1.0)
        return float(-np.sum(targets * np.log(p)) / outputs.shape[0])

    def loss_grad(self, outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
        if self.loss == "mse":
            return 2.0 * (outputs - targets) / outputs.size
        if self._fused_softmax():
            return (outputs - targets) / outputs.shape[0]
        return -targets / np.clip(outputs, _LOG_FLOOR, None) / outputs.shape[0]

    def backward(self, dloss: np.ndarray) -> None:
        """Backpropagate d(loss)/d(output); fills ``self.grads``.

        For a softmax head under cross-entropy, ``dloss`` is taken to be the
        gradient with respect to the logits (what ``loss_grad`` returns).
        """
        grad = dloss
        for pos in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[pos]
            if pos == len(self.layers) - 1 and self._fused_softmax():
                grad = layer.backward(grad, from_logits=True)
            else:
                grad = layer.backward(grad)

    def prepare_targets(self, targets: np.ndarray) -> np.ndarray:
        if self.loss == "categorical_crossentropy":
            targets = np.asarray(targets)
            if targets.ndim == 1:
                return one_hot(targets, self.output_shape[-1])
        return np.asarray(targets, dtype=np.float64)

    def loss_and_grad(self, x: np.ndarray, targets: np.ndarray, rng: np.random.Generator | None = None, train: bool = True) -> float:
        out = self.forward(x, train=train, rng=rng)
        if out.shape != targets.shape:
            raise ShapeMismatch(f"targets {targets.shape} do not match outputs {out.shape}")
        loss = self.loss_value(out, targets)
        self.backward(self.loss_grad(out, targets))
        return loss

    def predict(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        x = self._check_input(x)
        if len(x) <= batch_size:
            return self.forward(x)
        return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def evaluate_loss(self, x: np.ndarray, targets: np.ndarray, batch_size: int = 4096) -> float:
        targets = self.prepare_targets(targets)
        total = 0.0
        for i in range(0, len(x), batch_size):
            out = self.forward(x[i:i + batch_size])
            total += self.loss_value(out, targets[i:i + batch_size]) * len(out)
        return total / len(x)

    def get_parameters(self) -> ParameterSet:
        return ParameterSet(self.params.copy(), self.layout)

    def set_parameters(self, ps: ParameterSet) -> None:
        if ps.layout != self.layout:
            raise LayoutMismatch("parameter layout does not match this model")
        self.params[...] = ps.values

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "loss": self.loss,
            "layers": [layer.config() for layer in self.layers],
        }

    def summary(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(layer.kind, layer.output_shape, layer.count_params()) for layer in self.layers]


def count_params(model: SequentialModel) -> int:
    return model.count_params()
