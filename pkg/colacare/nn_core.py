"""
Neural Network Core Module
Minimal differentiable building blocks for the expert models and fusion network.

This module provides:
- A 2-D tensor carrier with gradient storage
- An explicit computation tape with reverse-mode gradients
- Linear, GRU cell, attention pooling and squeeze-style gate layers
- Binary cross-entropy loss
- A decoupled-weight-decay (AdamW) optimizer over a named parameter store
- JSON parameter checkpoints

Author: ColaCare Research Team
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SIGMOID_CLAMP = 30.0
MASK_NEG = -1e9


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when training produces non-finite values."""


class Tensor:
    """2-D float64 matrix that may carry a gradient."""

    def __init__(self, data, name: Optional[str] = None, requires_grad: bool = False):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {array.shape}")
        self.data = array
        self.name = name
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(name={self.name}, shape={self.shape})"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    for dim in (0, 1):
        if a.shape[dim] != b.shape[dim] and 1 not in (a.shape[dim], b.shape[dim]):
            raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    clipped = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-clipped))


class Tape:
    """
    Records operations in execution order so gradients can be replayed backwards.

    A tape created with ``record=False`` computes values only; it is used for
    inference and for the many model evaluations of Shapley attribution.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: List[Tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self):
        return len(self._nodes)

    def _push(self, out: Tensor, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
        if self.record and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._nodes.append((out, backward_fn))
        return out

    @staticmethod
    def _accumulate(tensor: Tensor, grad: np.ndarray):
        if not tensor.requires_grad:
            return
        if tensor.grad is None:
            tensor.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            tensor.grad = tensor.grad + grad

    # -- elementwise and algebraic ops -------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.cols != b.rows:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out = Tensor(a.data @ b.data)

        def backward(g):
            self._accumulate(a, g @ b.data.T)
            self._accumulate(b, a.data.T @ g)

        return self._push(out, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape(a, b, "add")
        out = Tensor(a.data + b.data)

        def backward(g):
            self._accumulate(a, _unbroadcast(g, a.shape))
            self._accumulate(b, _unbroadcast(g, b.shape))

        return self._push(out, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape(a, b, "sub")
        out = Tensor(a.data - b.data)

        def backward(g):
            self._accumulate(a, _unbroadcast(g, a.shape))
            self._accumulate(b, _unbroadcast(-g, b.shape))

        return self._push(out, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape(a, b, "mul")
        out = Tensor(a.data * b.data)

        def backward(g):
            self._accumulate(a, _unbroadcast(g * b.data, a.shape))
            self._accumulate(b, _unbroadcast(g * a.data, b.shape))

        return self._push(out, (a, b), backward)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        out = Tensor(a.data * factor)

        def backward(g):
            self._accumulate(a, g * factor)

        return self._push(out, (a,), backward)

    def one_minus(self, a: Tensor) -> Tensor:
        out = Tensor(1.0 - a.data)

        def backward(g):
            self._accumulate(a, -g)

        return self._push(out, (a,), backward)

    def square(self, a: Tensor) -> Tensor:
        out = Tensor(a.data ** 2)

        def backward(g):
            self._accumulate(a, 2.0 * a.data * g)

        return self._push(out, (a,), backward)

    def sigmoid(self, a: Tensor) -> Tensor:
        s = stable_sigmoid(a.data)
        out = Tensor(s)

        def backward(g):
            # clamped region has zero slope
            inside = np.abs(a.data) <= SIGMOID_CLAMP
            self._accumulate(a, g * s * (1.0 - s) * inside)

        return self._push(out, (a,), backward)

    def tanh(self, a: Tensor) -> Tensor:
        t = np.tanh(a.data)
        out = Tensor(t)

        def backward(g):
            self._accumulate(a, g * (1.0 - t ** 2))

        return self._push(out, (a,), backward)

    def softmax(self, a: Tensor, bias: Optional[np.ndarray] = None) -> Tensor:
        """Row-wise softmax; ``bias`` is a constant additive mask."""
        z = a.data if bias is None else a.data + bias
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        out = Tensor(s)

        def backward(g):
            inner = (g * s).sum(axis=1, keepdims=True)
            self._accumulate(a, s * (g - inner))

        return self._push(out, (a,), backward)

    # -- structural ops ------------------------------------------------------------

    def concat(self, parts: List[Tensor]) -> Tensor:
        """Concatenate along columns."""
        rows = {p.rows for p in parts}
        if len(rows) != 1:
            raise DimensionError(f"concat: row counts differ {sorted(rows)}")
        out = Tensor(np.concatenate([p.data for p in parts], axis=1))
        widths = [p.cols for p in parts]

        def backward(g):
            start = 0
            for part, width in zip(parts, widths):
                self._accumulate(part, g[:, start:start + width])
                start += width

        return self._push(out, tuple(parts), backward)

    def column(self, a: Tensor, index: int) -> Tensor:
        out = Tensor(a.data[:, index:index + 1])

        def backward(g):
            full = np.zeros_like(a.data)
            full[:, index:index + 1] = g
            self._accumulate(a, full)

        return self._push(out, (a,), backward)

    def sum_rows(self, a: Tensor) -> Tensor:
        """Sum over columns giving a (rows, 1) tensor."""
        out = Tensor(a.data.sum(axis=1, keepdims=True))

        def backward(g):
            self._accumulate(a, np.broadcast_to(g, a.shape))

        return self._push(out, (a,), backward)

    def mean(self, a: Tensor) -> Tensor:
        n = a.data.size
        out = Tensor(np.array([[a.data.mean()]]))

        def backward(g):
            self._accumulate(a, np.full(a.shape, g[0, 0] / n))

        return self._push(out, (a,), backward)

    def bce(self, probs: Tensor, labels: np.ndarray, eps: float = 1e-7) -> Tensor:
        """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
        y = np.asarray(labels, dtype=np.float64).reshape(probs.shape)
        p = np.clip(probs.data, eps, 1.0 - eps)
        loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean()
        out = Tensor(np.array([[loss]]))
        n = p.size
        inside = (probs.data > eps) & (probs.data < 1.0 - eps)

        def backward(g):
            grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / n
            self._accumulate(probs, g[0, 0] * grad * inside)

        return self._push(out, (probs,), backward)

    # -- reverse pass --------------------------------------------------------------

    def backward(self, output: Tensor, upstream: Optional[np.ndarray] = None) -> None:
        if not self.record:
            raise RuntimeError("Tape was created with record=False")
        seed = np.ones_like(output.data) if upstream is None else np.asarray(upstream, dtype=np.float64)
        if seed.shape != output.shape:
            raise DimensionError(f"upstream gradient shape {seed.shape} != output {output.shape}")
        output.grad = seed.copy()
        for node, backward_fn in reversed(self._nodes):
            if node.grad is not None:
                backward_fn(node.grad)


# -- layers ------------------------------------------------------------------------------

def forward_linear(tape: Tape, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x W + b with W shaped (in, out) and b shaped (1, out)."""
    if x.cols != weight.rows:
        raise DimensionError(f"linear: input width {x.cols} != weight rows {weight.rows}")
    return tape.add(tape.matmul(x, weight), bias)


def forward_gru_cell(tape: Tape, x: Tensor, h: Tensor, params: Dict[str, Tensor], prefix: str = "gru") -> Tensor:
    """
    One GRU step.

    z = σ(x Wz + h Uz + bz), r = σ(x Wr + h Ur + br),
    n = tanh(x Wn + (r ⊙ h) Un + bn), h' = (1 - z) ⊙ n + z ⊙ h
    """
    p = lambda key: params[f"{prefix}.{key}"]
    z = tape.sigmoid(tape.add(forward_linear(tape, x, p("Wz"), p("bz")), tape.matmul(h, p("Uz"))))
    r = tape.sigmoid(tape.add(forward_linear(tape, x, p("Wr"), p("br")), tape.matmul(h, p("Ur"))))
    n = tape.tanh(tape.add(forward_linear(tape, x, p("Wn"), p("bn")), tape.matmul(tape.mul(r, h), p("Un"))))
    return tape.add(tape.mul(tape.one_minus(z), n), tape.mul(z, h))


def forward_attention_pool(tape: Tape, states: List[Tensor], params: Dict[str, Tensor],
                           mask_bias: Optional[np.ndarray] = None,
                           prefix: str = "attn") -> Tuple[Tensor, Tensor]:
    """
    Softmax attention over time.

    Returns the pooled (B, H) representation and the (B, T) attention weights.
    ``mask_bias`` is a constant (B, T) matrix added to the scores.
    """
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    scores = tape.concat([forward_linear(tape, h, w, b) for h in states])
    weights = tape.softmax(scores, bias=mask_bias)
    pooled = None
    for t, h in enumerate(states):
        term = tape.mul(tape.column(weights, t), h)
        pooled = term if pooled is None else tape.add(pooled, term)
    return pooled, weights


def forward_gate(tape: Tape, summary: Tensor, params: Dict[str, Tensor], prefix: str = "gate") -> Tensor:
    """Squeeze-style per-feature gate g = σ(tanh(s W1 + b1) W2 + b2), entries in (0, 1)."""
    hidden = tape.tanh(forward_linear(tape, summary, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return tape.sigmoid(forward_linear(tape, hidden, params[f"{prefix}.W2"], params[f"{prefix}.b2"]))


def backward(tape: Tape, output: Tensor, upstream: Optional[np.ndarray] = None,
             params: Optional[Dict[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """
    Run the reverse pass and collect gradients per named parameter.

    Parameters not touched by the forward pass get a zero gradient.
    """
    if params is not None:
        for tensor in params.values():
            tensor.zero_grad()
    tape.backward(output, upstream)
    if params is None:
        return {}
    return {
        name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
        for name, tensor in params.items()
    }


# -- parameters and optimizer ------------------------------------------------------------

@dataclass
class ParamStore:
    """Named parameters plus AdamW moment estimates."""
    params: Dict[str, Tensor] = field(default_factory=dict)
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"Duplicate parameter name: {name}")
        tensor = Tensor(data, name=name, requires_grad=True)
        self.params[name] = tensor
        self.first_moment[name] = np.zeros_like(tensor.data)
        self.second_moment[name] = np.zeros_like(tensor.data)
        return tensor

    def init_uniform(self, name: str, shape: Tuple[int, int], rng: np.random.Generator,
                     fan_in: Optional[int] = None) -> Tensor:
        """Uniform initialization in ±1/sqrt(fan_in)."""
        bound = 1.0 / np.sqrt(fan_in if fan_in is not None else shape[0])
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params.keys())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, values: Dict[str, np.ndarray]):
        for name, data in values.items():
            self.params[name].data = data.copy()

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def optimizer_step(store: ParamStore, grads: Dict[str, np.ndarray], lr: float,
                   weight_decay: float = 0.01, betas: Tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> ParamStore:
    """
    One AdamW update applied in place.

    Weight decay is decoupled: parameters shrink by lr * weight_decay directly,
    independent of the gradient moments.
    """
    for name, grad in grads.items():
        if name not in store.params:
            raise KeyError(f"Gradient for unknown parameter {name}")
        if grad.shape != store.params[name].shape:
            raise DimensionError(f"Gradient shape {grad.shape} != parameter {name} {store.params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"Non-finite gradient for parameter {name}")

    beta1, beta2 = betas
    store.step += 1
    bias1 = 1.0 - beta1 ** store.step
    bias2 = 1.0 - beta2 ** store.step
    for name, grad in grads.items():
        param = store.params[name]
        param.data = param.data * (1.0 - lr * weight_decay)
        m = beta1 * store.first_moment[name] + (1.0 - beta1) * grad
        v = beta2 * store.second_moment[name] + (1.0 - beta2) * grad ** 2
        store.first_moment[name] = m
        store.second_moment[name] = v
        param.data = param.data - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return store


# -- checkpoints -------------------------------------------------------------------------

def save_params(store: ParamStore, path: str):
    """Write a JSON map name -> {shape, data}."""
    payload = {
        name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
        for name, t in store.params.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f)
    logger.info(f"Saved {len(payload)} parameters to {path}")


def load_params(path: str) -> ParamStore:
    with open(path, "r") as f:
        payload = json.load(f)
    store = ParamStore()
    for name, entry in payload.items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != shape[0] * shape[1]:
            raise DimensionError(f"Checkpoint entry {name}: {data.size} values for shape {shape}")
        store.add(name, data.reshape(shape))
    return store


def numerical_gradient(loss_fn: Callable[[], float], tensor: Tensor, index: Tuple[int, int],
                       h: float = 1e-4) -> float:
    """Central finite difference of ``loss_fn`` with respect to one entry."""
    original = tensor.data[index]
    tensor.data[index] = original + h
    plus = loss_fn()
    tensor.data[index] = original - h
    minus = loss_fn()
    tensor.data[index] = original
    return (plus - minus) / (2.0 * h)
