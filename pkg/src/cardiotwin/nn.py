"""Small dense networks in numpy with exact reverse-mode gradients.

Used for both the forward surrogate (parameters -> volumes) and the inverse
backbone (measurement -> parameters).  Inputs are processed in batches of
shape ``(n, in_dim)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "range_sigmoid")


class TrainingError(RuntimeError):
    pass


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def range_sigmoid(raw, lo, hi):
    """Map an unbounded value into ``(lo, hi)``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo >= hi):
        raise ValueError("range_sigmoid needs lo < hi")
    out = _squash(sigmoid(raw), lo, hi)
    return float(out) if np.ndim(out) == 0 else out


def _squash(s, lo, hi):
    # sigmoid rounds to exactly 0 or 1 for large |raw|; stay one ulp inside
    return np.clip(lo + (hi - lo) * s, np.nextafter(lo, hi), np.nextafter(hi, lo))


@dataclass(frozen=True)
class Mlp:
    """Feedforward network.

    ``weights[l]`` has shape ``(dims[l+1], dims[l])``.  Inputs are first
    mapped through ``(x - in_shift) * in_scale``.  The ``range_sigmoid`` head
    squashes each output into ``(head_lo, head_hi)``.
    """

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"
    head: str = "linear"
    head_lo: np.ndarray | None = None
    head_hi: np.ndarray | None = None
    in_shift: np.ndarray | None = None
    in_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        if len(ws) != len(dims) - 1 or len(bs) != len(ws):
            raise ValueError("one weight matrix and bias per layer required")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} shape mismatch: {w.shape}, {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite weights")
        for arr in ws + bs:
            arr.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        if self.head == "range_sigmoid":
            if self.head_lo is None or self.head_hi is None:
                raise ValueError("range_sigmoid head needs bounds")
            lo = np.broadcast_to(np.asarray(self.head_lo, dtype=float), (dims[-1],)).copy()
            hi = np.broadcast_to(np.asarray(self.head_hi, dtype=float), (dims[-1],)).copy()
            if np.any(lo >= hi):
                raise ValueError("head bounds need lo < hi")
            object.__setattr__(self, "head_lo", lo)
            object.__setattr__(self, "head_hi", hi)
        shift = np.zeros(dims[0]) if self.in_shift is None else np.asarray(self.in_shift, dtype=float)
        scale = np.ones(dims[0]) if self.in_scale is None else np.asarray(self.in_scale, dtype=float)
        object.__setattr__(self, "in_shift", np.broadcast_to(shift, (dims[0],)).copy())
        object.__setattr__(self, "in_scale", np.broadcast_to(scale, (dims[0],)).copy())

    @classmethod
    def init(cls, dims: Sequence[int], seed: int, activation: str = "tanh", head: str = "linear",
             **kwargs) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(dims), tuple(weights), tuple(biases), activation, head, **kwargs)

    @property
    def params(self) -> list[np.ndarray]:
        """Flat parameter list: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, flat: Sequence[np.ndarray]) -> "Mlp":
        return replace(self, weights=tuple(flat[0::2]), biases=tuple(flat[1::2]))

    def __call__(self, x):
        return forward(self, x)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "activation": self.activation,
            "head": self.head,
            "head_lo": None if self.head_lo is None else self.head_lo.tolist(),
            "head_hi": None if self.head_hi is None else self.head_hi.tolist(),
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        allowed = {"dims", "activation", "head", "head_lo", "head_hi", "in_shift", "in_scale",
                   "weights", "biases"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown checkpoint keys {sorted(unknown)}")
        return cls(
            dims=tuple(data["dims"]),
            weights=tuple(np.array(w, dtype=float).reshape(o, i)
                          for w, i, o in zip(data["weights"], data["dims"][:-1], data["dims"][1:])),
            biases=tuple(np.array(b, dtype=float) for b in data["biases"]),
            activation=data["activation"],
            head=data["head"],
            head_lo=data.get("head_lo"),
            head_hi=data.get("head_hi"),
            in_shift=data.get("in_shift"),
            in_scale=data.get("in_scale"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        return cls.from_dict(json.loads(text))


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(float)


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.dims[0]:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.dims[0]}")
    return x, single


def _forward_cache(net: Mlp, x: np.ndarray):
    a = (x - net.in_shift) * net.in_scale
    cache = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        a_next = z if i == last else _act(net.activation, z)
        cache.append((a, z, a_next))
        a = a_next
    if net.head == "range_sigmoid":
        s = sigmoid(a)
        out = _squash(s, net.head_lo, net.head_hi)
    else:
        s = None
        out = a
    return out, (cache, s)


def forward(net: Mlp, x) -> np.ndarray:
    """Network output for one input vector or a batch of rows."""
    x, single = _as_batch(net, x)
    out, _ = _forward_cache(net, x)
    return out[0] if single else out


def _backward(net: Mlp, state, d_out: np.ndarray):
    """Gradients of a scalar loss wrt parameters and inputs, given dL/d(output)."""
    cache, s = state
    if net.head == "range_sigmoid":
        d = d_out * (net.head_hi - net.head_lo) * s * (1.0 - s)
    else:
        d = d_out
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        a_in, z, a_out = cache[i]
        if i != last:
            d = d * _act_grad(net.activation, z, a_out)
        grads[2 * i] = d.T @ a_in
        grads[2 * i + 1] = d.sum(axis=0)
        d = d @ net.weights[i]
    d_x = d * net.in_scale
    return grads, d_x


def loss_and_grad(net: Mlp, inputs, targets, frozen_tail: Mlp | None = None):
    """Mean squared error over all batch entries and its exact gradient.

    With ``frozen_tail`` the loss is taken on ``frozen_tail(net(inputs))``;
    gradients flow through the tail but only ``net``'s gradients are returned.
    """
    x, _ = _as_batch(net, inputs)
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    if len(x) == 0:
        raise ValueError("empty batch")
    out, state = _forward_cache(net, x)
    if frozen_tail is not None:
        if frozen_tail.dims[0] != net.dims[-1]:
            raise ValueError("frozen tail input dim does not match network output")
        pred, tail_state = _forward_cache(frozen_tail, out)
    else:
        pred = out
    if y.shape != pred.shape:
        raise ValueError(f"target shape {y.shape} does not match prediction {pred.shape}")
    err = pred - y
    loss = float(np.mean(err * err))
    d_pred = 2.0 * err / err.size
    if frozen_tail is not None:
        _, d_pred = _backward(frozen_tail, tail_state, d_pred)
    grads, _ = _backward(net, state, d_pred)
    return loss, grads


def mse(net: Mlp, inputs, targets, frozen_tail: Mlp | None = None) -> float:
    pred = forward(net, inputs)
    if frozen_tail is not None:
        pred = forward(frozen_tail, pred)
    err = np.atleast_2d(pred) - np.atleast_2d(targets)
    return float(np.mean(err * err))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 100
    epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "mse"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "mse":
            raise ValueError("only mse loss is supported")


@dataclass
class TrainResult:
    net: Mlp
    history: list[float] = field(default_factory=list)


def train(net: Mlp, inputs, targets, config: TrainConfig, frozen_tail: Mlp | None = None) -> TrainResult:
    """Minibatch training; returns a new network and the per-epoch full-data loss."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng(config.seed)
    params = [p.copy() for p in net.params]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    history = []
    current = net
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        for b, lo in enumerate(range(0, len(x), config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            loss, grads = loss_and_grad(current, x[idx], y[idx], frozen_tail)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            step += 1
            if config.optimizer == "adam":
                c1 = 1.0 - config.beta1**step
                c2 = 1.0 - config.beta2**step
                for p, g, mi, vi in zip(params, grads, m, v):
                    mi *= config.beta1
                    mi += (1.0 - config.beta1) * g
                    vi *= config.beta2
                    vi += (1.0 - config.beta2) * g * g
                    p -= config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
            else:
                for p, g in zip(params, grads):
                    p -= config.lr * g
            current = current.with_params([p.copy() for p in params])
        epoch_loss = mse(current, x, y, frozen_tail)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss after epoch {epoch}")
        history.append(epoch_loss)
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6g", epoch, epoch_loss)
    return TrainResult(current, history)
