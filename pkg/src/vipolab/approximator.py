"""Small fully connected networks with hand-written backpropagation.

Parameters live in one flat vector (`ParamVector`) together with the layer
layout, which keeps optimisers, soft updates and finite-difference checks
trivial. Hidden layers use SiLU (x * sigmoid(x)): smooth everywhere, so
central differences are well conditioned. The output layer is linear.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

DEFAULT_HIDDEN = (64, 64)


@dataclass(frozen=True)
class Layout:
    sizes: tuple[int, ...]  # (input, hidden..., output)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidInputError(f"invalid layer sizes {self.sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def mlp(cls, n_in: int, n_out: int, hidden=DEFAULT_HIDDEN) -> "Layout":
        return cls((n_in, *hidden, n_out))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "activation": "silu"}


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.layout.n_params,):
            raise InvalidInputError(
                f"expected {self.layout.n_params} parameters, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("parameters must be finite")
        object.__setattr__(self, "values", values)

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def to_dict(self) -> dict:
        return {"layout": self.layout.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamVector":
        return cls(np.asarray(doc["values"], dtype=float), Layout(tuple(doc["layout"]["sizes"])))


def init_params(layout: Layout, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    chunks = []
    for n_in, n_out in zip(layout.sizes[:-1], layout.sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_out * n_in))
        chunks.append(rng.uniform(-bound, bound, size=n_out))
    return ParamVector(np.concatenate(chunks), layout)


def unpack(values: np.ndarray, layout: Layout):
    """List of (W, b) views into `values`; W has shape (out, in)."""
    layers, pos = [], 0
    for n_in, n_out in zip(layout.sizes[:-1], layout.sizes[1:]):
        W = values[pos:pos + n_out * n_in].reshape(n_out, n_in)
        pos += n_out * n_in
        b = values[pos:pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _as_batch(x, n_in: int):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != n_in:
        raise InvalidInputError(f"input dimension {x.shape} does not match layout input {n_in}")
    return X, single


def forward_batch(values: np.ndarray, layout: Layout, X: np.ndarray, cache: bool = False):
    """Forward pass on a (B, n_in) batch; optionally keep pre-activations."""
    layers = unpack(values, layout)
    h, pre, acts = X, [], [X]
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if i == len(layers) - 1:
            h = z
        else:
            pre.append(z)
            h = silu(z)
            acts.append(h)
    return (h, (pre, acts)) if cache else h


def backward_batch(values: np.ndarray, layout: Layout, cache, upstream: np.ndarray,
                   need_input: bool = False):
    """Gradient of sum(upstream * output) w.r.t. flat params (and the input)."""
    pre, acts = cache
    layers = unpack(values, layout)
    grads = []
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((delta.sum(axis=0), (delta.T @ acts[i]).ravel()))
        if i > 0 or need_input:
            delta = delta @ W
            if i > 0:
                delta = delta * silu_grad(pre[i - 1])
    flat = np.concatenate([part for b, w in reversed(grads) for part in (w, b)])
    return (flat, delta) if need_input else flat


def forward(params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (B, n_in) batch."""
    X, single = _as_batch(x, params.layout.n_in)
    out = forward_batch(params.values, params.layout, X)
    return out[0] if single else out


def _upstream_batch(upstream, n_out: int, batch: int):
    U = np.asarray(upstream, dtype=float)
    U = U[None, :] if U.ndim == 1 else U
    if U.shape != (batch, n_out):
        raise InvalidInputError(f"upstream shape {np.shape(upstream)} does not match output {n_out}")
    return U


def grad_params(params: ParamVector, x, upstream) -> ParamVector:
    """d(upstream . forward(params, x)) / d params, summed over a batch."""
    X, _ = _as_batch(x, params.layout.n_in)
    U = _upstream_batch(upstream, params.layout.n_out, len(X))
    _, cache = forward_batch(params.values, params.layout, X, cache=True)
    return params.replace(backward_batch(params.values, params.layout, cache, U))


def grad_input(params: ParamVector, x, upstream) -> np.ndarray:
    """d(upstream . forward(params, x)) / d x, row by row."""
    X, single = _as_batch(x, params.layout.n_in)
    U = _upstream_batch(upstream, params.layout.n_out, len(X))
    _, cache = forward_batch(params.values, params.layout, X, cache=True)
    _, gx = backward_batch(params.values, params.layout, cache, U, need_input=True)
    return gx[0] if single else gx


@dataclass(frozen=True)
class ValuePair:
    """A primary network and its slowly tracking target copy."""

    primary: ParamVector
    target: ParamVector
    tau: float = 5e-3

    def __post_init__(self):
        if self.primary.layout != self.target.layout:
            raise InvalidInputError("primary and target must share a layout")
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInputError("tau must lie in [0, 1]")

    @classmethod
    def create(cls, layout: Layout, rng: np.random.Generator, tau: float = 5e-3) -> "ValuePair":
        p = init_params(layout, rng)
        return cls(p, p, tau)

    def with_primary(self, primary: ParamVector) -> "ValuePair":
        return ValuePair(primary, self.target, self.tau)


def soft_update(pair: ValuePair) -> ValuePair:
    """target <- tau * primary + (1 - tau) * target."""
    tau = pair.tau
    target = tau * pair.primary.values + (1.0 - tau) * pair.target.values
    return ValuePair(pair.primary, pair.target.replace(target), tau)


class Adam:
    """Adam on a flat parameter vector. Mutable; one owner at a time."""

    def __init__(self, n_params: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
