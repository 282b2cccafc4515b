"""Encoder network and state lifting.

The lifted state stacks the raw state on top of the encoder output,
z = [x; zeta(std(x))], so the decoder is the fixed selector C = [I 0] and
decode(lift(x)) == x holds bit-exactly for any parameters.  Hidden layers
use tanh; the output layer is linear, which keeps the map globally bounded
for fixed weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Standardizer:
    """Per-channel affine normalization applied ahead of the encoder."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(self.std <= 0):
            raise ValueError("standardizer std must be positive")

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean[:, None]) / self.std[:, None]

    @staticmethod
    def fit(states: np.ndarray) -> "Standardizer":
        """From a (T, n) stack of states; std floored to avoid degenerate channels."""
        mean = states.mean(axis=0)
        std = np.maximum(states.std(axis=0), 1e-8)
        return Standardizer(mean=mean, std=std)

    @staticmethod
    def identity(n: int) -> "Standardizer":
        return Standardizer(mean=np.zeros(n), std=np.ones(n))


@dataclass
class EncoderParams:
    """Weights and biases of the encoder MLP (tanh hidden, linear output)."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != b.shape[0]:
                raise ValueError("bias length must match the layer's output width")
        dims = self.layer_dims
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != dims[k]:
                raise ValueError("consecutive layer dimensions are inconsistent")
        if not all(np.all(np.isfinite(W)) for W in self.weights + self.biases):
            raise ValueError("encoder parameters contain non-finite entries")

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams([W.copy() for W in self.weights],
                             [b.copy() for b in self.biases])

    def output_bound(self) -> np.ndarray:
        """Entrywise bound on |encode(x)| from tanh in (-1, 1): |W_out| 1 + |b_out|."""
        return np.abs(self.weights[-1]).sum(axis=1) + np.abs(self.biases[-1])


def init_encoder(layer_dims: list, rng: np.random.Generator) -> EncoderParams:
    """Xavier-uniform initialization, biases at zero."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases)


def encode(X: np.ndarray, p: EncoderParams, return_cache: bool = False):
    """Feed-forward pass on (in_dim, s) columns; optionally keep activations."""
    h = np.atleast_2d(np.asarray(X, dtype=float))
    activations = [h]
    last = len(p.weights) - 1
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        a = W @ h + b[:, None]
        h = a if k == last else np.tanh(a)
        activations.append(h)
    if return_cache:
        return h, activations
    return h


def encode_vjp(p: EncoderParams, cache: list, G: np.ndarray):
    """Reverse-mode pullback of cotangent G through the encoder.

    Returns per-layer (dW, db) plus the gradient with respect to the input
    columns.  `cache` is the activation list from encode(..., return_cache=True).
    """
    grads_W = [None] * len(p.weights)
    grads_b = [None] * len(p.biases)
    delta = np.atleast_2d(G)
    for k in range(len(p.weights) - 1, -1, -1):
        h_in = cache[k]
        if k != len(p.weights) - 1:
            delta = delta * (1.0 - cache[k + 1] ** 2)  # tanh'
        grads_W[k] = delta @ h_in.T
        grads_b[k] = delta.sum(axis=1)
        delta = p.weights[k].T @ delta
    return list(zip(grads_W, grads_b)), delta


# ---------------------------------------------------------------------------
# lifting maps: raw state -> lifted state with an exact [I 0] decoder
# ---------------------------------------------------------------------------

class Lifting:
    """Base lifting; subclasses guarantee z[:n] == x bit-exact."""

    n: int
    lifted_dim: int

    def __call__(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityLifting(Lifting):
    def __init__(self, n: int):
        self.n = n
        self.lifted_dim = n

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float))


class EncoderLifting(Lifting):
    def __init__(self, encoder: EncoderParams, standardizer: Standardizer):
        self.encoder = encoder
        self.standardizer = standardizer
        self.n = encoder.in_dim
        self.lifted_dim = encoder.in_dim + encoder.out_dim

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.vstack([X, encode(self.standardizer.apply(X), self.encoder)])


class MonomialLifting(Lifting):
    """States followed by all monomials of degree 2..max_degree."""

    def __init__(self, n: int, max_degree: int = 2):
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        self.n = n
        self.max_degree = max_degree
        self.exponents = self._build_exponents(n, max_degree)
        self.lifted_dim = n + len(self.exponents)

    @staticmethod
    def _build_exponents(n: int, max_degree: int) -> list:
        def compositions(total, slots):
            if slots == 1:
                yield (total,)
                return
            for head in range(total + 1):
                for rest in compositions(total - head, slots - 1):
                    yield (head,) + rest

        exps = []
        for deg in range(2, max_degree + 1):
            exps.extend(sorted(compositions(deg, n), reverse=True))
        return exps

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rows = [X]
        for exp in self.exponents:
            row = np.ones(X.shape[1])
            for i, e in enumerate(exp):
                if e:
                    row = row * X[i] ** e
            rows.append(row[None, :])
        return np.vstack(rows)


def lift(X: np.ndarray, lifting: Lifting) -> np.ndarray:
    """Lifted snapshot matrix (lifted_dim, s); single vectors come back 1-D."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Z = lifting(X[:, None] if single else X)
    return Z[:, 0] if single else Z


def decode(Z: np.ndarray, n: int) -> np.ndarray:
    """Fixed decoder C = [I 0]: select the raw-state block."""
    return np.asarray(Z)[:n]
