"""Dense float64 tensor primitives: matmul, softmax, attention, linear layers,
a central-difference gradient checker, and deterministic seeded initialization.

Everything downstream operates on plain numpy arrays (2D "matrices", 1D
"vectors") in float64. Shapes are validated eagerly so errors surface at the
call site with both shapes named.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A scalar argument is outside its valid domain."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2D matrix, got shape {a.shape}")
    return a


def as_vector(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1D vector, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of x / temperature, max-subtracted for stability."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    x = as_matrix(x)
    z = x / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v, d = k.cols."""
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value count mismatch: {k.shape} vs {v.shape}")
    scores = q @ k.T / math.sqrt(k.shape[1])
    return softmax_rows(scores) @ v


def linear(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Affine map applied per row: x @ w.T + b."""
    w, b, x = as_matrix(w), as_vector(b), as_matrix(x)
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"weight/input width mismatch: {w.shape} vs {x.shape}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"bias/weight row mismatch: {b.shape} vs {w.shape}")
    return x @ w.T + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0.0).astype(np.float64)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "gelu": (gelu, gelu_grad),
    "relu": (relu, relu_grad),
}


def grad_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic_grad and central differences of f.

    Relative error per coordinate is |analytic - fd| / max(1, |fd|); the
    maximum over coordinates is returned.
    """
    if eps <= 0:
        raise DomainError(f"eps must be > 0, got {eps}")
    point = as_vector(point)
    analytic_grad = as_vector(analytic_grad)
    if point.shape != analytic_grad.shape:
        raise ShapeError(
            f"point/gradient length mismatch: {point.shape} vs {analytic_grad.shape}"
        )
    worst = 0.0
    x = point.copy()
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        fd = (fp - fm) / (2.0 * eps)
        err = abs(analytic_grad[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; bit-stable across platforms."""
    return np.random.Generator(np.random.Philox(key=seed))


def seeded_fill(
    seed: int,
    rows: int,
    cols: int,
    distribution: str = "gaussian",
    sigma: float = 1.0,
) -> np.ndarray:
    """Deterministic (seed, shape, distribution)-keyed random matrix.

    Uses the Philox 4x64 counter-based generator so streams are reproducible
    bit-for-bit on any platform for a fixed numpy major line.
    """
    if distribution == "uniform01":
        return rng_for(seed).random((rows, cols))
    if distribution == "gaussian":
        if sigma <= 0:
            raise DomainError(f"gaussian sigma must be > 0, got {sigma}")
        return rng_for(seed).standard_normal((rows, cols)) * sigma
    raise DomainError(f"unknown distribution {distribution!r}")
