"""
Numeric Core
Softmax and its Jacobian, entropy, sigmoid, layer normalization and the
central finite-difference oracle every analytic gradient is checked against.
All arrays are float64.
"""

from typing import Callable

import numpy as np
import numpy.typing as npt
from scipy import special

from src.errors import DimensionError, DomainError, OracleError, NumericalFailure


DenseMatrix = npt.NDArray[np.float64]
SimplexVector = npt.NDArray[np.float64]

SIMPLEX_TOL = 1e-12
ENTROPY_FLOOR = 1e-300


def as_vector(x, name: str = "input") -> npt.NDArray[np.float64]:
    vector = np.asarray(x, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {vector.shape}")
    if vector.size == 0:
        raise DimensionError(f"{name} must have at least one entry")
    return vector


def ensure_finite(array: npt.NDArray[np.float64], what: str) -> npt.NDArray[np.float64]:
    if not np.all(np.isfinite(array)):
        raise NumericalFailure(f"Non-finite values produced by {what}")
    return array


def check_simplex(g, tol: float = 1e-9) -> SimplexVector:
    """Validate that g is a probability vector; returns it as float64."""
    g = as_vector(g, "simplex vector")
    if np.any(g < -tol) or np.any(g > 1 + tol) or abs(g.sum() - 1.0) > tol:
        raise DomainError(f"Vector is not on the probability simplex (sum={g.sum():.6g})")
    return g


def softmax(u) -> SimplexVector:
    """Max-subtracted softmax of a logit vector (or of each row of a matrix)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 0 or u.shape[-1] == 0:
        raise DimensionError("softmax needs at least one logit")
    return ensure_finite(special.softmax(u, axis=-1), "softmax")


def softmax_jacobian(g) -> DenseMatrix:
    """diag(g) - g g^T, the Jacobian of softmax expressed through its output."""
    g = check_simplex(g)
    return np.diag(g) - np.outer(g, g)


def entropy(g) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    g = check_simplex(g)
    return float(special.entr(np.clip(g, 0.0, 1.0)).sum())


def entropy_grad(g) -> npt.NDArray[np.float64]:
    """dH/dg = -(log g + 1), with g clamped away from zero."""
    g = check_simplex(g)
    return -(np.log(np.maximum(g, ENTROPY_FLOOR)) + 1.0)


def sigmoid(x):
    return special.expit(np.asarray(x, dtype=np.float64))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> npt.NDArray[np.float64]:
    """Normalize over the last axis with population variance, then scale and shift."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise DimensionError(
            f"layer_norm length mismatch: x={x.shape[-1]}, gain={gain.shape[-1]}, bias={bias.shape[-1]}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ensure_finite((x - mean) / np.sqrt(var + eps) * gain + bias, "layer_norm")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> npt.NDArray[np.float64]:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar-valued function of a float64 vector
        x: Point of evaluation
        h: Step size

    Returns:
        Vector of (f(x + h e_i) - f(x - h e_i)) / 2h
    """
    if h <= 0:
        raise DomainError(f"Finite-difference step must be positive, got {h}")
    x = as_vector(x, "x")
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        forward = float(f(x + step))
        backward = float(f(x - step))
        if not (np.isfinite(forward) and np.isfinite(backward)):
            raise OracleError(f"Non-finite function value while differentiating coordinate {i}")
        grad[i] = (forward - backward) / (2.0 * h)
    return grad


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> DenseMatrix:
    """Central-difference Jacobian of a vector function; column j is d f / d x_j."""
    if h <= 0:
        raise DomainError(f"Finite-difference step must be positive, got {h}")
    x = as_vector(x, "x")
    columns = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        forward = np.asarray(f(x + step), dtype=np.float64)
        backward = np.asarray(f(x - step), dtype=np.float64)
        if not (np.all(np.isfinite(forward)) and np.all(np.isfinite(backward))):
            raise OracleError(f"Non-finite function value while differentiating coordinate {j}")
        columns.append((forward - backward).ravel() / (2.0 * h))
    return np.stack(columns, axis=1)


def symmetric_eigenvalues(matrix) -> npt.NDArray[np.float64]:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {matrix.shape}")
    return np.linalg.eigvalsh(matrix)


def sample_simplex(rng: np.random.Generator, n: int) -> SimplexVector:
    """Uniform draw from the (n-1)-simplex: symmetric Dirichlet(1)."""
    return rng.dirichlet(np.ones(n))
