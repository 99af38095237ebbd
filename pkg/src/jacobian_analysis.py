"""
Jacobian Analysis
Numerical checks of the routing theory: the MoE layer Jacobian (residual +
representation + routing-score terms), the gradient of the entropy-reciprocal
load-balance loss, its conflict with the dominant expert's score, and the
positive semi-definiteness of the softmax Jacobian.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.errors import ConfigurationError, DomainError, NonDifferentiablePointError
from src.experiment_models import ConflictReport
from src.gating import gate_softmax, DTYPE
from src.moe import ExpertPool, moe_forward
from src.numeric_core import (
    check_simplex, entropy, finite_diff_grad, finite_diff_jacobian, sample_simplex,
    softmax, softmax_jacobian, symmetric_eigenvalues
)


logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
MAX_RETRIES = 5


def inverse_entropy_of_logits(u) -> float:
    """u -> 1/H(softmax(u)), the load-balance loss of one token."""
    return 1.0 / entropy(softmax(u))


def load_balance_grad(g) -> np.ndarray:
    """
    Gradient of u -> 1/H(softmax(u)) with respect to the logits, expressed
    through g = softmax(u): H(g)^-2 * (diag(g) - g g^T)(log g + 1).
    """
    g = check_simplex(g)
    if g.size < 2 or np.any(g <= 0.0):
        raise DomainError("Load-balance gradient needs a strictly interior point of the simplex")
    h = entropy(g)
    return softmax_jacobian(g) @ (np.log(g) + 1.0) / h ** 2


def _cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a < DEGENERATE_NORM or norm_b < DEGENERATE_NORM:
        return None
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def conflict_probe(g, direction: str = "dominant-expert", step: int = 0) -> ConflictReport:
    """
    Cosine between the logit direction that raises the dominant expert's
    score and the descent direction of the load-balance loss.
    """
    if direction != "dominant-expert":
        raise ConfigurationError(f"Unknown probe direction: {direction}")
    g = check_simplex(g)
    dominant = int(np.argmax(g))
    raise_dominant = softmax_jacobian(g)[dominant]
    load_descent = -load_balance_grad(g)
    return ConflictReport(
        step=step,
        g_max=float(g[dominant]),
        conflict_score=_cosine(raise_dominant, load_descent),
        h_entropy=entropy(g)
    )


def sample_sharp_distribution(rng: np.random.Generator, num_experts: int,
                              min_peak: float = 0.9, max_peak: float = 0.999) -> np.ndarray:
    """Dominant entry uniform in [min_peak, max_peak), the rest Dirichlet(1)-spread."""
    peak = rng.uniform(min_peak, max_peak)
    rest = (1.0 - peak) * rng.dirichlet(np.ones(num_experts - 1))
    dominant = rng.integers(num_experts)
    return np.insert(rest, dominant, peak)


def conflict_sweep(num_samples: int, num_experts: int = 8, seed: int = 2023,
                   min_peak: float = 0.9) -> List[ConflictReport]:
    rng = np.random.default_rng(seed)
    return [
        conflict_probe(sample_sharp_distribution(rng, num_experts, min_peak), step=i)
        for i in range(num_samples)
    ]


def negativity_rate(reports: Sequence[ConflictReport]) -> float:
    scored = [r.conflict_score for r in reports if r.conflict_score is not None]
    if not scored:
        return 0.0
    return float(np.mean(np.asarray(scored) < 0.0))


def psd_audit(samples: int, n_range: Tuple[int, int] = (2, 16), seed: int = 2023) -> float:
    """Smallest eigenvalue of diag(g) - g g^T over Dirichlet(1) draws, N drawn from n_range."""
    if samples < 1:
        raise ConfigurationError(f"psd_audit needs at least one sample, got {samples}")
    low, high = n_range
    rng = np.random.default_rng(seed)
    smallest = np.inf
    for _ in range(samples):
        g = sample_simplex(rng, int(rng.integers(low, high + 1)))
        smallest = min(smallest, float(symmetric_eigenvalues(softmax_jacobian(g)).min()))
    return smallest


def load_balance_grad_check(samples: int, n_range: Tuple[int, int] = (2, 8), seed: int = 2023,
                            step: float = 1e-6) -> float:
    """Max relative error between load_balance_grad and finite differences of 1/H(softmax(u))."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        g = sample_simplex(rng, int(rng.integers(n_range[0], n_range[1] + 1)))
        g = np.maximum(g, 1e-6)
        g /= g.sum()
        analytic = load_balance_grad(g)
        numeric = finite_diff_grad(inverse_entropy_of_logits, np.log(g), step)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), DEGENERATE_NORM)
    return float(np.abs(analytic - numeric).max() / scale)


def _as_numpy(tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        return tensor.detach().cpu().numpy().astype(np.float64)
    return np.asarray(tensor, dtype=np.float64)


def _routing_state(h: np.ndarray, weight: np.ndarray, bias: np.ndarray, router: np.ndarray, k: int):
    g = softmax(h @ router)
    selected = np.argsort(-g, kind="stable")[:k]
    active = (np.einsum('nod,d->no', weight[selected], h) + bias[selected]) > 0
    return g, selected, active


def moe_jacobian_analytic(h, pool: ExpertPool, router, k: int) -> np.ndarray:
    """
    d x d Jacobian of the softmax-gated MoE layer at one token:
    I + sum_i [ g_i diag(1[z_i > 0]) W_i  +  E_i(h) (router J_softmax[:, i])^T ].
    """
    h = _as_numpy(h)
    weight, bias, router = _as_numpy(pool.weight), _as_numpy(pool.bias), _as_numpy(router)
    g, selected, active = _routing_state(h, weight, bias, router, k)
    j_softmax = softmax_jacobian(g)

    jacobian = np.eye(h.size)
    for slot, expert in enumerate(selected):
        z = weight[expert] @ h + bias[expert]
        representation = g[expert] * (active[slot][:, None] * weight[expert])
        routing = np.outer(np.maximum(z, 0.0), router @ j_softmax[:, expert])
        jacobian += representation + routing
    return jacobian


def _layer_as_function(pool: ExpertPool, router: torch.Tensor, k: int):
    def forward(x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            token = torch.as_tensor(x, dtype=DTYPE).unsqueeze(0)
            gate = gate_softmax(token, router, k)
            return moe_forward(token, gate, pool)[0].numpy()
    return forward


def _smooth_within(h: np.ndarray, pool: ExpertPool, router: np.ndarray, k: int, step: float) -> bool:
    """True when no Top-K switch or ReLU kink lies within +-step of h along any axis."""
    weight, bias = _as_numpy(pool.weight), _as_numpy(pool.bias)
    _, base_selected, base_active = _routing_state(h, weight, bias, router, k)
    for j in range(h.size):
        for sign in (1.0, -1.0):
            shifted = h.copy()
            shifted[j] += sign * step
            _, selected, active = _routing_state(shifted, weight, bias, router, k)
            if not np.array_equal(selected, base_selected) or not np.array_equal(active, base_active):
                return False
    return True


def moe_jacobian_check(h, pool: ExpertPool, router, k: int, step: float = 1e-6,
                       rng: Optional[np.random.Generator] = None) -> float:
    """
    Max relative discrepancy between the analytic Jacobian and central
    finite differences of the torch forward pass.
    """
    h = _as_numpy(h)
    router_tensor = torch.as_tensor(_as_numpy(router), dtype=DTYPE)
    router_np = router_tensor.numpy()
    rng = rng or np.random.default_rng(0)

    for attempt in range(MAX_RETRIES + 1):
        if _smooth_within(h, pool, router_np, k, step):
            analytic = moe_jacobian_analytic(h, pool, router_np, k)
            numeric = finite_diff_jacobian(_layer_as_function(pool, router_tensor, k), h, step)
            return _relative_error(analytic, numeric)
        if attempt == MAX_RETRIES:
            break
        step *= rng.uniform(0.1, 0.5)
        logger.debug("Non-smooth point within finite-difference step, retrying with step %.3g", step)

    raise NonDifferentiablePointError(f"Still non-differentiable after {MAX_RETRIES} retries")


def random_moe_instance(rng: np.random.Generator, dim: int, num_experts: int):
    """Seeded (h, pool, router) triple for gradient checks."""
    pool = ExpertPool(dim, num_experts)
    bound = 1.0 / np.sqrt(dim)
    with torch.no_grad():
        pool.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=(num_experts, dim, dim))))
        pool.bias.copy_(torch.as_tensor(rng.normal(0.0, 0.1, size=(num_experts, dim))))
    router = torch.as_tensor(rng.normal(0.0, 1.0, size=(dim, num_experts)), dtype=DTYPE)
    h = rng.normal(0.0, 1.0, size=dim)
    return h, pool, router


def moe_jacobian_batch(num_instances: int, dim: int = 4, num_experts: int = 4, k: int = 2,
                       seed: int = 2023) -> float:
    """Worst moe_jacobian_check over seeded random small instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_instances):
        h, pool, router = random_moe_instance(rng, dim, num_experts)
        worst = max(worst, moe_jacobian_check(h, pool, router, k, rng=rng))
    return worst
