"""Entropic optimal transport between 1-D empirical distributions.

Solver is log-domain Sinkhorn with optional epsilon annealing. The reported
value is the dual objective at the final potentials, which equals the primal
``<P, C> + eps * KL(P | a x b)`` at the optimum and is second-order accurate
in the potential error (so swapping the arguments agrees far below the
marginal tolerance).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

CostKind = Literal["absolute", "squared"]


class SinkhornError(RuntimeError):
    """Raised when the solver produces non-finite values."""


@dataclass(frozen=True)
class EmpiricalDistribution:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if support.size < 1 or support.shape != weights.shape:
            raise ValueError("support and weights must have the same length >= 1")
        if not np.all(np.isfinite(support)):
            raise ValueError("support must be finite")
        if np.any(weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, support) -> "EmpiricalDistribution":
        support = np.asarray(support, dtype=np.float64).reshape(-1)
        n = support.size
        return cls(support, np.full(n, 1.0 / n) if n else np.zeros(0))

    def __len__(self) -> int:
        return self.support.size


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    cost_kind: CostKind

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    ``epsilon`` is absolute when ``epsilon_mode == "absolute"``; in
    ``"relative"`` mode the effective value is ``epsilon * mean(C(a, b))``.
    ``anneal`` > 0 enables epsilon scaling: solve a sequence of problems with
    epsilon shrinking by that factor each stage, warm-starting the potentials.
    """

    epsilon: float = 0.1
    max_iters: int = 1000
    tolerance: float = 1e-6
    cost_kind: CostKind = "squared"
    debias: bool = False
    epsilon_mode: Literal["relative", "absolute"] = "relative"
    anneal: float = 0.0
    newton_polish: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.cost_kind not in ("absolute", "squared"):
            raise ValueError(f"unknown cost_kind {self.cost_kind!r}")
        if self.epsilon_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if not 0.0 <= self.anneal < 1.0:
            raise ValueError("anneal must be in [0, 1)")


@dataclass
class TransportPlan:
    coupling: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray
    iterations_used: int
    converged: bool
    epsilon: float = 0.0
    cost: CostMatrix | None = field(default=None, repr=False)
    value: float = 0.0

    def marginal_violation(self, a: EmpiricalDistribution, b: EmpiricalDistribution) -> float:
        rows = np.abs(self.coupling.sum(axis=1) - a.weights).max()
        cols = np.abs(self.coupling.sum(axis=0) - b.weights).max()
        return float(max(rows, cols))


def build_cost(a: EmpiricalDistribution, b: EmpiricalDistribution,
               kind: CostKind = "squared") -> CostMatrix:
    diff = a.support[:, None] - b.support[None, :]
    if kind == "absolute":
        entries = np.abs(diff)
    elif kind == "squared":
        entries = diff * diff
    else:
        raise ValueError(f"unknown cost kind {kind!r}")
    return CostMatrix(entries, kind)


def _cost_partial_first(p: np.ndarray, q: np.ndarray, kind: CostKind) -> np.ndarray:
    """d c(p_i, q_j) / d p_i as an n x m array (the q-partial is its negation)."""
    diff = p[:, None] - q[None, :]
    if kind == "absolute":
        return np.sign(diff)
    return 2.0 * diff


def resolve_epsilon(cost: CostMatrix, cfg: SinkhornConfig) -> float:
    if cfg.epsilon_mode == "absolute":
        return float(cfg.epsilon)
    scale = float(cost.entries.mean())
    # zero cost (e.g. identical point masses): fall back to unit scale
    return float(cfg.epsilon * (scale if scale > 0 else 1.0))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _solve(C, log_a, log_b, a, eps, f, g, max_iters, tol):
    """Alternating log-domain updates at fixed eps. Returns f, g, iters, violation."""
    violation = np.inf
    it = 0
    # row log-sums of the current plan, divided by exp(f/eps)
    row_term = _lse(log_b[None, :] + (g[None, :] - C) / eps, axis=1)
    while it < max_iters:
        log_rows = log_a + f / eps + row_term
        violation = float(np.abs(np.exp(log_rows) - a).max())
        if not np.isfinite(violation):
            break
        if violation < tol:
            break
        f = -eps * row_term
        g = -eps * _lse(log_a[:, None] + (f[:, None] - C) / eps, axis=0)
        row_term = _lse(log_b[None, :] + (g[None, :] - C) / eps, axis=1)
        it += 1
    else:
        log_rows = log_a + f / eps + row_term
        violation = float(np.abs(np.exp(log_rows) - a).max())
    return f, g, it, violation


NEWTON_MAX_SIZE = 256
NEWTON_WARMUP = 20


def _dual(C, log_a, log_b, eps, f, g):
    log_plan = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps
    P = np.exp(log_plan)
    value = np.exp(log_a) @ f + np.exp(log_b) @ g - eps * (P.sum() - 1.0)
    return value, P


def _newton(C, log_a, log_b, a, b, eps, f, g, tol, max_steps=100):
    """Damped Newton ascent on the dual; used when Sinkhorn stalls.

    The dual is invariant to (f + t, g - t), so the last g coordinate is held
    fixed to make the Hessian nonsingular.
    """
    n, m = len(a), len(b)
    value, P = _dual(C, log_a, log_b, eps, f, g)
    violation = np.inf
    for step in range(max_steps):
        r, c = P.sum(axis=1), P.sum(axis=0)
        violation = float(max(np.abs(r - a).max(), np.abs(c - b).max()))
        if violation < tol:
            return f, g, step, violation
        grad = np.concatenate([a - r, (b - c)[:-1]])
        H = np.zeros((n + m - 1, n + m - 1))
        H[:n, :n] = np.diag(r)
        H[:n, n:] = P[:, :-1]
        H[n:, :n] = P[:, :-1].T
        H[n:, n:] = np.diag(c[:-1])
        # near-diagonal plans leave almost-free block shifts; a truncated
        # pseudo-inverse drops those directions instead of stepping to infinity
        d = np.linalg.lstsq(H, grad, rcond=1e-12)[0] * eps
        df = d[:n]
        dg = np.concatenate([d[n:], [0.0]])
        t = 1.0
        while t > 1e-10:
            nf, ng = f + t * df, g + t * dg
            # overshooting trial steps may overflow; they are rejected below
            with np.errstate(over="ignore", invalid="ignore"):
                new_value, new_P = _dual(C, log_a, log_b, eps, nf, ng)
            if np.isfinite(new_value) and new_value >= value - 1e-15 * abs(value):
                break
            t *= 0.5
        else:
            break
        f, g, value, P = nf, ng, new_value, new_P
    return f, g, max_steps, violation


def _plan_from_cost(a: EmpiricalDistribution, b: EmpiricalDistribution, cost: CostMatrix,
                    eps: float, cfg: SinkhornConfig) -> TransportPlan:
    C = cost.entries
    log_a = np.log(a.weights)
    log_b = np.log(b.weights)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    used = 0

    if cfg.anneal > 0:
        stage_eps = max(float(C.max()), eps)
        while stage_eps > eps:
            # warm-up stages only need a rough fit
            f, g, it, _ = _solve(C, log_a, log_b, a.weights, stage_eps, f, g,
                                 cfg.max_iters, max(cfg.tolerance, 1e-3))
            used += it
            stage_eps = max(stage_eps * cfg.anneal, eps)
            if stage_eps == eps:
                break

    polish = cfg.newton_polish and len(a) + len(b) <= NEWTON_MAX_SIZE
    # small problems: short Sinkhorn warm-up, then Newton; Sinkhorn resumes
    # with the remaining budget if Newton does not reach the tolerance
    budget = min(cfg.max_iters, NEWTON_WARMUP) if polish else cfg.max_iters
    f, g, it, violation = _solve(C, log_a, log_b, a.weights, eps, f, g, budget, cfg.tolerance)
    used += it
    if polish and not violation < cfg.tolerance and np.isfinite(violation):
        f, g, it, violation = _newton(C, log_a, log_b, a.weights, b.weights, eps, f, g,
                                      cfg.tolerance)
        used += it
        rest = cfg.max_iters - budget
        if not violation < cfg.tolerance and np.isfinite(violation) and rest > 0:
            f, g, it, violation = _solve(C, log_a, log_b, a.weights, eps, f, g, rest,
                                         cfg.tolerance)
            used += it
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g)) and np.isfinite(violation)):
        raise SinkhornError(
            f"non-finite Sinkhorn potentials at epsilon={eps:g}; epsilon is too small "
            "for the cost scale")

    log_plan = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps
    coupling = np.exp(log_plan)
    # dual objective: <a, f> + <b, g> - eps * (sum(P) - 1)
    value = float(a.weights @ f + b.weights @ g - eps * (coupling.sum() - 1.0))
    return TransportPlan(coupling=coupling, dual_u=f, dual_v=g, iterations_used=used,
                         converged=violation < cfg.tolerance, epsilon=eps, cost=cost,
                         value=value)


def sinkhorn_plan(a: EmpiricalDistribution, b: EmpiricalDistribution,
                  cfg: SinkhornConfig = SinkhornConfig(), *, epsilon: float | None = None) -> TransportPlan:
    """Entropic transport plan between ``a`` and ``b``.

    ``epsilon`` overrides the value resolved from ``cfg`` (used by the
    debiased divergence so all three terms share one epsilon).
    """
    cost = build_cost(a, b, cfg.cost_kind)
    eps = resolve_epsilon(cost, cfg) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError(f"epsilon must be > 0, got {eps}")
    return _plan_from_cost(a, b, cost, eps, cfg)


def _kl_to_product(plan: TransportPlan, a: EmpiricalDistribution, b: EmpiricalDistribution) -> float:
    P = plan.coupling
    ref = a.weights[:, None] * b.weights[None, :]
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / ref[mask])) - P.sum() + 1.0)


def _solve_terms(a, b, cfg):
    """Plans needed for the (possibly debiased) distance, sharing one epsilon."""
    eps = resolve_epsilon(build_cost(a, b, cfg.cost_kind), cfg)
    ab = sinkhorn_plan(a, b, cfg, epsilon=eps)
    if not cfg.debias:
        return eps, ab, None, None
    aa = sinkhorn_plan(a, a, cfg, epsilon=eps)
    bb = sinkhorn_plan(b, b, cfg, epsilon=eps)
    return eps, ab, aa, bb


def sinkhorn_distance(a: EmpiricalDistribution, b: EmpiricalDistribution,
                      cfg: SinkhornConfig = SinkhornConfig()) -> float:
    _, ab, aa, bb = _solve_terms(a, b, cfg)
    if not cfg.debias:
        return ab.value
    return max(0.0, ab.value - 0.5 * aa.value - 0.5 * bb.value)


def _self_grad(plan: TransportPlan, x: np.ndarray, kind: CostKind) -> np.ndarray:
    weighted = plan.coupling * _cost_partial_first(x, x, kind)
    return 0.5 * (weighted.sum(axis=1) - weighted.sum(axis=0))


def sinkhorn_value_and_grad(a: EmpiricalDistribution, b: EmpiricalDistribution,
                            cfg: SinkhornConfig = SinkhornConfig()) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance and its support gradients from a single set of solves.

    Uses the fixed-plan rule ``dW/dp_i = sum_j P_ij dc(p_i, q_j)/dp_i``. In
    relative-epsilon mode epsilon itself depends on the supports through
    ``mean(C)``; that path contributes ``KL(P | a x b) * d eps/d p`` and is
    included so the result is the gradient of the reported value.
    """
    _, ab, aa, bb = _solve_terms(a, b, cfg)
    p, q, kind = a.support, b.support, cfg.cost_kind

    dc = _cost_partial_first(p, q, kind)
    weighted = ab.coupling * dc
    gp = weighted.sum(axis=1)
    gq = -weighted.sum(axis=0)
    deps_coef = _kl_to_product(ab, a, b)
    value = ab.value

    if cfg.debias:
        value = ab.value - 0.5 * aa.value - 0.5 * bb.value
        if value <= 0.0:
            return 0.0, np.zeros_like(p), np.zeros_like(q)
        # both slots of c(x_i, x_j) move with x; 1/2 weight on each self term
        gp = gp - _self_grad(aa, p, kind)
        gq = gq - _self_grad(bb, q, kind)
        deps_coef -= 0.5 * _kl_to_product(aa, a, a) + 0.5 * _kl_to_product(bb, b, b)

    if cfg.epsilon_mode == "relative" and float(ab.cost.entries.mean()) > 0:
        n, m = len(a), len(b)
        gp = gp + deps_coef * cfg.epsilon * dc.sum(axis=1) / (n * m)
        gq = gq - deps_coef * cfg.epsilon * dc.sum(axis=0) / (n * m)
    return float(value), gp, gq


def sinkhorn_grad_support(a: EmpiricalDistribution, b: EmpiricalDistribution,
                          cfg: SinkhornConfig = SinkhornConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`sinkhorn_distance` w.r.t. the support points of ``a`` and ``b``."""
    _, gp, gq = sinkhorn_value_and_grad(a, b, cfg)
    return gp, gq


def exact_wasserstein_1d(a: EmpiricalDistribution, b: EmpiricalDistribution,
                         kind: CostKind = "squared") -> float:
    """Exact 1-D optimal transport cost via the monotone (quantile) coupling.

    Both CDFs are merged into one list of breakpoints; each slab between
    consecutive breakpoints carries its mass from the a-quantile to the
    b-quantile.
    """
    ia = np.argsort(a.support, kind="stable")
    ib = np.argsort(b.support, kind="stable")
    xa, wa = a.support[ia], a.weights[ia]
    xb, wb = b.support[ib], b.weights[ib]
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    mass = np.diff(np.concatenate(([0.0], levels)))
    # slab k spans (levels[k-1], levels[k]]; locate the owning atom on each side
    ja = np.minimum(np.searchsorted(ca, levels, side="left"), len(xa) - 1)
    jb = np.minimum(np.searchsorted(cb, levels, side="left"), len(xb) - 1)
    diff = xa[ja] - xb[jb]
    cost = np.abs(diff) if kind == "absolute" else diff * diff
    return float(np.sum(mass * cost))
