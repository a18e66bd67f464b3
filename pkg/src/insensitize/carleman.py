"""Carleman weights and numerically evaluated weighted estimates.

Weights on the interior time levels ``t_1 .. t_{M-1}``::

    gamma(t)   = 1 / (t (T - t))
    alpha(t,x) = (exp(mu psi(x)) - exp(2 mu |psi|_inf)) gamma(t)
    log theta  = lam alpha

``theta**2`` underflows for moderate ``lam``, so every weighted sum is
accumulated as a log-sum-exp and both sides of an estimate are compared in
log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .cascade import AdjointSolution, ProblemSpec, solve_adjoint
from .mesh import BulkSurfaceField, Mesh
from .tree import NoiseTree, mean_over_level

DEFAULT_LAMBDA = 2.0
DEFAULT_MU = 1.5
DEFAULT_PSI_PEAK = 0.2


class PsiConstructionError(ValueError):
    pass


class DiagnosticFailure(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CarlemanParams:
    lam: float
    mu: float
    weight_constant: float
    psi: BulkSurfaceField
    G1: np.ndarray

    def __post_init__(self):
        if self.lam < 1 or self.mu < 1:
            raise ValueError(f"lambda and mu must be >= 1, got {self.lam}, {self.mu}")
        if not self.weight_constant > 0:
            raise ValueError("observability weight constant must be positive")


@dataclass(frozen=True, eq=False)
class WeightField:
    times: np.ndarray  # (M-1,)
    alpha: np.ndarray  # (M-1, ndof)
    gamma: np.ndarray  # (M-1,)
    log_theta: np.ndarray  # (M-1, ndof)
    alpha_t_constant: float  # max |alpha_t| / (exp(2 mu |psi|) gamma^2)
    gamma_t_constant: float  # max |gamma_t| / gamma^2


def _interior_gradient(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude at interior nodes."""
    if mesh.kind == "interval":
        h = mesh.spacing[0]
        full = np.concatenate([[values[mesh.n_interior]], values[: mesh.n_interior], [values[-1]]])
        return np.abs(full[2:] - full[:-2]) / (2 * h)
    Nr, Nphi = mesh.params["Nr"], mesh.params["Nphi"]
    hr, dphi = mesh.spacing
    ni = mesh.n_interior
    grid = np.concatenate(
        [values[ni : ni + Nphi][None], values[:ni].reshape(Nr - 1, Nphi), values[ni + Nphi :][None]]
    )
    dr = (grid[2:] - grid[:-2]) / (2 * hr)
    r = mesh.interior_coords[:, 0].reshape(Nr - 1, Nphi)
    inner = grid[1:-1]
    dp = (np.roll(inner, -1, axis=1) - np.roll(inner, 1, axis=1)) / (2 * r * dphi)
    return np.sqrt(dr**2 + dp**2).ravel()


def build_psi(mesh: Mesh, G1: np.ndarray, peak: float = DEFAULT_PSI_PEAK) -> BulkSurfaceField:
    """Weight profile positive inside, zero on the boundary, critical only in ``G1``."""
    G1 = np.asarray(G1, dtype=float)
    if not (G1 >= 1).any():
        raise PsiConstructionError("G1 must be nonempty")
    x = mesh.interior_coords[:, 0]
    if mesh.kind == "interval":
        L = mesh.params["L"]
        psi_i = 4 * peak * x * (L - x) / L**2
        critical = L / 2
    else:
        R0, R1 = mesh.params["R0"], mesh.params["R1"]
        psi_i = 4 * peak * (x - R0) * (R1 - x) / (R1 - R0) ** 2
        critical = (R0 + R1) / 2
    psi = BulkSurfaceField(psi_i, np.zeros(mesh.n_boundary))
    grad = _interior_gradient(mesh, psi.packed())
    h = mesh.spacing[0]
    near = np.abs(x - critical) < 0.5 * h + 1e-12
    in_g1 = G1 >= 1
    bad = near & ~in_g1
    if bad.any() or not near.any() and not _hull_contains(x[in_g1], critical):
        where = mesh.interior_coords[bad][0].tolist() if bad.any() else [critical]
        raise PsiConstructionError(
            f"critical point of psi at {critical:g} (node {where}) is not inside G1"
        )
    off = ~in_g1
    if off.any() and not np.all(grad[off] > 0):
        j = np.flatnonzero(off & ~(grad > 0))[0]
        raise PsiConstructionError(
            f"discrete gradient of psi vanishes at node {mesh.interior_coords[j].tolist()} outside G1"
        )
    return psi


def _hull_contains(xs: np.ndarray, c: float) -> bool:
    return xs.size > 0 and xs.min() - 1e-12 <= c <= xs.max() + 1e-12


def psi_gradient_floor(mesh: Mesh, psi: BulkSurfaceField, G1: np.ndarray) -> float:
    """``min |grad psi|`` over interior nodes outside ``G1``."""
    grad = _interior_gradient(mesh, psi.packed())
    off = np.asarray(G1) < 1
    return float(grad[off].min()) if off.any() else math.inf


def default_weight_constant(
    psi: BulkSurfaceField, T: float, lam: float = DEFAULT_LAMBDA, mu: float = DEFAULT_MU
) -> float:
    """``M_w`` with ``exp(-M_w/t) = min_x theta^2 gamma^3`` at ``t = T/4``."""
    t = T / 4
    g = 1.0 / (t * (T - t))
    s = float(np.max(np.abs(psi.packed())))
    log_w = 2 * lam * (1.0 - math.exp(2 * mu * s)) * g + 3 * math.log(g)
    return max(-t * log_w, 1e-3 * T)


def evaluate_weights(params: CarlemanParams, tree: NoiseTree, mesh: Mesh, levels: Optional[Iterable[int]] = None) -> WeightField:
    if levels is None:
        levels = range(1, tree.M)
    levels = list(levels)
    for n in levels:
        if n <= 0 or n >= tree.M:
            raise ValueError(f"weights are undefined at the end points (level {n})")
    T = tree.T
    t = np.array([tree.time(n) for n in levels])
    psi = params.psi.packed()
    s = float(np.max(np.abs(psi)))
    gamma = 1.0 / (t * (T - t))
    spatial = np.exp(params.mu * psi) - math.exp(2 * params.mu * s)
    alpha = spatial[None, :] * gamma[:, None]
    gamma_t = -(T - 2 * t) * gamma**2
    alpha_t = spatial[None, :] * gamma_t[:, None]
    return WeightField(
        times=t,
        alpha=alpha,
        gamma=gamma,
        log_theta=params.lam * alpha,
        alpha_t_constant=float(np.max(np.abs(alpha_t) / (math.exp(2 * params.mu * s) * gamma[:, None] ** 2))),
        gamma_t_constant=float(np.max(np.abs(gamma_t) / gamma**2)),
    )


# ---------------------------------------------------------------------------
# log-space accumulation


def _logsumexp(parts: list[float]) -> float:
    parts = [p for p in parts if p > -math.inf]
    if not parts:
        return -math.inf
    top = max(parts)
    return top + math.log(sum(math.exp(p - top) for p in parts))


def _log_level_sum(log_w: np.ndarray, values: np.ndarray) -> float:
    """``log mean_nodes sum_dof exp(log_w) v^2`` for one level."""
    with np.errstate(divide="ignore"):
        logs = log_w[None, :] + 2 * np.log(np.abs(values))
    top = np.max(logs)
    if top == -math.inf:
        return -math.inf
    return float(top + math.log(mean_over_level(np.exp(logs - top).sum(axis=1))))


class _Accumulator:
    """Weighted space-time sums ``sum_n dt E sum_nodes w theta^2 gamma^k v^2``."""

    def __init__(self, mesh: Mesh, tree: NoiseTree, weights: WeightField):
        self.mesh, self.tree, self.wf = mesh, tree, weights
        self.levels = list(range(1, tree.M))
        with np.errstate(divide="ignore"):
            self.log_quad = np.log(mesh.weights)

    def nodal(self, field, k: float, mask: Optional[np.ndarray] = None, time_power: float = 0.0) -> float:
        """``field`` is an AdaptedField of packed values (or level list); ``mask`` packed."""
        lq = self.log_quad
        if mask is not None:
            with np.errstate(divide="ignore"):
                lq = lq + np.log(mask)
        parts = []
        for i, n in enumerate(self.levels):
            lw = lq + 2 * self.wf.log_theta[i] + k * math.log(self.wf.gamma[i])
            parts.append(math.log(self.tree.dt) + _log_level_sum(lw, np.atleast_2d(field.raw(n))))
        return _logsumexp(parts)

    def gradient(self, field, k: float, surface: bool) -> float:
        es = self.mesh.surface_edges if surface else self.mesh.bulk_edges
        if len(es.nodes) == 0:
            return -math.inf
        base = es.nodes[:, 0]
        parts = []
        for i, n in enumerate(self.levels):
            lw = np.log(es.measure) + 2 * self.wf.log_theta[i][base] + k * math.log(self.wf.gamma[i])
            diffs = es.differences(np.atleast_2d(field.raw(n)))
            parts.append(math.log(self.tree.dt) + _log_level_sum(lw, diffs))
        return _logsumexp(parts)


def _safe_exp(x: float) -> float:
    if x == -math.inf:
        return 0.0
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class CarlemanRatio:
    kind: str
    log_lhs: float
    log_rhs: float

    @property
    def lhs(self) -> float:
        return _safe_exp(self.log_lhs)

    @property
    def rhs(self) -> float:
        return _safe_exp(self.log_rhs)

    @property
    def ratio(self) -> float:
        if self.log_lhs == -math.inf:
            return 0.0
        if self.log_rhs == -math.inf:
            return math.inf
        return _safe_exp(self.log_lhs - self.log_rhs)

    def as_row(self) -> dict:
        return {"kind": self.kind, "log_lhs": self.log_lhs, "log_rhs": self.log_rhs, "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio}


def _split(mesh: Mesh, mask_interior: Optional[np.ndarray] = None, boundary: bool = False) -> np.ndarray:
    out = np.zeros(mesh.ndof)
    if boundary:
        out[mesh.boundary_slice] = 1.0
    else:
        out[mesh.interior_slice] = 1.0 if mask_interior is None else mask_interior
    return out


class _Scaled:
    """Pointwise product of a coefficient with a packed adapted field, lazily per level."""

    def __init__(self, fn):
        self.fn = fn

    def raw(self, n):
        return self.fn(n)


def carleman_ratio(kind: str, solution: AdjointSolution, problem: ProblemSpec, params: CarlemanParams) -> CarlemanRatio:
    """Both sides of the forward, backward or coupled weighted estimate.

    ``kind`` is ``"forward"`` (for ``q``), ``"backward"`` (for ``(p, P)``) or
    ``"coupled"``.  Constants are not included: the ratio is the smallest
    admissible constant for this data.
    """
    mesh, tree = problem.mesh, problem.tree
    if solution.q.y.level(0).shape[1] != mesh.ndof or len(solution.q.y) != tree.M + 1:
        raise ValueError("solution does not match the problem's mesh and tree")
    wf = evaluate_weights(params, tree, mesh)
    acc = _Accumulator(mesh, tree, wf)
    lam = params.lam
    L = math.log(lam)
    q, p, P = solution.q.y, solution.p.z, solution.p.Z
    bulk, surf = _split(mesh), _split(mesh, boundary=True)
    g1 = _split(mesh, params.G1)
    g0 = _split(mesh, problem.G0)
    pot = problem.potentials
    obs = problem.observation

    def state_terms(f, pw_zero, pw_grad):
        return [
            pw_zero + acc.nodal(f, 3, bulk),
            pw_zero + acc.nodal(f, 3, surf),
            pw_grad + acc.gradient(f, 1, surface=False),
            pw_grad + acc.gradient(f, 1, surface=True),
        ]

    if kind == "forward":
        lhs = state_terms(q, 3 * L, L)
        fq = _Scaled(lambda n: pot.drift(mesh, n) * q.raw(n))
        gq = _Scaled(lambda n: pot.noise(mesh, n) * q.raw(n))
        rhs = [
            3 * L + acc.nodal(q, 3, g1),
            acc.nodal(fq, 0),
            2 * L + acc.nodal(gq, 2),
        ]
    elif kind == "backward":
        lhs = state_terms(p, 3 * L, L)
        Fp = _Scaled(
            lambda n: -pot.drift(mesh, n) * p.raw(n)
            - pot.noise(mesh, n) * P.raw(n)
            - (obs * q.raw(n) if problem.active(n) else 0.0)
        )
        rhs = [
            3 * L + acc.nodal(p, 3, g1),
            acc.nodal(Fp, 0),
            2 * L + acc.nodal(P, 2, bulk),
            2 * L + acc.nodal(P, 1, surf),
        ]
    elif kind == "coupled":
        lhs = state_terms(p, 2 * L, 0.0) + state_terms(q, 2 * L, 0.0)
        rhs = [
            12 * L + acc.nodal(p, 7, g0),
            L + acc.nodal(P, 2, bulk),
            L + acc.nodal(P, 1, surf),
        ]
    else:
        raise ValueError(f"unknown estimate kind {kind!r}")
    return CarlemanRatio(kind, _logsumexp(lhs), _logsumexp(rhs))


# ---------------------------------------------------------------------------
# observability


@dataclass(frozen=True)
class ObservabilityStats:
    ratios: list
    skipped: int
    failures: list  # sample indices with rhs == 0 < lhs

    @property
    def max(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios else 0.0

    @property
    def min(self) -> float:
        return min(self.ratios) if self.ratios else 0.0

    def to_dict(self) -> dict:
        return {
            "samples": len(self.ratios) + self.skipped,
            "skipped": self.skipped,
            "unique_continuation_failures": self.failures,
            "max": self.max,
            "mean": self.mean,
            "min": self.min,
            "ratios": self.ratios,
        }


def observability_sides(problem: ProblemSpec, solution: AdjointSolution, weight_constant: float) -> tuple[float, float]:
    """(weighted adjoint energy, observation energy) of one adjoint solve.

    The observation side uses the dual variable ``zeta`` that the controls are
    built from, so it equals ``<Lambda q0, q0>_h``.
    """
    mesh, tree = problem.mesh, problem.tree
    w = mesh.weights
    wg = w * problem.control_region
    lhs = rhs = 0.0
    for n in range(tree.M):
        t = tree.time(n)
        if n > 0:
            pn = solution.p.z.raw(n)
            lhs += tree.dt * math.exp(-weight_constant / t) * float(mean_over_level(pn**2 @ w))
        zt, P = solution.p.zeta.raw(n), solution.p.Z.raw(n)
        rhs += tree.dt * float(mean_over_level(zt**2 @ wg + P**2 @ w))
    return lhs, rhs


def observability_ratio(problem: ProblemSpec, q0_samples, weight_constant: float) -> ObservabilityStats:
    samples = list(q0_samples)
    if not samples:
        raise ValueError("observability study needs at least one sample")
    ratios, skipped, failures = [], 0, []
    for i, q0 in enumerate(samples):
        q0 = q0.packed() if isinstance(q0, BulkSurfaceField) else np.asarray(q0, dtype=float)
        if not np.any(q0):
            skipped += 1
            continue
        lhs, rhs = observability_sides(problem, solve_adjoint(problem, q0), weight_constant)
        if rhs == 0.0:
            if lhs > 0.0:
                failures.append(i)
            else:
                skipped += 1
            continue
        ratios.append(lhs / rhs)
    return ObservabilityStats(ratios, skipped, failures)


def random_unit_samples(mesh: Mesh, rng: np.random.Generator, count: int) -> list:
    out = []
    for _ in range(count):
        v = rng.standard_normal(mesh.ndof)
        out.append(v / math.sqrt(float(np.dot(mesh.weights * v, v))))
    return out


def stats_json(stats: ObservabilityStats) -> str:
    return json.dumps(stats.to_dict(), sort_keys=True, indent=2)
