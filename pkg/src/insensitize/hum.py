"""Control synthesis by penalized HUM.

The Gramian ``Lambda: q0 -> z(0)`` runs the adjoint system from ``q0``,
inserts the controls ``(chi_G0 p, P, P_hat)`` into the cascade (zero source,
zero initial datum) and returns ``z(0)``.  Because the backward solver is the
exact transpose of the forward one,

    <Lambda q0, r0>_h = sum_n dt E[<chi_G0 zeta^q, zeta^r> + <P^q, P^r>],

so ``Lambda`` is symmetric positive semidefinite in ``<., .>_h`` and conjugate
gradients apply to ``(Lambda + eps I) q0 = -z_free(0)``.  At the minimizer the
controlled response is ``z(0) = -eps q0``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cascade import (
    AdjointSolution,
    ControlTriple,
    ProblemSpec,
    phi,
    phi_tau_derivative,
    solve_adjoint,
    solve_cascade,
    weighted_source_norms,
)
from .mesh import BulkSurfaceField
from .rng import make_rng
from .tree import AdaptedField, mean_over_level

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HumConfig:
    eps: float = 1e-6
    cg_tol: float = 1e-10
    max_iter: int = 200
    record_history: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"penalty eps must be positive, got {self.eps}")
        if not 0 < self.cg_tol < 1:
            raise ValueError(f"cg_tol must lie in (0, 1), got {self.cg_tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(eq=False)
class HumResult:
    q0: BulkSurfaceField
    controls: ControlTriple
    iterations: int
    converged: bool
    final_residual: float  # relative, from the verification solve
    control_energy: float
    dual_objective: float  # J_eps(q0*) <= 0
    z0_norm: float
    free_response_norm: float
    defect: dict  # sup over unit directions of |dPhi/dtau_i|
    eps: float
    cg_tol: float
    history: list = field(default_factory=list)

    @property
    def penalized_cost(self) -> float:
        """``1/2 |controls|^2 + |z(0)|^2 / (2 eps)`` at the optimum, equal to ``-J_eps``."""
        return -self.dual_objective

    @property
    def penalty_bound(self) -> float:
        return math.sqrt(2 * self.eps * max(self.penalized_cost, 0.0)) * (1 + 10 * self.cg_tol)

    def to_dict(self, mesh, tree) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_residual": self.final_residual,
            "control_energy": self.control_energy,
            "dual_objective": self.dual_objective,
            "penalized_cost": self.penalized_cost,
            "penalty_bound": self.penalty_bound,
            "z0_norm": self.z0_norm,
            "free_response_norm": self.free_response_norm,
            "defect": self.defect,
            "eps": self.eps,
            "cg_tol": self.cg_tol,
            "control_norms": self.controls.norms(mesh, tree),
            "q0": {"interior": self.q0.interior.tolist(), "boundary": self.q0.boundary.tolist()},
        }

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "relative_residual [1]", "J_eps [energy]"])
        for it, res, J in self.history:
            w.writerow([it, f"{res:.17g}", f"{J:.17g}"])
        return buf.getvalue()


def controls_from_adjoint(problem: ProblemSpec, adj: AdjointSolution) -> ControlTriple:
    """``(u, v1, v2) = (chi_G0 zeta, P, P_hat)`` from an adjoint solve."""
    m = problem.mesh
    isl, bsl = m.interior_slice, m.boundary_slice
    zeta, P = adj.p.zeta, adj.p.Z
    return ControlTriple(
        AdaptedField([zeta.raw(n)[:, isl] * problem.G0 for n in range(len(zeta))]),
        AdaptedField([P.raw(n)[:, isl] for n in range(len(P))]),
        AdaptedField([P.raw(n)[:, bsl] for n in range(len(P))]),
    )


def observation_energy(problem: ProblemSpec, adj: AdjointSolution) -> float:
    """``sum_n dt E[|chi_G0 zeta|^2 + |P|^2 + |P_hat|^2]``, equal to ``<Lambda q0, q0>``."""
    m, tree = problem.mesh, problem.tree
    wg = m.weights * problem.control_region
    total = 0.0
    for n in range(tree.M):
        zt, P = adj.p.zeta.raw(n), adj.p.Z.raw(n)
        total += tree.dt * float(mean_over_level(zt**2 @ wg + P**2 @ m.weights))
    return total


def _packed(mesh, q0) -> np.ndarray:
    return q0.packed() if isinstance(q0, BulkSurfaceField) else np.asarray(q0, dtype=float)


def gramian_apply(problem: ProblemSpec, q0) -> BulkSurfaceField:
    m = problem.mesh
    adj = solve_adjoint(problem, _packed(m, q0))
    sol = solve_cascade(problem.homogeneous(), controls_from_adjoint(problem, adj))
    return sol.z0(m)


def free_response(problem: ProblemSpec) -> BulkSurfaceField:
    return solve_cascade(problem).z0(problem.mesh)


def solve_hum(problem: ProblemSpec, config: HumConfig = HumConfig()) -> HumResult:
    m, tree = problem.mesh, problem.tree
    w = m.weights

    def ip(a, b):
        return float(np.dot(w * a, b))

    zfree = free_response(problem).packed()
    free_norm = math.sqrt(ip(zfree, zfree))
    if free_norm <= 1e-14:
        zero = ControlTriple.zeros(m, tree)
        return HumResult(
            BulkSurfaceField.zeros(m), zero, 0, True, 0.0, 0.0, 0.0, free_norm, free_norm,
            {"tau1": 0.0, "tau2": 0.0}, config.eps, config.cg_tol, [],
        )

    def apply(v):
        return gramian_apply(problem, v).packed() + config.eps * v

    b = -zfree
    bnorm = free_norm
    q = np.zeros(m.ndof)
    r = b.copy()
    d = r.copy()
    rr = ip(r, r)
    history = []
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        Ad = apply(d)
        alpha = rr / ip(d, Ad)
        q += alpha * d
        r -= alpha * Ad
        rr_new = ip(r, r)
        rel = math.sqrt(rr_new) / bnorm
        if config.record_history:
            history.append((it, rel, -0.5 * ip(q, b + r)))
        if rel <= config.cg_tol:
            converged = True
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    if not converged:
        log.warning("CG stopped after %d iterations at relative residual %.3e", it, rel)

    adj = solve_adjoint(problem, q)
    controls = controls_from_adjoint(problem, adj)
    energy = observation_energy(problem, adj)
    z0 = solve_cascade(problem, controls).backward.z.level(0)[0]
    true_res = -z0 - config.eps * q
    J = 0.5 * energy + ip(q, zfree) + 0.5 * config.eps * ip(q, q)
    isl, bsl = m.interior_slice, m.boundary_slice
    defect = {
        "tau1": math.sqrt(float(np.dot(w[isl] * z0[isl], z0[isl]))),
        "tau2": math.sqrt(float(np.dot(w[bsl] * z0[bsl], z0[bsl]))),
    }
    return HumResult(
        q0=BulkSurfaceField.from_packed(m, q),
        controls=controls,
        iterations=it,
        converged=converged,
        final_residual=math.sqrt(ip(true_res, true_res)) / bnorm,
        control_energy=energy,
        dual_objective=J,
        z0_norm=math.sqrt(ip(z0, z0)),
        free_response_norm=free_norm,
        defect=defect,
        eps=config.eps,
        cg_tol=config.cg_tol,
        history=history,
    )


def verify_insensitization(
    problem: ProblemSpec, controls: ControlTriple, n_directions: int = 10, seed: int = 0
) -> dict:
    """Finite-difference derivatives of ``Phi`` along random unit directions.

    Also reports the ratio of the control norms to the time-weighted source
    norms (the empirical constant of the control-cost estimate).
    """
    if n_directions < 1:
        raise ValueError("need at least one direction")
    m, tree = problem.mesh, problem.tree
    rng = make_rng(seed, "directions")
    sol = solve_cascade(problem, controls)
    phi_value = phi(problem, sol.forward)
    out = {"phi": phi_value, "directions": n_directions}
    for tau in (1, 2):
        rows = []
        for _ in range(n_directions):
            d = rng.standard_normal(m.ndof)
            res = phi_tau_derivative(problem, controls, d, tau, cascade=sol)
            rows.append(res)
        out[f"tau{tau}"] = {
            "max_abs_fd": max(abs(r.fd_value) for r in rows),
            "max_abs_duality": max(abs(r.duality_value) for r in rows),
            "max_fd_minus_duality": max(abs(r.fd_value - r.duality_value) for r in rows),
            "fd_values": [r.fd_value for r in rows],
            "duality_values": [r.duality_value for r in rows],
        }
    norms = controls.norms(m, tree, problem.G0)
    src = weighted_source_norms(problem)
    total_src = src["xi1"] + src["xi2"]
    total_ctl = norms["u"] + norms["v1"] + norms["v2"]
    out["control_norms"] = norms
    out["weighted_source_norms"] = src
    out["control_cost_constant"] = total_ctl / total_src if total_src > 0 else (
        0.0 if total_ctl == 0 else math.inf
    )
    z0 = sol.backward.z.level(0)[0]
    out["z0_norm"] = math.sqrt(float(np.dot(m.weights * z0, z0)))
    return out


def result_json(result: HumResult, mesh, tree, report: dict | None = None) -> str:
    payload = {"hum": result.to_dict(mesh, tree)}
    if report is not None:
        payload["verification"] = report
    return json.dumps(payload, sort_keys=True, indent=2)
