"""Insensitizing-control problem, the observed energy and the coupled cascade.

The cascade couples the controlled forward state ``y`` to a backward state
``z`` driven by ``-chi_O y`` (and ``-chi_{O_Gamma} y_Gamma`` on the boundary)
with zero terminal value.  The derivative of the energy ``Phi`` in the
direction of an initial perturbation equals the pairing of that perturbation
with ``z(0)``, so insensitivity is equivalent to ``z(0) = 0``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .mesh import BulkSurfaceField, Mesh, ShapeError
from .solvers import (
    BackwardSolution,
    ForwardSolution,
    ImplicitStep,
    Potentials,
    pairing,
    solve_backward,
    solve_forward,
)
from .tree import AdaptedField, NoiseTree, mean_over_level

log = logging.getLogger(__name__)

WEIGHTED_SOURCE_WARN = 1e12


class ProblemError(ValueError):
    """The problem violates a structural hypothesis."""


@dataclass(frozen=True, eq=False)
class ControlTriple:
    u: AdaptedField  # interior, levels 0..M-1; only its G0 part acts
    v1: AdaptedField  # interior
    v2: AdaptedField  # boundary

    @classmethod
    def zeros(cls, mesh: Mesh, tree: NoiseTree) -> "ControlTriple":
        return cls(
            AdaptedField.zeros(tree.M, (mesh.n_interior,)),
            AdaptedField.zeros(tree.M, (mesh.n_interior,)),
            AdaptedField.zeros(tree.M, (mesh.n_boundary,)),
        )

    def scaled(self, c: float) -> "ControlTriple":
        return ControlTriple(self.u * c, self.v1 * c, self.v2 * c)

    def norms(self, mesh: Mesh, tree: NoiseTree, g0: Optional[np.ndarray] = None) -> dict:
        """``L^2_F(0,T; L^2)`` norms of each component."""
        gi = mesh.interior_weights if g0 is None else mesh.interior_weights * g0

        def l2(field: AdaptedField, w: np.ndarray) -> float:
            total = sum(
                tree.dt * float(mean_over_level(np.atleast_2d(field.raw(n)) ** 2 @ w))
                for n in range(tree.M)
            )
            return math.sqrt(max(total, 0.0))

        return {
            "u": l2(self.u, gi),
            "v1": l2(self.v1, mesh.interior_weights),
            "v2": l2(self.v2, mesh.boundary_weights),
        }


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    mesh: Mesh
    tree: NoiseTree
    potentials: Potentials
    G0: np.ndarray  # interior mask
    O: np.ndarray  # interior mask
    O_Gamma: np.ndarray  # boundary mask
    G1: np.ndarray  # interior mask
    xi: AdaptedField  # packed (xi1 | xi2), levels 0..M-1
    y0: BulkSurfaceField
    t0: float = 0.0
    weight_constant: float = 1.0
    allow_disjoint: bool = False

    def __post_init__(self):
        m = self.mesh
        for name, arr, size in (
            ("G0", self.G0, m.n_interior),
            ("O", self.O, m.n_interior),
            ("G1", self.G1, m.n_interior),
            ("O_Gamma", self.O_Gamma, m.n_boundary),
        ):
            if np.shape(arr) != (size,):
                raise ShapeError(f"mask {name} has shape {np.shape(arr)}, expected ({size},)")
            if np.any((arr < 0) | (arr > 1)):
                raise ProblemError(f"mask {name} has values outside [0, 1]")
        if len(self.xi) < self.tree.M or self.xi.value_shape != (m.ndof,):
            raise ShapeError("source xi must be a packed adapted field on levels 0..M-1")
        if not 0 <= self.t0 < self.tree.T:
            raise ProblemError(f"functional start time t0={self.t0} must lie in [0, T)")
        overlap = (self.G0 >= 1) & (self.O >= 1)
        if not overlap.any():
            if not self.allow_disjoint:
                raise ProblemError("G0 and O must intersect (G0 ∩ O is empty)")
            log.warning("G0 ∩ O is empty; building the problem for exploration only")
        if not (self.G1 >= 1).any():
            raise ProblemError("G1 must be nonempty")
        allowed = overlap if overlap.any() else self.G0 >= 1
        outside = (self.G1 > 0) & ~allowed
        if outside.any():
            bad = self.mesh.interior_coords[outside][0]
            raise ProblemError(
                f"G1 ⊂ G0 ∩ O violated: node at {bad.tolist()} lies in G1 but not in G0 ∩ O"
            )
        w = weighted_source_norms(self)
        if not all(v < WEIGHTED_SOURCE_WARN for v in w.values()):
            log.warning(
                "weighted source norm exp(M_w/t) xi is large or infinite (%s) for M_w=%g",
                w,
                self.weight_constant,
            )

    @cached_property
    def step(self) -> ImplicitStep:
        return ImplicitStep(self.mesh, self.tree.dt)

    @property
    def observation(self) -> np.ndarray:
        """Packed indicator of ``O`` (interior) and ``O_Gamma`` (boundary)."""
        return np.concatenate([self.O, self.O_Gamma])

    @property
    def control_region(self) -> np.ndarray:
        """Packed indicator of ``G0`` (zero on the boundary)."""
        return np.concatenate([self.G0, np.zeros(self.mesh.n_boundary)])

    def active(self, n: int) -> bool:
        """Whether time level ``n`` enters the observed energy."""
        return self.tree.time(n) >= self.t0 - 1e-12 * self.tree.T

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def homogeneous(self) -> "ProblemSpec":
        """Same problem with zero source and zero initial datum."""
        return self.replace(
            xi=AdaptedField.zeros(self.tree.M, (self.mesh.ndof,)), y0=BulkSurfaceField.zeros(self.mesh)
        )


# ---------------------------------------------------------------------------
# sources


def bump_profile(mesh: Mesh, center: float, width: float, amplitude: float = 1.0) -> np.ndarray:
    """Smooth compact bump in the first coordinate (``x`` or ``r``), interior nodes."""
    s = (mesh.interior_coords[:, 0] - center) / width
    out = np.zeros(mesh.n_interior)
    inside = np.abs(s) < 1
    out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def time_weighted_source(
    mesh: Mesh,
    tree: NoiseTree,
    interior_shape: np.ndarray,
    boundary_shape: Optional[np.ndarray] = None,
    weight_constant: float = 1.0,
) -> AdaptedField:
    """Deterministic source ``exp(-M_w / t) * shape`` (zero at ``t = 0``)."""
    if boundary_shape is None:
        boundary_shape = np.zeros(mesh.n_boundary)
    shape = np.concatenate([interior_shape, boundary_shape])
    levels = []
    for n in range(tree.M):
        t = tree.time(n)
        factor = 0.0 if t == 0 else math.exp(-weight_constant / t)
        levels.append(factor * shape)
    return AdaptedField.deterministic(levels)


def weighted_source_norms(problem: ProblemSpec) -> dict:
    """``|exp(M_w/t) xi_1|`` and ``|exp(M_w/t) xi_2|`` in ``L^2_F(0,T; L^2)``."""
    m, tree = problem.mesh, problem.tree
    totals = {"xi1": 0.0, "xi2": 0.0}
    parts = {"xi1": m.interior_slice, "xi2": m.boundary_slice}
    for n in range(tree.M):
        t = tree.time(n)
        v = np.atleast_2d(problem.xi.raw(n))
        for key, sl in parts.items():
            energy = float(mean_over_level(v[:, sl] ** 2 @ m.weights[sl]))
            if energy == 0.0:
                continue
            if t == 0:
                totals[key] = math.inf
                continue
            log_term = math.log(tree.dt * energy) + 2 * problem.weight_constant / t
            totals[key] += math.exp(log_term) if log_term < 700 else math.inf
    return {k: math.sqrt(v) for k, v in totals.items()}


# ---------------------------------------------------------------------------
# cascade


@dataclass(frozen=True, eq=False)
class CascadeSolution:
    forward: ForwardSolution
    backward: BackwardSolution

    @property
    def y(self) -> AdaptedField:
        return self.forward.y

    @property
    def z(self) -> AdaptedField:
        return self.backward.z

    @property
    def Z(self) -> AdaptedField:
        return self.backward.Z

    def z0(self, mesh: Mesh) -> BulkSurfaceField:
        return BulkSurfaceField.from_packed(mesh, self.backward.z.level(0)[0])


def control_sources(problem: ProblemSpec, controls: ControlTriple) -> tuple[AdaptedField, AdaptedField]:
    """Packed drift source ``xi + chi_G0 u`` and noise source ``(v1, v2)``."""
    m, M = problem.mesh, problem.tree.M
    drift, noise = [], []
    for n in range(M):
        u = np.atleast_2d(controls.u.raw(n)) * problem.G0
        k = u.shape[0]
        drift.append(
            problem.xi.raw(n) + np.concatenate([u, np.zeros((k, m.n_boundary))], axis=1)
        )
        v1, v2 = np.atleast_2d(controls.v1.raw(n)), np.atleast_2d(controls.v2.raw(n))
        k = max(v1.shape[0], v2.shape[0])
        noise.append(
            np.concatenate(
                [np.broadcast_to(v1, (k, m.n_interior)), np.broadcast_to(v2, (k, m.n_boundary))], axis=1
            )
        )
    return AdaptedField(drift), AdaptedField(noise)


def observed_source(problem: ProblemSpec, state: AdaptedField) -> AdaptedField:
    """Backward drift source ``-chi_O y`` restricted to the observed time window."""
    obs = problem.observation
    return AdaptedField(
        [
            -obs * state.raw(n) if problem.active(n) else np.zeros((1, problem.mesh.ndof))
            for n in range(problem.tree.M)
        ]
    )


def solve_forward_state(
    problem: ProblemSpec, controls: Optional[ControlTriple] = None, initial=None
) -> ForwardSolution:
    controls = controls or ControlTriple.zeros(problem.mesh, problem.tree)
    f, g = control_sources(problem, controls)
    y0 = problem.y0 if initial is None else initial
    return solve_forward(problem.mesh, problem.tree, problem.potentials, y0, f, g, step=problem.step)


def solve_cascade(
    problem: ProblemSpec, controls: Optional[ControlTriple] = None, initial=None
) -> CascadeSolution:
    fwd = solve_forward_state(problem, controls, initial)
    bwd = solve_backward(
        problem.mesh,
        problem.tree,
        problem.potentials.negated(),
        np.zeros((1, problem.mesh.ndof)),
        observed_source(problem, fwd.y),
        step=problem.step,
    )
    return CascadeSolution(fwd, bwd)


def phi(problem: ProblemSpec, forward: ForwardSolution | AdaptedField) -> float:
    """Observed energy ``1/2 sum_{t_n >= t0} dt E[<chi_O y_n, y_n>]``."""
    y = forward.y if isinstance(forward, ForwardSolution) else forward
    obs = problem.observation
    total = 0.0
    for n in range(problem.tree.M):
        if problem.active(n):
            v = y.raw(n)
            total += problem.tree.dt * pairing(problem.mesh, obs * v, v)
    return 0.5 * total


class TauDerivative(NamedTuple):
    fd_value: float
    duality_value: float
    scale: float


def _direction(problem: ProblemSpec, direction, tau_index: int, normalize: bool) -> np.ndarray:
    m = problem.mesh
    d = direction.packed() if isinstance(direction, BulkSurfaceField) else np.asarray(direction, float)
    if d.shape != (m.ndof,):
        raise ShapeError("direction does not conform to mesh")
    d = d.copy()
    if tau_index == 1:
        d[m.boundary_slice] = 0.0
    elif tau_index == 2:
        d[m.interior_slice] = 0.0
    else:
        raise ValueError(f"tau_index must be 1 or 2, got {tau_index}")
    nrm = math.sqrt(float(np.dot(m.weights * d, d)))
    if nrm == 0:
        raise ValueError("perturbation direction is zero")
    return d / nrm if normalize else d


def phi_tau_derivative(
    problem: ProblemSpec,
    controls: Optional[ControlTriple],
    direction,
    tau_index: int,
    delta: Optional[float] = None,
    normalize: bool = True,
    cascade: Optional[CascadeSolution] = None,
) -> TauDerivative:
    """Central difference of ``Phi`` in ``tau`` next to the pairing with ``z(0)``.

    ``Phi`` is quadratic in ``tau`` so the central difference is exact for any
    ``delta``; ``scale`` bounds the size of the quantities being differenced.
    """
    m = problem.mesh
    d = _direction(problem, direction, tau_index, normalize)
    y0 = problem.y0.packed()
    if delta is None:
        delta = 1e-3 * max(1.0, math.sqrt(float(np.dot(m.weights * y0, y0))))
    if not delta > 0:
        raise ValueError("delta must be positive")
    plus = phi(problem, solve_forward_state(problem, controls, y0 + delta * d))
    minus = phi(problem, solve_forward_state(problem, controls, y0 - delta * d))
    fd = (plus - minus) / (2 * delta)
    if cascade is None:
        cascade = solve_cascade(problem, controls)
    z0 = cascade.backward.z.level(0)[0]
    dual = float(np.dot(m.weights * d, z0))
    scale = abs(dual) + (plus + minus) / (2 * delta)
    return TauDerivative(fd, dual, scale)


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    q: ForwardSolution
    p: BackwardSolution

    @property
    def P(self) -> AdaptedField:
        """Martingale part (interior ``P``, boundary ``P-hat``), packed."""
        return self.p.Z


def solve_adjoint(problem: ProblemSpec, q0) -> AdjointSolution:
    """Homogeneous forward ``q`` from ``q0``, then backward ``p`` driven by ``-chi_O q``."""
    q = solve_forward(problem.mesh, problem.tree, problem.potentials, q0, step=problem.step)
    p = solve_backward(
        problem.mesh,
        problem.tree,
        problem.potentials.negated(),
        np.zeros((1, problem.mesh.ndof)),
        observed_source(problem, q.y),
        step=problem.step,
    )
    return AdjointSolution(q, p)
