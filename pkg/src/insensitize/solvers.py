"""Forward and backward stochastic parabolic solvers on the noise tree.

Forward step from a level-``n`` node (drift implicit, diffusion explicit)::

    y* = B (y_n + dt (a y_n + f_n)),          B = (I - dt A_h)^{-1}
    y_{n+1}^{+/-} = y* +/- sqrt(dt) (c y_n + g_n)

Backward step, derived as the transpose of the forward step in the tree
inner product ``E <., .>_h`` (see ``docs/scheme_derivation.md``)::

    zhat_n = (z^+ + z^-) / 2,   Z_n = (z^+ - z^-) / (2 sqrt(dt))
    zeta_n = B zhat_n
    z_n    = zeta_n - dt (a3 zeta_n + a4 Z_n + F_n)

With ``a3 = -a``, ``a4 = -c`` the two recursions satisfy, to round-off,

    E<y_M, z_M> - <y_0, z_0> = sum_n dt E[<y_n, F_n> + <f_n, zeta_n> + <g_n, Z_n>].

``zeta`` is therefore the dual variable paired with drift sources; it is
stored on every backward solution.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import BulkSurfaceField, Mesh, ShapeError
from .tree import AdaptedField, NoiseTree, halve, martingale_part, mean_over_level


class SolverError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


Coefficient = object  # float | ndarray over the region | AdaptedField over the region


def _region_level(coef, n: int, size: int) -> np.ndarray:
    if isinstance(coef, AdaptedField):
        v = np.asarray(coef.raw(n), dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        return np.broadcast_to(v, (v.shape[0], size))
    arr = np.asarray(coef, dtype=float)
    if arr.ndim == 0:
        return np.full((1, size), float(arr))
    if arr.shape != (size,):
        raise ShapeError(f"coefficient of shape {arr.shape} does not match region size {size}")
    return arr[None, :]


def _pack_levels(mesh: Mesh, interior: np.ndarray, boundary: np.ndarray) -> np.ndarray:
    k = max(interior.shape[0], boundary.shape[0])
    return np.concatenate(
        [
            np.broadcast_to(interior, (k, mesh.n_interior)),
            np.broadcast_to(boundary, (k, mesh.n_boundary)),
        ],
        axis=1,
    )


def _sup(coef) -> float:
    if isinstance(coef, AdaptedField):
        return max((float(np.max(np.abs(v))) if v.size else 0.0) for v in coef)
    arr = np.asarray(coef, dtype=float)
    return float(np.max(np.abs(arr))) if arr.size else 0.0


@dataclass(frozen=True, eq=False)
class Potentials:
    """Reaction (``a1``, ``b1``) and noise (``a2``, ``b2``) coefficients.

    For the backward equation the same container carries ``(a3, a4, b3, b4)``.
    Each entry is a constant, a deterministic array over its region, or an
    ``AdaptedField`` over its region.
    """

    a1: Coefficient = 0.0
    a2: Coefficient = 0.0
    b1: Coefficient = 0.0
    b2: Coefficient = 0.0

    def __post_init__(self):
        for name in ("a1", "a2", "b1", "b2"):
            s = _sup(getattr(self, name))
            if not math.isfinite(s):
                raise ContractViolation(f"potential {name} is not bounded")

    def drift(self, mesh: Mesh, n: int) -> np.ndarray:
        return _pack_levels(
            mesh,
            _region_level(self.a1, n, mesh.n_interior),
            _region_level(self.b1, n, mesh.n_boundary),
        )

    def noise(self, mesh: Mesh, n: int) -> np.ndarray:
        return _pack_levels(
            mesh,
            _region_level(self.a2, n, mesh.n_interior),
            _region_level(self.b2, n, mesh.n_boundary),
        )

    def negated(self) -> "Potentials":
        def neg(c):
            return -c if isinstance(c, AdaptedField) else -np.asarray(c, dtype=float)

        return Potentials(neg(self.a1), neg(self.a2), neg(self.b1), neg(self.b2))

    def sup_norms(self) -> dict:
        return {k: _sup(getattr(self, k)) for k in ("a1", "a2", "b1", "b2")}


class ImplicitStep:
    """``B = (I - dt A_h)^{-1}``, applied as ``(W + dt K)^{-1} W``.

    ``W + dt K`` is symmetric positive definite, so one sparse LU serves every
    node of every level, in the forward and in the backward recursion alike.
    """

    def __init__(self, mesh: Mesh, dt: float):
        self.weights = mesh.weights
        matrix = (sp.diags(self.weights) + dt * mesh.stiffness).tocsc()
        try:
            self._lu = splu(matrix)
        except RuntimeError as exc:  # exactly singular factor
            raise SolverError(f"implicit step matrix is singular: {exc}") from exc

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``B`` to every row of ``rhs`` (shape ``(k, ndof)``)."""
        sol = self._lu.solve(np.asfortranarray((rhs * self.weights).T))
        if not np.all(np.isfinite(sol)):
            raise SolverError("non-finite values from the implicit step")
        return np.ascontiguousarray(sol.T)


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    y: AdaptedField  # levels 0..M, packed values
    potentials: Potentials
    drift_source: AdaptedField  # levels 0..M-1
    noise_source: AdaptedField  # levels 0..M-1
    initial: np.ndarray  # packed


@dataclass(frozen=True, eq=False)
class BackwardSolution:
    z: AdaptedField  # levels 0..M
    Z: AdaptedField  # levels 0..M-1 (interior part Z, boundary part Z-hat)
    zeta: AdaptedField  # levels 0..M-1, B E_n[z_{n+1}]
    potentials: Potentials
    source: AdaptedField  # levels 0..M-1
    terminal: np.ndarray  # leaf level, packed


def _check_dt(tree: NoiseTree) -> None:
    if tree.dt < 1e-12 * tree.T:
        raise SolverError(f"degenerate time step dt={tree.dt}")


def _as_source(mesh: Mesh, tree: NoiseTree, src: Optional[AdaptedField], name: str) -> AdaptedField:
    if src is None:
        return AdaptedField.zeros(tree.M, (mesh.ndof,))
    if len(src) < tree.M:
        raise ShapeError(f"{name} defined on {len(src)} levels, need {tree.M}")
    if src.value_shape != (mesh.ndof,):
        raise ShapeError(f"{name} values have shape {src.value_shape}, expected ({mesh.ndof},)")
    return src


def _packed_initial(mesh: Mesh, initial) -> np.ndarray:
    if isinstance(initial, BulkSurfaceField):
        if initial.interior.shape != (mesh.n_interior,) or initial.boundary.shape != (
            mesh.n_boundary,
        ):
            raise ShapeError("initial datum does not conform to mesh")
        return initial.packed()
    arr = np.asarray(initial, dtype=float)
    if arr.shape != (mesh.ndof,):
        raise ShapeError(f"initial datum of shape {arr.shape}, expected ({mesh.ndof},)")
    return arr


def solve_forward(
    mesh: Mesh,
    tree: NoiseTree,
    potentials: Potentials,
    initial,
    drift_source: Optional[AdaptedField] = None,
    noise_source: Optional[AdaptedField] = None,
    step: Optional[ImplicitStep] = None,
) -> ForwardSolution:
    """Solve the forward equation with dynamic boundary conditions."""
    _check_dt(tree)
    f = _as_source(mesh, tree, drift_source, "drift source")
    g = _as_source(mesh, tree, noise_source, "noise source")
    y0 = _packed_initial(mesh, initial)
    B = step or ImplicitStep(mesh, tree.dt)
    dt, s = tree.dt, tree.sqrt_dt

    levels = [y0[None, :].copy()]
    for n in range(tree.M):
        yn = levels[-1]
        ystar = B(yn + dt * (potentials.drift(mesh, n) * yn + f.raw(n)))
        noise = potentials.noise(mesh, n) * yn + g.raw(n)
        ystar = np.broadcast_to(ystar, (2**n, mesh.ndof))
        noise = np.broadcast_to(noise, (2**n, mesh.ndof))
        nxt = np.empty((2 ** (n + 1), mesh.ndof))
        nxt[0::2] = ystar + s * noise
        nxt[1::2] = ystar - s * noise
        levels.append(nxt)
    return ForwardSolution(AdaptedField(levels), potentials, f, g, y0)


def solve_backward(
    mesh: Mesh,
    tree: NoiseTree,
    potentials: Potentials,
    terminal,
    source: Optional[AdaptedField] = None,
    step: Optional[ImplicitStep] = None,
) -> BackwardSolution:
    """Solve the backward equation; ``potentials`` carries ``(a3, a4, b3, b4)``."""
    _check_dt(tree)
    F = _as_source(mesh, tree, source, "backward source")
    if isinstance(terminal, BulkSurfaceField):
        zT = terminal.packed()[None, :]
    else:
        zT = np.asarray(terminal, dtype=float)
        if zT.ndim == 1:
            zT = zT[None, :]
    if zT.shape[1:] != (mesh.ndof,) or zT.shape[0] not in (1, 2**tree.M):
        raise ShapeError(f"terminal datum of shape {zT.shape} is not leaf-indexed")
    B = step or ImplicitStep(mesh, tree.dt)
    dt, s = tree.dt, tree.sqrt_dt

    z = [None] * (tree.M + 1)
    Z = [None] * tree.M
    zeta = [None] * tree.M
    z[tree.M] = np.broadcast_to(zT, (2**tree.M, mesh.ndof)).copy()
    for n in range(tree.M - 1, -1, -1):
        nxt = z[n + 1]
        zhat = halve(nxt)
        Zn = martingale_part(nxt, s)
        zt = B(zhat)
        zn = zt - dt * (potentials.drift(mesh, n) * zt + potentials.noise(mesh, n) * Zn + F.raw(n))
        z[n], Z[n], zeta[n] = zn, Zn, zt
    return BackwardSolution(AdaptedField(z), AdaptedField(Z), AdaptedField(zeta), potentials, F, zT)


# ---------------------------------------------------------------------------
# duality


def pairing(mesh: Mesh, u: np.ndarray, v: np.ndarray):
    """``E <u, v>_h`` for two level arrays (leading size 1 or ``2**n``)."""
    return float(mean_over_level(np.atleast_2d(u * v) @ mesh.weights))


def _same_coefficients(mesh: Mesh, tree: NoiseTree, p: Potentials, q: Potentials) -> bool:
    for n in range(tree.M):
        for a, b in ((p.drift(mesh, n), q.drift(mesh, n)), (p.noise(mesh, n), q.noise(mesh, n))):
            a, b = np.broadcast_arrays(a, b)
            if not np.array_equal(a, b):
                return False
    return True


@dataclass(frozen=True)
class DualityCheck:
    residual: float
    scale: float
    terms: dict

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else self.residual


def duality_pairing(
    mesh: Mesh, tree: NoiseTree, forward: ForwardSolution, backward: BackwardSolution
) -> DualityCheck:
    """Residual of the discrete product-rule identity between the two solves."""
    if not _same_coefficients(mesh, tree, backward.potentials, forward.potentials.negated()):
        raise ContractViolation("backward potentials must be (-a1, -a2, -b1, -b2) of the forward ones")
    y, z = forward.y, backward.z
    end = pairing(mesh, y.level(tree.M), z.level(tree.M))
    start = pairing(mesh, y.level(0), z.level(0))
    dt = tree.dt
    src_y = src_f = src_g = 0.0
    absolute = abs(end) + abs(start)
    for n in range(tree.M):
        a = dt * pairing(mesh, y.level(n), backward.source.raw(n))
        b = dt * pairing(mesh, forward.drift_source.raw(n), backward.zeta.level(n))
        c = dt * pairing(mesh, forward.noise_source.raw(n), backward.Z.level(n))
        src_y, src_f, src_g = src_y + a, src_f + b, src_g + c
        absolute += abs(a) + abs(b) + abs(c)
    residual = abs(end - start - (src_y + src_f + src_g))
    terms = {"end": end, "start": start, "state_source": src_y, "drift_source": src_f, "noise_source": src_g}
    return DualityCheck(residual, absolute, terms)


# ---------------------------------------------------------------------------
# diagnostics and export


def level_energies(mesh: Mesh, field: AdaptedField) -> np.ndarray:
    """``E ||v_n||_h^2`` per level."""
    return np.array([pairing(mesh, field.raw(n), field.raw(n)) for n in range(len(field))])


def solution_csv(mesh: Mesh, field: AdaptedField) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "offset", "node_index"] + [f"dof_{i}" for i in range(mesh.ndof)])
    for n in range(len(field)):
        v = field.level(n)
        for k in range(v.shape[0]):
            w.writerow([n, k, 2**n - 1 + k] + [f"{x:.17g}" for x in v[k]])
    return buf.getvalue()


def solution_summary(mesh: Mesh, field: AdaptedField) -> str:
    norms = np.sqrt(level_energies(mesh, field))
    return json.dumps({"levels": len(field), "norm_per_level": [float(x) for x in norms]}, sort_keys=True)
