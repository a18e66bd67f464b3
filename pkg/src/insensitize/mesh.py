"""Bulk-surface geometry and the self-adjoint discrete operator.

Two desk-scale geometries are supported:

* ``interval``: nodes ``x_0 .. x_J`` on ``[0, L]``; the two end points form the
  boundary (counting measure, no tangential direction).
* ``annulus``: a polar tensor grid on ``R0 <= r <= R1`` with periodic angle;
  both circles carry boundary nodes and a periodic Laplace-Beltrami term.

Fields are stored *packed*: interior values first, then boundary values.  The
operator is assembled from an edge energy

.. math::

    E(u, v) = \\sum_e c_e (u_i - u_j)(v_i - v_j),
    \\qquad c_e = |e|_{\\text{dual}} / \\ell_e^2,

so that ``A = -W^{-1} K`` with ``K`` the (symmetric, PSD) stiffness matrix and
``W`` the diagonal quadrature.  Hence ``<A u, v>_W = -E(u, v)`` exactly:
interior rows are the usual second difference, boundary rows are the
tangential second difference minus the one-sided normal derivative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid mesh parameters."""


class ShapeError(ValueError):
    """A field does not conform to the mesh."""


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Edges ``(i, j)`` in packed numbering with dual measure and length."""

    nodes: np.ndarray  # (E, 2) int
    measure: np.ndarray  # (E,)
    length: np.ndarray  # (E,)

    @property
    def coefficient(self) -> np.ndarray:
        return self.measure / self.length**2

    def differences(self, values: np.ndarray) -> np.ndarray:
        """Forward differences ``(v_j - v_i) / l_e`` along the last axis."""
        if len(self.nodes) == 0:
            return np.zeros(values.shape[:-1] + (0,))
        i, j = self.nodes[:, 0], self.nodes[:, 1]
        return (values[..., j] - values[..., i]) / self.length


@dataclass(frozen=True, eq=False)
class Mesh:
    kind: str
    params: dict
    interior_coords: np.ndarray
    boundary_coords: np.ndarray
    interior_weights: np.ndarray
    boundary_weights: np.ndarray
    spacing: tuple
    bulk_edges: EdgeSet
    surface_edges: EdgeSet
    stiffness: sp.csr_matrix = field(repr=False)

    @property
    def n_interior(self) -> int:
        return len(self.interior_weights)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_weights)

    @property
    def ndof(self) -> int:
        return self.n_interior + self.n_boundary

    @property
    def weights(self) -> np.ndarray:
        """Packed quadrature weights (interior then boundary)."""
        return np.concatenate([self.interior_weights, self.boundary_weights])

    @property
    def interior_slice(self) -> slice:
        return slice(0, self.n_interior)

    @property
    def boundary_slice(self) -> slice:
        return slice(self.n_interior, self.ndof)

    def operator_matrix(self) -> sp.csr_matrix:
        """Sparse ``A_h = -W^{-1} K`` acting on packed vectors."""
        return (-sp.diags(1.0 / self.weights) @ self.stiffness).tocsr()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "spacing": list(self.spacing),
            "interior_coords": self.interior_coords.tolist(),
            "boundary_coords": self.boundary_coords.tolist(),
            "interior_weights": self.interior_weights.tolist(),
            "boundary_weights": self.boundary_weights.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class BulkSurfaceField:
    """An element of ``L2(G) x L2(Gamma)``; ``boundary`` is the trace itself."""

    interior: np.ndarray
    boundary: np.ndarray

    def packed(self) -> np.ndarray:
        return np.concatenate([self.interior, self.boundary])

    @classmethod
    def from_packed(cls, mesh: Mesh, values: np.ndarray) -> "BulkSurfaceField":
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.ndof,):
            raise ShapeError(f"expected packed length {mesh.ndof}, got {values.shape}")
        return cls(values[mesh.interior_slice].copy(), values[mesh.boundary_slice].copy())

    @classmethod
    def zeros(cls, mesh: Mesh) -> "BulkSurfaceField":
        return cls(np.zeros(mesh.n_interior), np.zeros(mesh.n_boundary))

    @classmethod
    def constant(cls, mesh: Mesh, c: float) -> "BulkSurfaceField":
        return cls(np.full(mesh.n_interior, float(c)), np.full(mesh.n_boundary, float(c)))

    def __add__(self, other):
        return BulkSurfaceField(self.interior + other.interior, self.boundary + other.boundary)

    def __sub__(self, other):
        return BulkSurfaceField(self.interior - other.interior, self.boundary - other.boundary)

    def __mul__(self, c: float):
        return BulkSurfaceField(c * self.interior, c * self.boundary)

    __rmul__ = __mul__


def _check(mesh: Mesh, f: BulkSurfaceField) -> None:
    if f.interior.shape != (mesh.n_interior,) or f.boundary.shape != (mesh.n_boundary,):
        raise ShapeError(
            f"field shapes {f.interior.shape}/{f.boundary.shape} do not match mesh "
            f"({mesh.n_interior} interior, {mesh.n_boundary} boundary)"
        )


def _stiffness(ndof: int, *edge_sets: EdgeSet) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for es in edge_sets:
        if len(es.nodes) == 0:
            continue
        i, j = es.nodes[:, 0], es.nodes[:, 1]
        c = es.coefficient
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [c, c, -c, -c]
    if not rows:
        return sp.csr_matrix((ndof, ndof))
    K = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ndof, ndof)
    )
    return K.tocsr()


def _empty_edges() -> EdgeSet:
    return EdgeSet(np.zeros((0, 2), dtype=int), np.zeros(0), np.zeros(0))


def build_interval_mesh(J: int, L: float = 1.0) -> Mesh:
    """Uniform grid ``x_j = j L / J``; end points are the boundary.

    Interior quadrature weight is ``h``, boundary weight is 1 (counting measure).
    """
    if int(J) != J or J < 2:
        raise MeshError(f"interval mesh needs J >= 2 cells, got J={J}")
    if not L > 0:
        raise MeshError(f"interval length must be positive, got L={L}")
    J = int(J)
    h = L / J
    x = np.linspace(0.0, L, J + 1)
    ni = J - 1
    # packed index of grid node j
    pidx = np.empty(J + 1, dtype=int)
    pidx[1:J] = np.arange(ni)
    pidx[0], pidx[J] = ni, ni + 1
    edges = np.stack([pidx[:-1], pidx[1:]], axis=1)
    bulk = EdgeSet(edges, np.full(J, h), np.full(J, h))
    surface = _empty_edges()
    return Mesh(
        kind="interval",
        params={"J": J, "L": float(L)},
        interior_coords=x[1:J].reshape(-1, 1),
        boundary_coords=np.array([[0.0], [float(L)]]),
        interior_weights=np.full(ni, h),
        boundary_weights=np.ones(2),
        spacing=(h,),
        bulk_edges=bulk,
        surface_edges=surface,
        stiffness=_stiffness(ni + 2, bulk, surface),
    )


def build_annulus_mesh(Nr: int, Nphi: int, R0: float, R1: float) -> Mesh:
    """Polar grid with ``Nr`` radial cells and ``Nphi`` angular nodes.

    Radial rings ``r_i = R0 + i hr`` for ``i = 0..Nr``; rings 0 and ``Nr`` are
    boundary circles.  Interior weights are polar cell areas ``r_i hr dphi``,
    boundary weights are arc lengths ``R dphi``.
    """
    if R0 <= 0:
        raise MeshError(f"annulus needs R0 > 0 (r = 0 is singular), got R0={R0}")
    if not R1 > R0:
        raise MeshError(f"annulus needs R1 > R0, got R0={R0}, R1={R1}")
    if Nr < 3 or Nphi < 4:
        raise MeshError(f"annulus needs Nr >= 3 and Nphi >= 4, got Nr={Nr}, Nphi={Nphi}")
    Nr, Nphi = int(Nr), int(Nphi)
    hr = (R1 - R0) / Nr
    dphi = 2 * math.pi / Nphi
    r = R0 + hr * np.arange(Nr + 1)
    phi = dphi * np.arange(Nphi)

    ni = (Nr - 1) * Nphi
    pidx = np.empty((Nr + 1, Nphi), dtype=int)
    pidx[1:Nr] = np.arange(ni).reshape(Nr - 1, Nphi)
    pidx[0] = ni + np.arange(Nphi)
    pidx[Nr] = ni + Nphi + np.arange(Nphi)

    # radial edges (i,k)-(i+1,k), dual measure r_{i+1/2} hr dphi
    ri = np.repeat(np.arange(Nr), Nphi)
    kk = np.tile(np.arange(Nphi), Nr)
    rad_nodes = np.stack([pidx[ri, kk], pidx[ri + 1, kk]], axis=1)
    rad_meas = (r[ri] + 0.5 * hr) * hr * dphi
    rad_len = np.full(len(ri), hr)
    # angular edges on interior rings, measure = node cell area r_i hr dphi
    ai = np.repeat(np.arange(1, Nr), Nphi)
    ak = np.tile(np.arange(Nphi), Nr - 1)
    ang_nodes = np.stack([pidx[ai, ak], pidx[ai, (ak + 1) % Nphi]], axis=1)
    ang_meas = r[ai] * hr * dphi
    ang_len = r[ai] * dphi
    bulk = EdgeSet(
        np.concatenate([rad_nodes, ang_nodes]),
        np.concatenate([rad_meas, ang_meas]),
        np.concatenate([rad_len, ang_len]),
    )
    # Laplace-Beltrami edges on both circles
    sk = np.tile(np.arange(Nphi), 2)
    si = np.repeat([0, Nr], Nphi)
    s_nodes = np.stack([pidx[si, sk], pidx[si, (sk + 1) % Nphi]], axis=1)
    s_len = r[si] * dphi
    surface = EdgeSet(s_nodes, s_len.copy(), s_len)

    rr, pp = np.meshgrid(r, phi, indexing="ij")
    coords = np.stack([rr, pp], axis=-1)
    return Mesh(
        kind="annulus",
        params={"Nr": Nr, "Nphi": Nphi, "R0": float(R0), "R1": float(R1)},
        interior_coords=coords[1:Nr].reshape(-1, 2),
        boundary_coords=np.concatenate([coords[0], coords[Nr]]),
        interior_weights=(r[1:Nr, None] * hr * dphi * np.ones(Nphi)).ravel(),
        boundary_weights=np.concatenate([np.full(Nphi, R0 * dphi), np.full(Nphi, R1 * dphi)]),
        spacing=(hr, dphi),
        bulk_edges=bulk,
        surface_edges=surface,
        stiffness=_stiffness(ni + 2 * Nphi, bulk, surface),
    )


def apply_operator(mesh: Mesh, f: BulkSurfaceField) -> BulkSurfaceField:
    """``A_h f``: Laplacian in the bulk, ``Delta_Gamma - d_nu`` on the boundary."""
    _check(mesh, f)
    out = -(mesh.stiffness @ f.packed()) / mesh.weights
    return BulkSurfaceField.from_packed(mesh, out)


def inner_product(mesh: Mesh, f1: BulkSurfaceField, f2: BulkSurfaceField) -> float:
    _check(mesh, f1)
    _check(mesh, f2)
    return float(
        np.dot(mesh.interior_weights * f1.interior, f2.interior)
        + np.dot(mesh.boundary_weights * f1.boundary, f2.boundary)
    )


def norm(mesh: Mesh, f: BulkSurfaceField) -> float:
    return math.sqrt(max(inner_product(mesh, f, f), 0.0))


def normal_derivative(mesh: Mesh, f: BulkSurfaceField) -> np.ndarray:
    """Outward normal derivative, exactly the flux used by the boundary rows."""
    _check(mesh, f)
    u = f.packed()
    nb = mesh.n_boundary
    flux = np.zeros(nb)
    es = mesh.bulk_edges
    c = es.coefficient
    i, j = es.nodes[:, 0], es.nodes[:, 1]
    ni = mesh.n_interior
    for a, b in ((i, j), (j, i)):
        on_b = a >= ni
        np.add.at(flux, a[on_b] - ni, c[on_b] * (u[a[on_b]] - u[b[on_b]]))
    return flux / mesh.boundary_weights


def energy_form(mesh: Mesh, f1: BulkSurfaceField, f2: BulkSurfaceField) -> tuple[float, float]:
    """(bulk gradient form, Beltrami form) so that ``<A f1, f2> = -(sum)``."""
    _check(mesh, f1)
    _check(mesh, f2)
    u, v = f1.packed(), f2.packed()
    out = []
    for es in (mesh.bulk_edges, mesh.surface_edges):
        out.append(float(np.sum(es.measure * es.differences(u) * es.differences(v))))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# regions


def interior_region(mesh: Mesh, spec: Sequence[float] | None, tol: float = 1e-9) -> np.ndarray:
    """Indicator of interior nodes inside a closed coordinate box.

    ``spec`` is ``(a, b)`` on the interval and ``(r0, r1)`` or
    ``(r0, r1, phi0, phi1)`` on the annulus.  ``None`` gives the empty region.
    """
    mask = np.zeros(mesh.n_interior)
    if spec is None:
        return mask
    spec = [float(s) for s in spec]
    c = mesh.interior_coords
    if mesh.kind == "interval":
        if len(spec) != 2:
            raise MeshError(f"interval region needs (a, b), got {spec}")
        a, b = spec
        inside = (c[:, 0] >= a - tol) & (c[:, 0] <= b + tol)
    else:
        if len(spec) not in (2, 4):
            raise MeshError(f"annulus region needs (r0, r1[, phi0, phi1]), got {spec}")
        inside = (c[:, 0] >= spec[0] - tol) & (c[:, 0] <= spec[1] + tol)
        if len(spec) == 4:
            inside &= _in_arc(c[:, 1], spec[2], spec[3], tol)
    mask[inside] = 1.0
    return mask


def boundary_region(mesh: Mesh, spec, tol: float = 1e-9) -> np.ndarray:
    """Indicator of boundary nodes.

    Interval: iterable of end-point coordinates, e.g. ``[1.0]``.
    Annulus: iterable of ``"inner"`` / ``"outer"`` or ``(radius, phi0, phi1)`` arcs.
    """
    mask = np.zeros(mesh.n_boundary)
    if spec is None:
        return mask
    c = mesh.boundary_coords
    for item in spec:
        if mesh.kind == "interval":
            mask[np.abs(c[:, 0] - float(item)) <= tol] = 1.0
        else:
            if item in ("inner", "outer"):
                R = mesh.params["R0"] if item == "inner" else mesh.params["R1"]
                mask[np.abs(c[:, 0] - R) <= tol] = 1.0
            else:
                R, p0, p1 = (float(v) for v in item)
                sel = (np.abs(c[:, 0] - R) <= tol) & _in_arc(c[:, 1], p0, p1, tol)
                mask[sel] = 1.0
    return mask


def _in_arc(phi: np.ndarray, p0: float, p1: float, tol: float) -> np.ndarray:
    span = (p1 - p0) % (2 * math.pi)
    if span == 0 and p1 != p0:
        return np.ones_like(phi, dtype=bool)
    return ((phi - p0) % (2 * math.pi)) <= span + tol
