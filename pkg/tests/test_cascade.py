import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _problems import annulus_problem, h_inner, random_controls, random_problem, reference_problem
from insensitize.cascade import (
    ControlTriple,
    ProblemError,
    ProblemSpec,
    phi,
    phi_tau_derivative,
    solve_adjoint,
    solve_cascade,
    time_weighted_source,
    weighted_source_norms,
)
from insensitize.mesh import BulkSurfaceField, ShapeError, build_interval_mesh, interior_region
from insensitize.solvers import Potentials
from insensitize.tree import AdaptedField, build_tree


def test_zero_problem_zero_cascade():
    pb = reference_problem(amplitude=0.0)
    sol = solve_cascade(pb)
    assert all(np.all(sol.y.raw(n) == 0) for n in range(pb.tree.M + 1))
    assert np.all(sol.z0(pb.mesh).packed() == 0)


def test_terminal_condition_zero():
    pb = random_problem(np.random.default_rng(0))
    sol = solve_cascade(pb, random_controls(pb.mesh, pb.tree, np.random.default_rng(1)))
    assert np.all(sol.z.raw(pb.tree.M) == 0)


def test_positive_source_gives_nonzero_free_response():
    pb = reference_problem()
    sol = solve_cascade(pb)
    z0 = sol.z0(pb.mesh).packed()
    assert math.sqrt(h_inner(pb.mesh, z0, z0)) > 0
    # dz + Lz dt = -chi_O y dt: a positive state accumulates into z backwards in time
    assert np.all(z0 >= 0)


def test_cascade_linear():
    rng = np.random.default_rng(2)
    pb = random_problem(rng)
    ctl = random_controls(pb.mesh, pb.tree, rng)
    a = 2.5
    base = solve_cascade(pb, ctl)
    scaled = solve_cascade(pb.replace(xi=pb.xi * a, y0=pb.y0 * a), ctl.scaled(a))
    for n in range(pb.tree.M + 1):
        assert np.allclose(scaled.y.raw(n), a * base.y.raw(n), rtol=1e-12, atol=1e-12)
        assert np.allclose(scaled.z.raw(n), a * base.z.raw(n), rtol=1e-12, atol=1e-12)


def test_superposition():
    rng = np.random.default_rng(3)
    pb = random_problem(rng)
    c1, c2 = random_controls(pb.mesh, pb.tree, rng), random_controls(pb.mesh, pb.tree, rng)
    both = ControlTriple(c1.u + c2.u, c1.v1 + c2.v1, c1.v2 + c2.v2)
    s_both = solve_cascade(pb, both)
    s1 = solve_cascade(pb, c1)
    s2 = solve_cascade(pb.homogeneous(), c2)
    for n in range(pb.tree.M + 1):
        assert np.allclose(s_both.z.raw(n), s1.z.raw(n) + s2.z.raw(n), rtol=1e-12, atol=1e-12)


def test_phi_quadrature():
    m, tree = build_interval_mesh(10), build_tree(5, 1.0)
    O = interior_region(m, (0.1, 0.3))
    assert np.dot(m.interior_weights, O) == pytest.approx(0.3)
    pb = ProblemSpec(
        m, tree, Potentials(), interior_region(m, (0.1, 0.5)), O, np.zeros(2), interior_region(m, (0.2, 0.2)),
        AdaptedField.zeros(tree.M, (m.ndof,)), BulkSurfaceField.zeros(m),
    )
    ones = AdaptedField.deterministic([np.ones(m.ndof)] * (tree.M + 1))
    assert phi(pb, ones) == pytest.approx(0.15, rel=1e-14)


def test_phi_zero_and_nonnegative():
    pb = reference_problem(amplitude=0.0)
    assert phi(pb, solve_cascade(pb).forward) == 0.0
    rng = np.random.default_rng(5)
    for _ in range(5):
        p = random_problem(rng)
        assert phi(p, solve_cascade(p, random_controls(p.mesh, p.tree, rng)).forward) >= 0.0


def test_empty_observation_gives_zero():
    pb = random_problem(np.random.default_rng(6), J=8)
    pb = pb.replace(O=np.zeros_like(pb.O), O_Gamma=np.zeros_like(pb.O_Gamma), allow_disjoint=True)
    sol = solve_cascade(pb)
    assert phi(pb, sol.forward) == 0.0
    assert all(np.all(sol.z.raw(n) == 0) for n in range(pb.tree.M + 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.floats(1e-4, 10.0))
def test_derivative_identity(seed, tau, delta):
    rng = np.random.default_rng(seed)
    pb = random_problem(rng)
    ctl = random_controls(pb.mesh, pb.tree, rng)
    r = phi_tau_derivative(pb, ctl, rng.standard_normal(pb.mesh.ndof), tau, delta=delta)
    assert abs(r.fd_value - r.duality_value) <= 1e-9 * r.scale


def test_derivative_identity_annulus():
    rng = np.random.default_rng(7)
    pb = annulus_problem()
    for tau in (1, 2):
        r = phi_tau_derivative(pb, None, rng.standard_normal(pb.mesh.ndof), tau)
        assert abs(r.fd_value - r.duality_value) <= 1e-9 * r.scale


def test_derivative_scales_without_normalization():
    rng = np.random.default_rng(8)
    pb = random_problem(rng)
    d = rng.standard_normal(pb.mesh.ndof)
    a = phi_tau_derivative(pb, None, d, 1, normalize=False)
    b = phi_tau_derivative(pb, None, 3.0 * d, 1, normalize=False)
    assert b.duality_value / a.duality_value == pytest.approx(3.0, rel=1e-12)
    assert b.fd_value / a.fd_value == pytest.approx(3.0, rel=1e-9)


def test_derivative_vanishes_when_z0_zero():
    pb = reference_problem(amplitude=0.0)
    r = phi_tau_derivative(pb, None, np.ones(pb.mesh.ndof), 2)
    assert r.duality_value == 0.0 and r.fd_value == 0.0


def test_derivative_rejects_bad_direction():
    pb = reference_problem()
    d = np.zeros(pb.mesh.ndof)
    d[pb.mesh.boundary_slice] = 1.0
    with pytest.raises(ValueError, match="zero"):
        phi_tau_derivative(pb, None, d, 1)
    with pytest.raises(ValueError):
        phi_tau_derivative(pb, None, d, 3)
    with pytest.raises(ShapeError):
        phi_tau_derivative(pb, None, d[:-1], 2)


def test_region_hypotheses():
    pb = reference_problem()
    with pytest.raises(ProblemError, match=r"G1 ⊂ G0 ∩ O"):
        pb.replace(G1=interior_region(pb.mesh, (0.3, 0.4)))
    with pytest.raises(ProblemError, match="intersect"):
        pb.replace(O=interior_region(pb.mesh, (0.8, 0.9)))
    with pytest.raises(ProblemError, match="nonempty"):
        pb.replace(G1=np.zeros(pb.mesh.n_interior))
    with pytest.raises(ProblemError):
        pb.replace(t0=1.0)


def test_disjoint_regions_allowed_with_flag(caplog):
    pb = reference_problem()
    with caplog.at_level(logging.WARNING):
        p2 = pb.replace(O=interior_region(pb.mesh, (0.8, 0.9)), G1=interior_region(pb.mesh, (0.5, 0.5)), allow_disjoint=True)
    assert "empty" in caplog.text
    assert phi(p2, solve_cascade(p2).forward) >= 0


def test_time_weighted_source_and_warning(caplog):
    pb = reference_problem()
    w = weighted_source_norms(pb)
    assert math.isfinite(w["xi1"]) and w["xi2"] == 0.0
    assert np.all(pb.xi.raw(0) == 0)
    raw = AdaptedField.deterministic([np.ones(pb.mesh.ndof)] * pb.tree.M)
    with caplog.at_level(logging.WARNING):
        pb.replace(xi=raw)
    assert "large or infinite" in caplog.text


def test_source_weight_factor():
    pb = reference_problem(weight_constant=0.5)
    shape = np.ones(pb.mesh.n_interior)
    xi = time_weighted_source(pb.mesh, pb.tree, shape, weight_constant=0.5)
    n = 4
    assert xi.raw(n)[0, 0] == pytest.approx(math.exp(-0.5 / pb.tree.time(n)))


def test_adjoint_linear_and_zero():
    rng = np.random.default_rng(9)
    pb = random_problem(rng)
    q0 = rng.standard_normal(pb.mesh.ndof)
    a, b = solve_adjoint(pb, q0), solve_adjoint(pb, 2.0 * q0)
    for n in range(pb.tree.M):
        assert np.allclose(b.P.raw(n), 2 * a.P.raw(n), rtol=1e-12, atol=1e-13)
        assert np.allclose(b.p.z.raw(n), 2 * a.p.z.raw(n), rtol=1e-12, atol=1e-13)
    zero = solve_adjoint(pb, np.zeros(pb.mesh.ndof))
    assert all(np.all(zero.p.z.raw(n) == 0) for n in range(pb.tree.M + 1))


def test_adjoint_sign():
    m, tree = build_interval_mesh(8), build_tree(6, 1.0)
    pb = ProblemSpec(
        m, tree, Potentials(), interior_region(m, (0.25, 0.75)), interior_region(m, (0.25, 0.75)), np.zeros(2),
        interior_region(m, (0.5, 0.5)), AdaptedField.zeros(tree.M, (m.ndof,)), BulkSurfaceField.zeros(m),
    )
    x = np.concatenate([m.interior_coords[:, 0], m.boundary_coords[:, 0]])
    adj = solve_adjoint(pb, np.sin(np.pi * x))
    # with the -chi_O q drift term, p picks up +chi_O q going backwards
    for n in (0, 1):
        assert h_inner(m, adj.p.z.raw(n)[0], adj.q.y.raw(n)[0]) > 0
