import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insensitize.mesh import (
    BulkSurfaceField,
    MeshError,
    ShapeError,
    apply_operator,
    boundary_region,
    build_annulus_mesh,
    build_interval_mesh,
    energy_form,
    inner_product,
    interior_region,
    norm,
    normal_derivative,
)

MESHES = [
    lambda: build_interval_mesh(4),
    lambda: build_interval_mesh(9, 2.5),
    lambda: build_annulus_mesh(3, 4, 1.0, 2.0),
    lambda: build_annulus_mesh(5, 7, 0.5, 1.7),
]


def coords_field(mesh):
    return BulkSurfaceField(mesh.interior_coords[:, 0].copy(), mesh.boundary_coords[:, 0].copy())


def test_interval_nodes():
    m = build_interval_mesh(4, 1.0)
    assert np.allclose(m.interior_coords[:, 0], [0.25, 0.5, 0.75])
    assert np.allclose(m.boundary_coords[:, 0], [0.0, 1.0])


def test_interval_single_interior_node():
    m = build_interval_mesh(2, 1.0)
    assert m.n_interior == 1
    assert m.interior_coords[0, 0] == 0.5


def test_interval_weights_length_two():
    m = build_interval_mesh(3, 2.0)
    assert m.spacing[0] == pytest.approx(2 / 3)
    assert np.allclose(m.interior_weights, 2 / 3)
    assert np.all(m.boundary_weights == 1.0)


@pytest.mark.parametrize("J", [1, 0, 2.5])
def test_interval_rejects_bad_cell_count(J):
    with pytest.raises(MeshError):
        build_interval_mesh(J)


def test_annulus_boundary_count_and_arc():
    m = build_annulus_mesh(3, 4, 1.0, 2.0)
    assert m.n_boundary == 8
    outer = m.boundary_coords[:, 0] == 2.0
    assert outer.sum() == 4
    assert np.allclose(m.boundary_weights[outer], 2 * math.pi * 2.0 / 4)
    assert np.all(m.interior_coords[:, 0] > 1.0) and np.all(m.interior_coords[:, 0] < 2.0)


def test_annulus_area_quadrature():
    m = build_annulus_mesh(64, 64, 1.0, 2.0)
    area = math.pi * (2.0**2 - 1.0**2)
    assert abs(m.interior_weights.sum() - area) / area < 0.02


@pytest.mark.parametrize("args", [(3, 4, 0.0, 1.0), (3, 4, 2.0, 1.0), (2, 4, 1.0, 2.0), (3, 3, 1.0, 2.0)])
def test_annulus_rejects_bad_parameters(args):
    with pytest.raises(MeshError):
        build_annulus_mesh(*args)


@pytest.mark.parametrize("make", MESHES)
def test_weights_positive(make):
    assert np.all(make().weights > 0)


@pytest.mark.parametrize("make", MESHES)
def test_constant_in_kernel(make):
    m = make()
    out = apply_operator(m, BulkSurfaceField.constant(m, 3.7))
    assert np.max(np.abs(out.packed())) < 1e-12


def test_operator_on_linear_field():
    m = build_interval_mesh(4)
    out = apply_operator(m, coords_field(m))
    assert np.allclose(out.interior, 0.0, atol=1e-14)
    # boundary rows are -d_nu x: +1 at x = 0, -1 at x = 1
    assert out.boundary == pytest.approx([1.0, -1.0])


def test_normal_derivative_of_linear_field():
    m = build_interval_mesh(4)
    assert normal_derivative(m, coords_field(m)) == pytest.approx([-1.0, 1.0])
    assert np.all(normal_derivative(m, BulkSurfaceField.constant(m, 2.0)) == 0.0)


def test_inner_product_counting_measure():
    m = build_interval_mesh(2)
    one = BulkSurfaceField.constant(m, 1.0)
    assert inner_product(m, one, one) == pytest.approx(2.5)
    assert inner_product(m, one, BulkSurfaceField.zeros(m)) == 0.0
    assert norm(m, one) == pytest.approx(math.sqrt(2.5))


@pytest.mark.parametrize("make", MESHES)
def test_self_adjoint_random_pairs(make):
    m = make()
    rng = np.random.default_rng(0)
    for _ in range(50):
        y = BulkSurfaceField.from_packed(m, rng.standard_normal(m.ndof))
        z = BulkSurfaceField.from_packed(m, rng.standard_normal(m.ndof))
        lhs = inner_product(m, apply_operator(m, y), z)
        rhs = inner_product(m, y, apply_operator(m, z))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs)) * norm(m, y) * norm(m, z)


@pytest.mark.parametrize("make", MESHES)
def test_summation_by_parts(make):
    m = make()
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = BulkSurfaceField.from_packed(m, rng.standard_normal(m.ndof))
        z = BulkSurfaceField.from_packed(m, rng.standard_normal(m.ndof))
        bulk, surf = energy_form(m, y, z)
        lhs = inner_product(m, apply_operator(m, y), z)
        assert lhs == pytest.approx(-(bulk + surf), rel=1e-12, abs=1e-12)


def test_annulus_has_beltrami_term():
    m = build_annulus_mesh(3, 6, 1.0, 2.0)
    f = BulkSurfaceField(np.zeros(m.n_interior), np.cos(m.boundary_coords[:, 1]))
    assert energy_form(m, f, f)[1] > 0


@pytest.mark.parametrize("make", MESHES)
def test_dissipative_with_constant_kernel(make):
    m = make()
    A = m.operator_matrix().toarray()
    s = np.sqrt(m.weights)
    sym = s[:, None] * A / s[None, :]
    ev = np.linalg.eigvalsh(0.5 * (sym + sym.T))
    assert ev.max() <= 1e-10
    assert np.sum(np.abs(ev) < 1e-10) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.floats(0.1, 10.0), st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_inner_product_bilinear(J, L, seed, a, b):
    m = build_interval_mesh(J, L)
    rng = np.random.default_rng(seed)
    f, g, z = (BulkSurfaceField.from_packed(m, rng.standard_normal(m.ndof)) for _ in range(3))
    lhs = inner_product(m, f * a + g * b, z)
    rhs = a * inner_product(m, f, z) + b * inner_product(m, g, z)
    assert abs(lhs - rhs) <= 1e-14 * (1 + abs(a) + abs(b)) * m.ndof * max(L, 1.0) * 10


def test_shape_mismatch_rejected():
    m = build_interval_mesh(4)
    with pytest.raises(ShapeError):
        inner_product(m, BulkSurfaceField(np.zeros(2), np.zeros(2)), BulkSurfaceField.zeros(m))
    with pytest.raises(ShapeError):
        BulkSurfaceField.from_packed(m, np.zeros(4))


def test_mesh_json():
    m = build_annulus_mesh(3, 4, 1.0, 2.0)
    d = json.loads(m.to_json())
    assert d["kind"] == "annulus"
    assert len(d["interior_weights"]) == m.n_interior


def test_regions_closed_boxes():
    m = build_interval_mesh(16)
    mask = interior_region(m, (0.5, 0.65))
    assert np.allclose(m.interior_coords[mask == 1, 0], [0.5, 0.5625, 0.625])
    assert boundary_region(m, [1.0]).tolist() == [0.0, 1.0]
    assert interior_region(m, None).sum() == 0


def test_annulus_regions():
    m = build_annulus_mesh(4, 8, 1.0, 2.0)
    ring = interior_region(m, (1.4, 1.6))
    assert set(m.interior_coords[ring == 1, 0]) == {1.5}
    outer = boundary_region(m, ["outer"])
    assert outer.sum() == 8 and np.all(m.boundary_coords[outer == 1, 0] == 2.0)
    arc = boundary_region(m, [(1.0, 0.0, math.pi / 2)])
    assert arc.sum() == 3
    wedge = interior_region(m, (1.0, 2.0, 3 * math.pi / 2, math.pi / 4))
    assert wedge.sum() == 3 * 4
    with pytest.raises(MeshError):
        interior_region(m, (1.0,))
