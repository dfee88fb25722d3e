import functools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hemoshape.discretization.export import read_vtk_points, write_node_csv, write_vtk
from hemoshape.discretization.fem import (FEValues, PointLocator, divergence_matrix,
                                          error_rule, h1_seminorm, interpolate_p2, l2_norm,
                                          mass_matrix, p1_to_p2, stack)
from hemoshape.discretization.mesh import (MeshError, MovingMesh, TanglingError,
                                           build_reference_mesh, check_layer, rectangle_mesh)
from hemoshape.discretization.piola import PiolaMap, piola_apply
from hemoshape.discretization.quadrature import collapsed_gauss, gauss_degree4
from hemoshape.discretization.state import FlowState, spacetime_integrate, trapezoid_weights
from hemoshape.discretization.weakform import assemble_weak_form, newtonian_reference
from hemoshape.geometry import DomainSpec, HoldAll, VelocityFieldSpec, disk
from hemoshape.rheology import RheologyParams

H = HoldAll(-2.0, 2.0, -2.0, 2.0, 1.0)


def monomial_mean(a, b):
    # mean of x^a y^b over the reference triangle: 2 a! b! / (a + b + 2)!
    return 2.0 * math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


# ------------------------------------------------------------- quadrature

@pytest.mark.parametrize("rule", [gauss_degree4(), collapsed_gauss(3), collapsed_gauss(6)])
def test_quadrature_exactness(rule):
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
    x, y = rule.bary[:, 1], rule.bary[:, 2]
    for a in range(rule.degree + 1):
        for b in range(rule.degree + 1 - a):
            assert rule.weights @ (x ** a * y ** b) == pytest.approx(monomial_mean(a, b),
                                                                     rel=1e-12, abs=1e-15)


# ------------------------------------------------------------------ meshes

def test_rectangle_mesh_topology():
    m = rectangle_mesh(4, 3)
    assert m.n_vertices == 20 and m.n_triangles == 24
    assert m.area() == pytest.approx(1.0, rel=1e-14)
    # Euler: E = V + T - 1 for a simply connected triangulation
    assert len(m.edges) == m.n_vertices + m.n_triangles - 1
    assert m.boundary_edges.sum() == 2 * (4 + 3)
    assert np.all(m.signed_areas() > 0)


def test_disk_mesh_converges_to_disk_area():
    errs = [abs(build_reference_mesh(disk(1.0), h).area() - math.pi) for h in (0.2, 0.1, 0.05)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.01


def test_boundary_loop_is_counter_clockwise():
    m = build_reference_mesh(disk(1.0), 0.2)
    loop = m.vertices[m.boundary_loop()]
    x, y = loop[:, 0], loop[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert area > 0
    assert len(loop) == m.boundary_vertices.sum()


def test_shape_family_shares_connectivity():
    a = build_reference_mesh(disk(1.0), 0.1, n_rings=8)
    b = build_reference_mesh(DomainSpec((1.1, 0.05, 0.0), hold_all=H), 0.1, n_rings=8)
    assert np.array_equal(a.triangles, b.triangles)


def test_mesh_size_is_checked():
    with pytest.raises(MeshError):
        build_reference_mesh(disk(1.0), 0.3)


def test_inverted_layer_is_reported():
    m = rectangle_mesh(2)
    flipped = m.with_vertices(m.vertices * np.array([-1.0, 1.0]))
    with pytest.raises(TanglingError):
        check_layer(flipped, layer=3)


def test_moving_mesh_layers_keep_area():
    v = VelocityFieldSpec(((0.3, 0.1),), (1.2,), ((0.0, 0.3, -0.3),), H, 50.0)
    md = MovingMesh.build(build_reference_mesh(disk(0.8, hold_all=H), 0.1), v,
                          np.linspace(0, 1, 4))
    areas = [md.layer(i).area() for i in range(md.layer_count)]
    np.testing.assert_allclose(areas, areas[0], rtol=5e-3)
    assert np.array_equal(md.layer(2).triangles, md.reference_mesh.triangles)


# -------------------------------------------------------------- elements

def quadratic(p):
    x, y = p[:, 0], p[:, 1]
    return np.column_stack([1 + x - 2 * y + x * y, 3 * x * x - y * y + 0.5])


def test_interpolation_reproduces_quadratics():
    m = rectangle_mesh(3)
    fe = FEValues.build(m, error_rule())
    u = interpolate_p2(m, quadratic)
    assert l2_norm(fe, u, quadratic) < 1e-13


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_locator_evaluates_quadratics(pts):
    m = rectangle_mesh(4)
    pts = np.array(pts)
    u = interpolate_p2(m, quadratic)
    np.testing.assert_allclose(PointLocator(m).evaluate(u, pts), quadratic(pts), atol=1e-12)


def test_locator_fills_outside():
    m = rectangle_mesh(2)
    out = PointLocator(m).evaluate(np.ones(m.n_p2), np.array([[2.0, 2.0]]), fill=-7.0)
    assert out[0] == -7.0


def test_interpolation_error_is_third_order():
    def f(p):
        return np.sin(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1])

    errs, hs = [], []
    for n in (4, 8, 16):
        m = rectangle_mesh(n)
        errs.append(l2_norm(FEValues.build(m, error_rule()), interpolate_p2(m, f), f))
        hs.append(1.0 / n)
    rates = np.diff(np.log(errs)) / np.diff(np.log(hs))
    assert np.all(rates > 2.8)


def test_mass_matrix_integrates_constants():
    m = build_reference_mesh(disk(1.0), 0.2)
    fe = FEValues.build(m)
    M = mass_matrix(fe)
    one = np.ones(m.n_p2)
    assert one @ (M @ one) == pytest.approx(m.area(), rel=1e-13)


def test_divergence_matrix_annihilates_solenoidal_quadratics():
    # u = (x^2, -2xy) is divergence free
    m = rectangle_mesh(3)
    fe = FEValues.build(m)
    u = interpolate_p2(m, lambda p: np.column_stack([p[:, 0] ** 2, -2 * p[:, 0] * p[:, 1]]))
    assert np.max(np.abs(divergence_matrix(fe) @ stack(u))) < 1e-14


def test_h1_seminorm_of_linear_field():
    m = rectangle_mesh(2)
    u = interpolate_p2(m, lambda p: np.column_stack([2 * p[:, 0], np.zeros(len(p))]))
    assert h1_seminorm(FEValues.build(m), u) == pytest.approx(2.0, rel=1e-14)


def test_p1_embedding_is_exact():
    m = rectangle_mesh(2)
    p1 = m.vertices[:, 0] + 2 * m.vertices[:, 1]
    np.testing.assert_allclose(p1_to_p2(m, p1), m.p2_nodes[:, 0] + 2 * m.p2_nodes[:, 1],
                               atol=1e-15)


# ------------------------------------------------------------------ Piola

@functools.lru_cache(maxsize=None)
def swirl_md(h=0.15):
    v = VelocityFieldSpec(((0.3, 0.1),), (1.2,), ((0.0, 0.3, -0.3),), H, 50.0)
    return MovingMesh.build(build_reference_mesh(disk(0.8, hold_all=H), h), v,
                            np.linspace(0, 1, 3))


@given(st.integers(0, 2 ** 31 - 1))
def test_piola_round_trip(seed):
    md = swirl_md()
    u = np.random.default_rng(seed).normal(size=(md.reference_mesh.n_p2, 2))
    pm = PiolaMap(md.node_paths)
    back = piola_apply(pm.inverse(), piola_apply(pm, u, 1.0), 1.0)
    np.testing.assert_allclose(back, u, rtol=1e-10, atol=1e-12)


def test_piola_at_initial_time_is_identity():
    md = swirl_md()
    u = np.random.default_rng(0).normal(size=(md.reference_mesh.n_p2, 2))
    assert np.array_equal(piola_apply(PiolaMap(md.node_paths), u, 0.0), u)


def test_piola_rejects_unsampled_time():
    md = swirl_md()
    with pytest.raises(KeyError):
        piola_apply(PiolaMap(md.node_paths), np.zeros((md.reference_mesh.n_p2, 2)), 0.3)


# -------------------------------------------------------------- weak form

def test_newtonian_assembly_matches_loop_oracle():
    m = rectangle_mesh(2)
    fe = FEValues.build(m)
    rng = np.random.default_rng(3)
    w = rng.normal(size=(m.n_p2, 2))
    c = rng.normal(size=(m.n_vertices, 2))
    rp = RheologyParams(2.0, RheologyParams.p_min(2.0))
    ls = assemble_weak_form(fe, w, rp, math.inf, None, None, 0.1, np.zeros_like(w), 0.1,
                            mesh_velocity=c)
    ref = newtonian_reference(fe, w, 0.1, mesh_velocity=c)
    np.testing.assert_allclose(ls.A.toarray(), ref, atol=1e-12)


def test_convection_is_skew():
    m = rectangle_mesh(3)
    fe = FEValues.build(m)
    w = np.random.default_rng(1).normal(size=(m.n_p2, 2))
    rp = RheologyParams(2.0, RheologyParams.p_min(2.0))
    ls = assemble_weak_form(fe, w, rp, math.inf, None, None, 1.0, w, 0.0)
    C = ls.parts["convection"].toarray()
    np.testing.assert_allclose(C, -C.T, atol=1e-13)


def test_zero_data_gives_zero_solution():
    m = rectangle_mesh(4)
    fe = FEValues.build(m)
    z = np.zeros((m.n_p2, 2))
    rp = RheologyParams(1.5, RheologyParams.p_min(1.5))
    u, p = assemble_weak_form(fe, z, rp, math.inf, None, None, 0.1, z, 0.1).solve()
    assert np.all(u == 0) and np.all(p == 0)


def test_pressure_has_zero_mean():
    m = rectangle_mesh(4)
    fe = FEValues.build(m)
    z = np.zeros((m.n_p2, 2))
    rp = RheologyParams(1.5, RheologyParams.p_min(1.5))

    def f(t, pts):
        return np.column_stack([np.sin(3 * pts[:, 1]), pts[:, 0] ** 2])

    ls = assemble_weak_form(fe, z, rp, math.inf, None, f, 0.1, z, 0.1)
    _, p = ls.solve()
    assert abs(ls.p1_weights @ p) < 1e-12
    assert np.any(p != 0)


def test_nonpositive_step_is_rejected():
    m = rectangle_mesh(2)
    z = np.zeros((m.n_p2, 2))
    with pytest.raises(ValueError):
        assemble_weak_form(FEValues.build(m), z, RheologyParams(1.5, 5.0), math.inf, None, None,
                           0.0, z, 0.0)


# ---------------------------------------------------------- state and I/O

def test_trapezoid_weights():
    w = trapezoid_weights([0.0, 0.1, 0.3, 1.0])
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(w, [0.05, 0.15, 0.45, 0.35])


def test_spacetime_integral_of_constant():
    md = swirl_md()
    total, per = spacetime_integrate(md, None, lambda v: 1.0)
    assert min(per) <= total <= max(per)
    np.testing.assert_allclose(per, md.reference_mesh.area(), rtol=5e-3)


def test_spacetime_integral_is_linear_in_time():
    md = swirl_md()
    total, per = spacetime_integrate(md, None, lambda v: v.t)
    # trapezoid is exact for t * |Omega_t| when the layer areas agree
    assert total == pytest.approx(0.5 * per[-1], rel=5e-3)


def test_state_npz_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = FlowState(np.linspace(0, 1, 3), [rng.normal(size=(5, 2)) for _ in range(3)],
                  [rng.normal(size=3) for _ in range(3)], [rng.normal(size=(5, 2))
                                                           for _ in range(3)])
    s.to_npz(tmp_path / "s.npz")
    assert FlowState.from_npz(tmp_path / "s.npz").equal(s)


def test_vtk_round_trip(tmp_path):
    m = rectangle_mesh(2)
    u = interpolate_p2(m, quadratic)
    p = m.vertices[:, 0] - 0.5
    write_vtk(tmp_path / "l.vtk", m, u, p, {"w_x": u[:, 0]})
    d = read_vtk_points(tmp_path / "l.vtk")
    np.testing.assert_array_equal(d["points"][:, :2], m.p2_nodes)
    np.testing.assert_array_equal(d["velocity"][:, :2], u)
    np.testing.assert_array_equal(d["pressure"], p1_to_p2(m, p))
    np.testing.assert_array_equal(d["w_x"], u[:, 0])


def test_node_csv(tmp_path):
    m = rectangle_mesh(1)
    write_node_csv(tmp_path / "n.csv", m, 0.5, np.zeros((m.n_p2, 2)), np.zeros(m.n_vertices))
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[0] == "t,node,x,y,ux,uy,p"
    assert len(lines) == 1 + m.n_p2
