import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hemoshape.analysis.mms import mms_error, observed_orders
from hemoshape.discretization.fem import FEValues, divergence_matrix, stack
from hemoshape.discretization.mesh import MovingMesh, build_reference_mesh
from hemoshape.geometry import HoldAll, VelocityFieldSpec, disk
from hemoshape.rheology import RheologyParams
from hemoshape.solver import (ConstantForcing, InitialData, PicardError, SolverConfig,
                              VortexForcing, energy_bound, energy_check, f_norm_qprime,
                              forcing_from_dict, solve_ensemble, solve_forward)

H = HoldAll(-2.0, 2.0, -2.0, 2.0, 0.4)
TIMES = np.linspace(0.0, 0.4, 5)


def params(q):
    return RheologyParams(q, RheologyParams.p_min(q))


@pytest.fixture(scope="module")
def stirred():
    v = VelocityFieldSpec(((0.3, 0.0),), (1.4,), ((0.0, 0.3, 0.3),), H, 20.0)
    md = MovingMesh.build(build_reference_mesh(disk(1.0, hold_all=H), 0.15), v, TIMES)
    return md, v


def test_zero_data_gives_zero_flow():
    md = MovingMesh.build(build_reference_mesh(disk(1.0, hold_all=H), 0.2),
                          VelocityFieldSpec.zero(H), TIMES)
    state, led = solve_forward(md, None, params(1.5), InitialData(), None, SolverConfig(dt=0.1))
    assert all(np.all(u == 0) for u in state.velocity_coeffs)
    assert all(np.all(p == 0) for p in state.pressure_coeffs)
    assert led.max_relative_residual() == 0.0


@pytest.mark.parametrize("q", [2.0, 1.5])
def test_energy_balance_on_moving_domain(stirred, q):
    md, v = stirred
    state, led = solve_forward(md, v, params(q), InitialData(), None, SolverConfig(dt=0.1))
    assert led.max_relative_residual() <= 1e-6
    assert np.max(led.column("divergence")) <= 1e-10
    assert led.is_finite()


def test_solution_matches_boundary_data(stirred):
    md, v = stirred
    state, _ = solve_forward(md, v, params(1.5), InitialData(), None, SolverConfig(dt=0.1),
                             ledger=False)
    for i, u in enumerate(state.velocity_coeffs):
        layer = md.layer(i)
        g = v.velocity(float(TIMES[i]), layer.p2_nodes)
        np.testing.assert_allclose(u[layer.boundary_p2], g[layer.boundary_p2], atol=1e-14)


def test_forward_solve_is_reproducible(stirred):
    md, v = stirred
    cfg = SolverConfig(dt=0.1, seed_id=2)
    a, _ = solve_forward(md, v, params(1.5), InitialData(), None, cfg)
    b, _ = solve_forward(md, v, params(1.5), InitialData(), None, cfg)
    assert a.equal(b)


def test_ensemble_does_not_depend_on_threads(stirred):
    md, v = stirred
    cfgs = [SolverConfig(dt=0.1, seed_id=k) for k in range(3)]
    one = solve_ensemble(md, v, params(1.5), InitialData(), None, cfgs, threads=1)
    three = solve_ensemble(md, v, params(1.5), InitialData(), None, cfgs, threads=3)
    assert all(a[0].equal(b[0]) for a, b in zip(one, three))
    # every member converges to the same discrete solution
    for s, _ in one[1:]:
        diff = max(np.abs(x - y).max() for x, y in zip(s.velocity_coeffs,
                                                       one[0][0].velocity_coeffs))
        assert diff < 1e-6


def test_picard_failure_is_reported(stirred):
    md, v = stirred
    cfg = SolverConfig(dt=0.1, picard_max=1, picard_tol=1e-14)
    with pytest.raises(PicardError) as err:
        solve_forward(md, v, params(1.5), InitialData(), None, cfg)
    assert err.value.layer == 1


def test_time_grid_mismatch(stirred):
    md, v = stirred
    with pytest.raises(ValueError):
        solve_forward(md, v, params(1.5), InitialData(), None, SolverConfig(dt=0.05))


def test_continuation_in_m(stirred):
    md, v = stirred
    rp = RheologyParams(1.5, 5.0, (10.0, 100.0, math.inf))
    state, led = solve_forward(md, v, rp, InitialData(), None, SolverConfig(dt=0.1))
    assert led.m == math.inf
    direct, _ = solve_forward(md, v, params(1.5), InitialData(), None, SolverConfig(dt=0.1))
    diff = max(np.abs(x - y).max() for x, y in zip(state.velocity_coeffs,
                                                   direct.velocity_coeffs))
    assert diff < 1e-6


# ----------------------------------------------------------- initial data

def test_perturbed_initial_data_is_discretely_solenoidal():
    mesh = build_reference_mesh(disk(1.0, hold_all=H), 0.15)
    fe = FEValues.build(mesh)
    w0 = InitialData("perturbed", ((0.1, 0.0, 0.5, 1.0),)).w0(fe)
    assert np.max(np.abs(divergence_matrix(fe) @ stack(w0))) < 1e-12
    assert np.all(w0[mesh.boundary_p2] == 0)
    assert np.abs(w0).max() > 0.1


def test_perturbation_must_stay_inside():
    mesh = build_reference_mesh(disk(1.0, hold_all=H), 0.2)
    with pytest.raises(ValueError):
        InitialData("perturbed", ((0.5, 0.0, 0.6, 1.0),)).w0(FEValues.build(mesh))


@pytest.mark.parametrize("kw", [{"mode": "bogus"}, {"mode": "perturbed"}, {"mode": "exact"}])
def test_initial_data_validation(kw):
    with pytest.raises(ValueError):
        InitialData(**kw)


def test_solver_config_round_trip():
    cfg = SolverConfig(dt=0.1, m_schedule=(10.0, math.inf), seed_id=3)
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [{"dt": 0.0}, {"dt": 0.1, "picard_tol": 0.0},
                                {"dt": 0.1, "picard_max": 0}])
def test_solver_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


# ---------------------------------------------------------------- forcing

def test_forcing_parsing():
    assert forcing_from_dict([0.0, 0.0]) is None
    const = forcing_from_dict({"kind": "constant", "value": [1.0, 0.0]})
    assert const == ConstantForcing((1.0, 0.0))
    f = forcing_from_dict({"kind": "vortex", "center": [0.1, 0], "radius": 0.4, "amplitude": 2})
    assert f == VortexForcing((0.1, 0.0), 0.4, 2.0)
    assert forcing_from_dict(f.to_dict()) == f
    for bad in ({"kind": "wind"}, {"kind": "vortex", "speed": 1}, [1.0]):
        with pytest.raises(ValueError):
            forcing_from_dict(bad)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_vortex_forcing_is_divergence_free(x, y):
    f = VortexForcing((0.1, -0.1), 0.5, 3.0)
    e = 1e-6
    p = np.array([[x + e, y], [x - e, y], [x, y + e], [x, y - e]])
    v = f(0.0, p)
    div = (v[0, 0] - v[1, 0] + v[2, 1] - v[3, 1]) / (2 * e)
    assert abs(div) < 1e-6


def test_vortex_forcing_support():
    f = VortexForcing((0.0, 0.0), 0.5, 3.0)
    assert np.all(f(0.0, np.array([[0.5, 0.0], [0.0, -0.7]])) == 0)


def test_f_norm_of_constant_force():
    rp = params(1.5)
    qc = 3.0
    val = f_norm_qprime(ConstantForcing((3.0, 4.0)), H, rp.q)
    assert val == pytest.approx(5.0 * H.volume ** (1 / qc), rel=1e-12)
    assert f_norm_qprime(None, H, rp.q) == 0.0


# ----------------------------------------------------------- energy bound

def test_energy_bound_is_monotone_in_data():
    rp = params(1.5)
    base = energy_bound(rp, H, 1.0, 1.0).value
    assert energy_bound(rp, H, 2.0, 1.0).value > base
    assert energy_bound(rp, H, 1.0, 2.0).value > base
    assert energy_bound(rp, H, 1.0, 1.0, f_norm=1.0).value > base


def test_energy_check_holds_for_stirred_flow(stirred):
    md, v = stirred
    rp = params(1.5)
    _, led = solve_forward(md, v, rp, InitialData(), None, SolverConfig(dt=0.1))
    fe0 = FEValues.build(md.layer(0))
    C0 = math.sqrt(fe0.integrate(np.sum(fe0.values(v.velocity(0.0, md.layer(0).p2_nodes)) ** 2,
                                        axis=-1)))
    rep = energy_check(led, energy_bound(rp, H, v.c_V, C0).value)
    assert rep["passed"], rep


# -------------------------------------------------------- manufactured

def test_newtonian_mms_order_quick():
    errs = [mms_error(2.0, n, 1e-3, 2)[0] for n in (4, 8)]
    assert observed_orders([1 / 4, 1 / 8], errs)[0] >= 1.9

