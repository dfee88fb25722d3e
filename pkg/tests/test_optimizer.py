import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hemoshape.geometry import HoldAll
from hemoshape.optimizer import (HISTORY_FIELDS, OptimizerConfig, OptimizerError,
                                 OptimizerState, ParamLayout, ParamVector, Problem,
                                 VelocityTemplate, certified_scale, decode, minimize, objective)
from hemoshape.rheology import HemolysisParams, RheologyParams

H = HoldAll(-2.0, 2.0, -2.0, 2.0, 0.4)


def area_problem(kind="disk_area", lo=0.2, hi=1.9, target=math.pi):
    return Problem(kind, ParamLayout(1, lower=[lo], upper=[hi]), H, target_area=target)


# ----------------------------------------------------------------- layout

@pytest.mark.parametrize("args", [(0,), (2,), (1, 0, 0, [0.0, 1.0]), (1, 0, 0, [1.0], [0.0])])
def test_layout_validation(args):
    with pytest.raises(ValueError):
        ParamLayout(*args)


def test_layout_round_trip():
    L = ParamLayout(3, 2, 2, [0.5, -0.1, -0.1, -1, -1, -1, -1], [1.5] + [math.inf] * 6)
    M = ParamLayout.from_dict(L.to_dict())
    assert M.to_dict() == L.to_dict()
    v = ParamVector(np.arange(7.0), L)
    assert v.velocity_params.shape == (2, 2)
    np.testing.assert_array_equal(v.domain_params, [0.0, 1.0, 2.0])


def test_template_round_trip():
    t = VelocityTemplate(((0.1, 0.0),), (1.0,), ("bump",), (None,), 5.0, ((0.0, 0.2),))
    assert VelocityTemplate.from_dict(t.to_dict()) == t


# --------------------------------------------------------------- decoding

@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_decode_is_total(x):
    L = ParamLayout(3)
    dec = decode(ParamVector(x, L), Problem("disk_area", L, H))
    assert dec.violation >= 0
    assert dec.feasible == (dec.violation == 0.0)
    if dec.feasible:
        assert dec.domain is not None


def test_decode_reports_box_and_shape_violations():
    p = area_problem()
    assert decode(ParamVector([1.0], p.layout), p).feasible
    dec = decode(ParamVector([2.5], p.layout), p)
    assert dec.violation >= 0.6 and "box" in dec.message
    dec = decode(ParamVector([1.0, 0.9, 0.0], ParamLayout(3)), Problem("disk_area",
                                                                      ParamLayout(3), H))
    assert not dec.feasible and "domain" in dec.message


def test_certified_scale_reaches_c_V():
    tpl = VelocityTemplate(((0.0, 0.0),), (1.2,), c_V=7.0)
    s = certified_scale(tpl, ((0.0, 1.0, 0.5),), H)
    v = tpl.build(((0.0, s, 0.5 * s),), H)
    assert v.c11_bound() == pytest.approx(7.0, rel=1e-12)


# -------------------------------------------------------------- objective

@given(st.floats(0.3, 1.8))
def test_disk_area_objective(r):
    res = objective(ParamVector([r], area_problem().layout), area_problem())
    assert res.feasible
    assert res.value == pytest.approx((math.pi * r * r - math.pi) ** 2, rel=1e-12, abs=1e-24)


def test_infeasible_points_are_penalized_above_the_record():
    p = area_problem()
    res = objective(ParamVector([2.5], p.layout), p, best_known=0.5, penalty=10.0)
    assert not res.feasible
    assert res.value == pytest.approx(0.5 + 10.0 * res.violation)
    assert res.value > 0.5


def test_solver_objective_is_nonnegative():
    tpl = VelocityTemplate(((0.3, 0.0),), (1.4,), c_V=20.0, fixed_coeffs=((0.0, 0.3, 0.3),))
    rp = RheologyParams(1.5, RheologyParams.p_min(1.5))
    p = Problem("hemolysis_r", ParamLayout(1), H, tpl, rheology=rp,
                hemolysis=HemolysisParams(1.0, 1.0, 0.5, 1.0), mesh_h=0.2, n_layers=3)
    res = objective(ParamVector([1.0], p.layout), p)
    assert res.feasible and res.value > 0
    assert objective(ParamVector([1.0], p.layout), p).value == res.value


# -------------------------------------------------------------- minimize

def test_disk_area_solved_within_budget():
    p = area_problem()
    st_ = minimize(OptimizerConfig((0.6,), budget=200), p)
    assert st_.evaluations <= 200
    assert st_.best_value < 1e-3
    assert st_.best_x[0] == pytest.approx(1.0, abs=1e-2)
    assert st_.is_monotone()


def test_area_tracking_target():
    p = area_problem("area_tracking", target=2.0)
    st_ = minimize(OptimizerConfig((1.2,), budget=120, starts=2), p)
    assert st_.best_x[0] == pytest.approx(math.sqrt(2.0 / math.pi), abs=1e-3)


def test_minimize_is_deterministic():
    p = area_problem()
    a = minimize(OptimizerConfig((0.6,), budget=40, starts=3, seed=4), p)
    b = minimize(OptimizerConfig((0.6,), budget=40, starts=3, seed=4), p)
    assert a.history == b.history


def test_resume_preserves_monotonicity(tmp_path):
    p = area_problem()
    ck = tmp_path / "state.json"
    first = minimize(OptimizerConfig((0.6,), budget=20, starts=3), p, checkpoint=ck)
    assert first.evaluations == 20
    resumed = minimize(OptimizerConfig((0.6,), budget=60, starts=3), p,
                       OptimizerState.load(ck), checkpoint=ck)
    assert resumed.evaluations == 60
    assert resumed.history[:20] == first.history
    assert resumed.is_monotone()
    assert resumed.best_value <= first.best_value


def test_budget_smaller_than_simplex():
    with pytest.raises(OptimizerError):
        minimize(OptimizerConfig((1.0, 0.0, 0.0), budget=3), Problem("disk_area",
                                                                     ParamLayout(3), H))


def test_no_feasible_point():
    p = area_problem(lo=2.5, hi=3.0)
    with pytest.raises(OptimizerError, match="feasible"):
        minimize(OptimizerConfig((2.7,), budget=10, starts=1), p)


def test_state_files(tmp_path):
    p = area_problem()
    st_ = minimize(OptimizerConfig((0.6,), budget=12, starts=1), p)
    st_.save(tmp_path / "s.json")
    back = OptimizerState.load(tmp_path / "s.json")
    assert back.to_dict() == st_.to_dict()
    st_.write_history_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_FIELDS)
    assert len(lines) == 13


@pytest.mark.parametrize("kw", [{"starts": 0}, {"scale": 0.0}, {"penalty": -1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        OptimizerConfig((1.0,), **kw)
