import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hemoshape.rheology import (CertificateError, HemolysisParams, ParameterError,
                                RheologyParams, certify_inequalities, conjugate, frobenius,
                                hemolysis_index, hemolysis_window, random_symmetric, stress,
                                stress_regularized, viscosity, write_certificates_csv)

qs = st.floats(1.21, 2.0)


def sym_tensor(dim):
    return st.lists(st.floats(-50, 50), min_size=dim * dim, max_size=dim * dim).map(
        lambda v: 0.5 * (np.reshape(v, (dim, dim)) + np.reshape(v, (dim, dim)).T))


def params(q, m_schedule=(math.inf,)):
    return RheologyParams(q, RheologyParams.p_min(q), m_schedule)


def test_stress_of_zero_is_zero():
    assert np.all(stress(np.zeros((2, 2)), params(1.5)) == 0)


@given(sym_tensor(2))
def test_newtonian_stress_is_identity(a):
    np.testing.assert_allclose(stress(a, params(2.0)), a, rtol=0, atol=0)


def test_shear_thinning_scalar_value():
    a = np.diag([1.0, -1.0])
    expected = (1 + math.sqrt(2)) ** -0.5
    np.testing.assert_allclose(stress(a, params(1.5)), expected * a, rtol=1e-14)
    assert abs(expected - 0.6436) < 1e-4


def test_regularized_two_term_value():
    # p = 2 is below the admissible p >= (5q/6)' = 5 for q = 1.5, so the
    # hand evaluation uses p = 5: S(I) + (1/10)(1 + sqrt 2)^3 I
    rp = RheologyParams(1.5, 5.0)
    a = np.eye(2)
    r2 = math.sqrt(2.0)
    expected = ((1 + r2) ** -0.5 + 0.1 * (1 + r2) ** 3) * a
    np.testing.assert_allclose(stress_regularized(a, rp, 10.0), expected, rtol=1e-14)
    assert np.all(stress_regularized(np.zeros((2, 2)), rp, 3.0) == 0)
    with pytest.raises(ParameterError):
        RheologyParams(1.5, 2.0)


@given(sym_tensor(3), st.floats(1.0, 1e6))
def test_regularization_gap_bound(a, m):
    rp = params(1.5)
    gap = frobenius(stress_regularized(a, rp, m) - stress(a, rp))
    assert gap <= (1 + frobenius(a)) ** (rp.p - 1) / m * (1 + 1e-12)


@given(sym_tensor(2).filter(lambda a: frobenius(a) > 1e-6), st.floats(1.0, 1e3))
def test_regularization_gap_decreases_in_m(a, m):
    rp = params(1.5)
    g1 = frobenius(stress_regularized(a, rp, m) - stress(a, rp))
    g2 = frobenius(stress_regularized(a, rp, 2 * m) - stress(a, rp))
    assert g2 < g1


@given(sym_tensor(3), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), qs)
def test_frame_indifference(a, th1, th2, q):
    c1, s1, c2, s2 = math.cos(th1), math.sin(th1), math.cos(th2), math.sin(th2)
    R = np.array([[c1, -s1, 0], [s1, c1, 0], [0, 0, 1]]) @ np.array(
        [[1, 0, 0], [0, c2, -s2], [0, s2, c2]])
    rp = params(q)
    lhs = stress(R @ a @ R.T, rp)
    rhs = R @ stress(a, rp) @ R.T
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + frobenius(a)))


@given(sym_tensor(2).filter(lambda a: frobenius(a) > 1e-8), st.floats(1e-3, 1e3), qs)
def test_stress_parallel_to_argument(a, lam, q):
    s = stress(lam * a, params(q))
    # s = c a with c > 0
    c = np.sum(s * a) / np.sum(a * a)
    assert c > 0
    np.testing.assert_allclose(s, c * a, atol=1e-12 * frobenius(s))


def test_viscosity_matches_stress():
    rng = np.random.default_rng(1)
    a = random_symmetric(rng, 50, 2)
    rp = params(1.4, (5.0, math.inf))
    for m in rp.m_schedule:
        nu = viscosity(frobenius(a), rp, m)
        np.testing.assert_allclose(nu[:, None, None] * a, stress_regularized(a, rp, m),
                                   rtol=1e-13)


@pytest.mark.parametrize("q", [1.3, 1.5, 1.9])
@pytest.mark.parametrize("dim", [2, 3])
def test_certificate_constants(q, dim):
    c = certify_inequalities(params(q), 10**4, seed=3, dim=dim)
    assert c.passed
    assert c.c1 == c.c2 == 2.0 ** (q - 2.0) and c.c3 == 1.0
    assert c.coercivity_margin >= -1e-12 and c.growth_margin >= -1e-12
    assert c.monotonicity_min > 0


def test_newtonian_certificate_exact():
    rng = np.random.default_rng(0)
    a = random_symmetric(rng, 1000, 3)
    s = stress(a, params(2.0))
    np.testing.assert_allclose(np.einsum("nij,nij->n", s, a), frobenius(a) ** 2, rtol=1e-14)


def test_certificate_needs_enough_samples():
    with pytest.raises(ValueError):
        certify_inequalities(params(1.5), 100)


def test_certificate_reports_violation(monkeypatch):
    import hemoshape.rheology as rh
    monkeypatch.setattr(rh, "stress", lambda a, p, check=False: -a)
    with pytest.raises(CertificateError) as err:
        rh.certify_inequalities(params(1.5), 10**4)
    assert not err.value.certificate.passed
    assert "coercivity" in err.value.certificate.witness


def test_certificate_csv(tmp_path):
    c = certify_inequalities(params(1.5), 10**4)
    write_certificates_csv(tmp_path / "c.csv", [c])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("q,dim,samples") and len(lines) == 2


@pytest.mark.parametrize("q,p,ms", [(1.2, 3.0, (math.inf,)), (2.1, 2.0, (math.inf,)),
                                    (1.5, 1.9, (math.inf,)), (1.5, 2.0, (5.0, 2.0)),
                                    (1.5, 2.0, (0.5,)), (1.5, 2.0, ())])
def test_invalid_rheology(q, p, ms):
    with pytest.raises(ParameterError):
        RheologyParams(q, p, ms)


def test_p_min_formula():
    # (5q/6)' for q = 1.5 is 1.25 / 0.25 = 5
    assert RheologyParams.p_min(1.5) == pytest.approx(5.0)
    assert RheologyParams.p_min(2.0) == pytest.approx(conjugate(5 / 3))


def test_hemolysis_index_zero_cases():
    hp = HemolysisParams(2.0, 1.5, 0.7)
    assert hemolysis_index(np.zeros((2, 2)), 3.0, hp) == 0
    assert hemolysis_index(np.eye(2), 0.0, hp) == 0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_hemolysis_index_monotone(s1, s2, t1, t2):
    hp = HemolysisParams(1.3, 1.2, 0.5)
    lo_s, hi_s = sorted([s1, s2])
    lo_t, hi_t = sorted([t1, t2])
    assert hemolysis_index(lo_s * np.eye(2), lo_t, hp) <= hemolysis_index(hi_s * np.eye(2),
                                                                          hi_t, hp)


def test_hemolysis_window_example_values():
    rp = RheologyParams(1.22, RheologyParams.p_min(1.22))
    lo, hi = hemolysis_window(1.22, 2.42)
    assert lo == 1.0
    assert hi == pytest.approx((1.22 / 0.22) / 2.42, rel=1e-14)
    assert abs(hi - 2.29) < 0.01
    assert HemolysisParams(1.0, 2.42, 1.0, 2.0).validate(rp) == (lo, hi)
    with pytest.raises(ParameterError, match="window"):
        HemolysisParams(1.0, 2.42, 1.0, 3.0).validate(rp)


def test_hemolysis_window_boundary_case():
    rp = RheologyParams(1.5, RheologyParams.p_min(1.5))
    HemolysisParams(1.0, conjugate(1.5), 1.0, 1.0).validate(rp)
    with pytest.raises(ParameterError):
        hemolysis_window(1.5, 3.01)


@pytest.mark.parametrize("kw", [{"c_h": 0.0}, {"alpha": -1.0}, {"beta": 0.0}, {"r": 0.5}])
def test_hemolysis_params_rejects(kw):
    base = dict(c_h=1.0, alpha=1.0, beta=1.0, r=1.0)
    base.update(kw)
    with pytest.raises(ParameterError):
        HemolysisParams(**base)


def test_hemolysis_params_need_beta():
    with pytest.raises(TypeError):
        HemolysisParams(1.0, 1.0)
