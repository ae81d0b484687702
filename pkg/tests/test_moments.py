import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import expit
from scipy.stats import multivariate_normal

from proxbias.errors import CorruptMomentsError, QuadratureError
from proxbias.lsem import LsemSpec
from proxbias.moments import (MomentCache, TreatmentMoments, positivity_violations, r_factors, s_factors,
                              treatment_moments_mc, treatment_moments_quadrature)


def _spec(alpha0=0.3, au=(0.5, -0.7), rho=None, q=0, ax=()):
    kw = dict(alpha0=alpha0, alpha_u=list(au))
    if q:
        kw.update(rho=rho, alpha_x=list(ax))
    return LsemSpec.make(p=len(au), q=q, **kw)


def test_no_confounding_reduces_to_logistic_constant():
    mom = treatment_moments_quadrature(_spec(alpha0=0.4, au=(0.0, 0.0)))
    assert mom.e_a == pytest.approx(expit(0.4), abs=1e-15)
    assert np.all(mom.e_au == 0)
    assert np.allclose(mom.e_auu, expit(0.4) * np.eye(2))


def test_against_independent_2d_integration():
    s = _spec(alpha0=0.3, au=(0.5, -0.7))
    mom = treatment_moments_quadrature(s)
    dens = multivariate_normal(np.zeros(2), np.eye(2)).pdf

    def e(f):
        val, _ = integrate.dblquad(lambda u2, u1: expit(0.3 + 0.5 * u1 - 0.7 * u2)
                                   * f(u1, u2) * dens([u1, u2]), -9, 9, -9, 9,
                                   epsabs=1e-12, epsrel=1e-12)
        return val

    assert mom.e_a == pytest.approx(e(lambda a, b: 1.0), abs=1e-9)
    assert mom.e_au[0] == pytest.approx(e(lambda a, b: a), abs=1e-9)
    assert mom.e_au[1] == pytest.approx(e(lambda a, b: b), abs=1e-9)
    assert mom.e_auu[0, 1] == pytest.approx(e(lambda a, b: a * b), abs=1e-9)
    assert mom.e_auu[1, 1] == pytest.approx(e(lambda a, b: b * b), abs=1e-9)


def test_correlated_covariate_blocks_against_mc():
    s = _spec(alpha0=-0.4, au=(0.6, 0.2), q=1, rho=[[0.4], [-0.3]], ax=(0.8,))
    quad = treatment_moments_quadrature(s)
    mc = treatment_moments_mc(s, 2_000_000, 11)
    tol = quad.est_error + mc.est_error
    for a, b in [(quad.e_av, mc.e_av), (quad.e_avv, mc.e_avv), (quad.e_a, mc.e_a)]:
        assert np.max(np.abs(np.asarray(a) - np.asarray(b))) < tol


def test_sign_symmetries():
    base = treatment_moments_quadrature(_spec(alpha0=0.3))
    flip_u = treatment_moments_quadrature(_spec(alpha0=0.3, au=(-0.5, 0.7)))
    assert np.allclose(flip_u.e_au, -base.e_au, atol=1e-14)
    assert np.allclose(flip_u.e_auu, base.e_auu, atol=1e-14)
    # A -> 1 - A under alpha -> -alpha
    neg = treatment_moments_quadrature(_spec(alpha0=-0.3, au=(-0.5, 0.7)))
    assert neg.e_a == pytest.approx(1 - base.e_a, abs=1e-14)
    assert np.allclose(neg.e_au, -base.e_au, atol=1e-14)


def test_order_convergence_and_error_estimate():
    s = _spec(alpha0=1.2, au=(1.5, -1.0))
    lo = treatment_moments_quadrature(s, 30)
    hi = treatment_moments_quadrature(s, 120)
    gap = np.max(np.abs(lo.e_avv - hi.e_avv))
    assert gap <= lo.est_error + 1e-15
    assert hi.est_error < lo.est_error


def test_order_too_low():
    with pytest.raises(QuadratureError):
        treatment_moments_quadrature(_spec(), 10)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_positivity_inequalities_hold(a0, a1, a2):
    mom = treatment_moments_quadrature(_spec(alpha0=a0, au=(a1, a2)))
    assert positivity_violations(mom, tol=1e-12) == []
    s = s_factors(mom)
    assert s.s1 > 0 and s.s2 > 0


def test_corrupt_moments_detected(zw6_mom):
    bad = zw6_mom.replace(e_auu=zw6_mom.e_auu * 0.01)
    assert positivity_violations(bad)
    with pytest.raises(CorruptMomentsError):
        s_factors(bad)


def test_r_factors_need_two_confounders():
    mom = treatment_moments_quadrature(LsemSpec.make(p=1, alpha_u=[0.5]))
    with pytest.raises(ValueError):
        r_factors(mom)


def test_round_trip(zw6_mom):
    again = TreatmentMoments.from_dict(zw6_mom.to_dict())
    assert np.array_equal(again.e_avv, zw6_mom.e_avv)
    assert again.method == "quadrature"


def test_mc_thread_count_does_not_change_result(zw6):
    one = treatment_moments_mc(zw6, 60_000, 5, chunk=20_000, threads=1)
    three = treatment_moments_mc(zw6, 60_000, 5, chunk=20_000, threads=3)
    assert one.to_dict() == three.to_dict()


def test_mc_minimum_size(zw6):
    with pytest.raises(ValueError):
        treatment_moments_mc(zw6, 100, 0)


def test_cache_keys_ignore_structural_fields(zw6, tmp_path):
    cache = MomentCache(str(tmp_path))
    first = cache.get(zw6)
    again = cache.get(zw6.set("theta_u[2]", 1.7))
    assert again is first and cache.hits == 1
    other = cache.get(zw6.set("alpha_u[2]", 0.4))
    assert other is not first
    # a fresh cache reads the persisted entry
    disk = MomentCache(str(tmp_path)).get(zw6)
    assert disk.to_dict() == first.to_dict()
