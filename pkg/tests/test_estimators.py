import dataclasses

import numpy as np
import pytest

from proxbias.errors import EmptyArmError, IdentificationError, SetupError, SingularSystemError
from proxbias.estimators import (fit_or, fit_proximal_gmm, fit_unadj, population_gmm,
                                 population_ols, population_unadj)
from proxbias.lsem import Dataset, LsemSpec, sample


@pytest.fixture(scope="module")
def zw_data(zw6):
    return sample(zw6, 400_000, 21)


@pytest.mark.parametrize("fitter, pop", [
    (fit_proximal_gmm, lambda s: population_gmm(s, "full")),
    (fit_or, population_ols),
    (fit_unadj, population_unadj),
])
def test_finite_sample_fits_approach_population_limits(zw6, zw_data, fitter, pop):
    fit = fitter(zw_data)
    target = pop(zw6).psi
    assert abs(fit.psi_hat - target) < 5 * fit.se_psi, (fit.psi_hat, target, fit.se_psi)


def test_u_is_never_read(zw6):
    data = sample(zw6, 5_000, 1)
    fenced = dataclasses.replace(data, u=np.full_like(data.u, np.nan))
    for f in (fit_proximal_gmm, fit_or, fit_unadj):
        assert f(fenced).psi_hat == f(data).psi_hat


def test_noise_scale_does_not_move_population_limits(zw6):
    a = population_gmm(zw6, "full")
    b = population_gmm(zw6.replace(noise_sd=(1.7, 0.6, 3.0)), "full")
    assert a.bias == pytest.approx(b.bias, abs=1e-12)
    assert population_unadj(zw6).bias == pytest.approx(
        population_unadj(zw6.replace(noise_sd=(0.5, 0.5, 0.5))).bias, abs=1e-12)


def test_no_confounding_gives_zero_bias():
    spec = LsemSpec.make(p=1, alpha0=0.3, theta_a=[1.0], theta_u=[[1.0]], mu_u=[[0.8]],
                         gamma_a=0.5, gamma_u=[1.0])
    assert population_gmm(spec, "full").bias == pytest.approx(0.0, abs=1e-12)
    assert population_unadj(spec).bias == pytest.approx(0.0, abs=1e-12)
    # Z is a collider on A -> Z <- U -> Y, so adjusting for it still biases OLS
    assert abs(population_ols(spec).bias) > 0.1


def test_linear_and_full_forms():
    kw = dict(q=1, alpha0=0.2, alpha_x=[0.5], theta_a=[1.0], theta_x=[[0.3]], mu_x=[[0.1]],
              gamma_a=1.0, gamma_x=[0.2])
    ok = LsemSpec.make(p=1, alpha_u=[0.4], theta_u=[[0.9]], mu_u=[[0.7]], gamma_u=[0.6],
                       rho=[[0.2]], **kw)
    for form in ("full", "linear"):
        assert population_gmm(ok, form).bias == pytest.approx(0.0, abs=1e-12)
    # with a second confounder the bridge is misspecified and the forms part ways
    bad = LsemSpec.make(p=2, alpha_u=[0.4, -0.3], theta_u=[0.9, 0.4], mu_u=[0.7, -0.2],
                        gamma_u=[0.6, 0.8], rho=[[0.2], [0.1]], **kw)
    assert abs(population_gmm(bad, "full").bias - population_gmm(bad, "linear").bias) > 1e-6


def test_singular_population_system():
    spec = LsemSpec.make(p=1, theta_u=[[0.0]], mu_u=[[0.0]], gamma_a=1.0)
    with pytest.raises(SingularSystemError):
        population_gmm(spec, "full")
    fit = population_gmm(spec, "full", allow_singular=True)
    assert np.isfinite(fit.psi)


def test_mismatched_proxy_dimensions():
    spec = LsemSpec.make(p=2, m=1, n=2, theta_u=[1.0, 0.5], mu_u=[[1, 0], [0, 1]])
    with pytest.raises(SetupError):
        population_gmm(spec)
    with pytest.raises(IdentificationError):
        fit_proximal_gmm(sample(spec, 500, 0))


def test_bad_form(zw6):
    with pytest.raises(ValueError):
        population_gmm(zw6, "quadratic")


def test_empty_arm():
    n = 50
    d = Dataset(a=np.ones(n), y=np.zeros(n), z=np.zeros(n), w=np.zeros(n),
                x=np.zeros((n, 0)), u=np.zeros(n))
    with pytest.raises(EmptyArmError):
        fit_unadj(d)


def test_rank_deficient_sample():
    n = 200
    rng = np.random.default_rng(0)
    a = (rng.random(n) < 0.5).astype(float)
    d = Dataset(a=a, y=rng.normal(size=n), z=np.zeros(n), w=rng.normal(size=n),
                x=np.zeros((n, 0)), u=np.zeros(n))
    with pytest.raises(IdentificationError):
        fit_proximal_gmm(d)


def test_fit_result_serializes(zw6):
    doc = fit_proximal_gmm(sample(zw6, 2_000, 0)).to_dict()
    assert doc["estimator"] == "por" and doc["n"] == 2_000
    assert set(doc["bridge_hat"]) == {"b0", "ba", "bx", "bw", "bax", "baw"}


def test_base_case_is_unbiased_at_large_n(base_case):
    fit = fit_proximal_gmm(sample(base_case, 1_000_000, 8))
    assert abs(fit.psi_hat - base_case.gamma_a) < 3 * fit.se_psi


def test_duplicated_outcome_proxy_is_not_identified(zw6):
    d = sample(zw6, 2_000, 0)
    dup = dataclasses.replace(d, w=np.hstack([d.w, d.w]))
    with pytest.raises(IdentificationError):
        fit_proximal_gmm(dup)
