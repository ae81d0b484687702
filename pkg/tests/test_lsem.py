import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxbias.errors import InvalidSpecError
from proxbias.lsem import (Dimensions, LsemSpec, check, make_rng, sample, spec_hash, true_ace,
                           validate)


def test_make_zero_fills_and_defaults():
    s = LsemSpec.make(p=2, q=1, m=1, n=1)
    assert s.theta_u.shape == (2, 1)
    assert s.rho.shape == (2, 1)
    assert np.array_equal(s.sigma_x, np.eye(1))
    assert s.noise_sd == (1.0, 1.0, 1.0)
    assert validate(s) == []


def test_unknown_field_rejected():
    with pytest.raises(TypeError):
        LsemSpec.make(p=1, thetta_u=[1.0])


def test_arrays_are_read_only(zw6):
    with pytest.raises(ValueError):
        zw6.theta_u[0, 0] = 3.0


@pytest.mark.parametrize("kw, fragment", [
    (dict(q=1, rho=[[0.8], [0.8]]), "not positive definite"),
    (dict(q=1, rho=[[1.0], [0.0]]), "rho entries"),
    (dict(noise_sd=(1.0, 0.0, 1.0)), "noise_sd"),
    (dict(alpha_u=[np.nan, 0.0]), "non-finite"),
])
def test_validate_reports_violation(kw, fragment):
    s = LsemSpec.make(p=2, **kw)
    errs = validate(s)
    assert any(fragment in e for e in errs), errs
    with pytest.raises(InvalidSpecError):
        check(s)


def test_validate_collects_every_violation():
    s = LsemSpec.make(p=2, q=1, rho=[[1.0], [1.0]], noise_sd=(-1, 1, 1))
    assert len(validate(s)) >= 3


def test_bad_dimensions():
    assert Dimensions(0, 0, 1, 1).violations()
    assert Dimensions(1, 0, 1, 1).violations() == []


def test_path_get_set_one_based(zw6):
    assert zw6.get("theta_u[2]") == 0.5
    assert zw6.get("theta_u[2,1]") == 0.5
    assert zw6.get("gamma_a") == 0.5
    s = zw6.set("mu_u[2]", -1.25)
    assert s.mu_u[1, 0] == -1.25
    assert zw6.mu_u[1, 0] == 0.5  # original untouched


@pytest.mark.parametrize("path", ["theta_u[3]", "theta_u[0]", "gamma_a[1]", "bogus", "alpha_u"])
def test_bad_paths(zw6, path):
    with pytest.raises(KeyError):
        zw6.get(path)


def test_json_round_trip(zw6):
    again = LsemSpec.from_json(zw6.to_json())
    assert spec_hash(again) == spec_hash(zw6)
    assert again.noise_sd == zw6.noise_sd


def test_from_dict_checks_dims(zw6):
    d = zw6.to_dict()
    d["dims"]["p"] = 3
    with pytest.raises((InvalidSpecError, ValueError)):
        LsemSpec.from_dict(d)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_hash_tracks_content(vals):
    s = LsemSpec.make(p=2, alpha_u=vals[:2], theta_u=vals[2:4], mu_u=vals[4:])
    t = LsemSpec.from_dict(json.loads(json.dumps(s.to_dict())))
    assert spec_hash(s) == spec_hash(t)
    bumped = s.set("alpha_u[1]", vals[0] + 1.0)
    assert spec_hash(bumped) != spec_hash(s)


def test_true_ace(zw6):
    assert true_ace(zw6) == zw6.gamma_a


def test_sample_deterministic_and_streams_differ(zw6):
    a = sample(zw6, 1000, 3)
    b = sample(zw6, 1000, 3)
    c = sample(zw6, 1000, 3, stream=(1,))
    assert np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)
    assert a.z.shape == (1000, 1) and a.x.shape == (1000, 0)


def test_sample_matches_structural_moments():
    s = LsemSpec.make(p=1, q=1, alpha_u=[0.0], rho=[[0.5]], theta_u=[[2.0]],
                      noise_sd=(1.0, 1.0, 1.0))
    d = sample(s, 200_000, 0)
    cov = np.cov(np.c_[d.u, d.x].T)
    assert abs(cov[0, 1] - 0.5) < 0.01
    # Var(Z) = 4 Var(U) + 1 (theta_a = 0)
    assert abs(d.z.var() - 5.0) < 0.06
    assert abs(d.a.mean() - 0.5) < 0.01


def test_sample_rejects_invalid():
    with pytest.raises(InvalidSpecError):
        sample(LsemSpec.make(p=1, noise_sd=(0, 1, 1)), 10, 0)


def test_make_rng_keys():
    x = make_rng(1, 2).random(4)
    assert np.array_equal(x, make_rng(1, 2).random(4))
    assert not np.array_equal(x, make_rng(1, 3).random(4))
