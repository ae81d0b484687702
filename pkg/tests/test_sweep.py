import dataclasses

import numpy as np
import pytest

from proxbias import bias as B
from proxbias.lsem import LsemSpec
from proxbias.moments import MomentCache, s_factors, treatment_moments_quadrature
from proxbias.sweep import (SweepConfig, axis_grid, load_preset, pole_locations, preset_names,
                            preset_spec, run_sweep, verify_all)


def test_every_figure_has_a_preset():
    names = set(preset_names())
    for fig in "5678":
        for sub in "abcd":
            assert f"fig{fig}{sub}" in names
    assert {"base_case", "completeness", "zw_section6", "ay_section6"} <= names
    with pytest.raises(KeyError):
        load_preset("fig9z")


def test_figure5_proximal_always_below_unadjusted():
    res = run_sweep(SweepConfig.load("fig5b"))
    assert len(res.rows) == 81
    por, un = res.column("por"), res.column("unadj")
    assert np.all(por < un)
    assert np.ptp(un) < 1e-12  # theta_u2 and mu_u2 do not enter the unadjusted bias
    assert not res.column("pole").any()


def test_figure6_crossing_and_flagged_poles():
    cfg = SweepConfig.load("fig6b")
    res = run_sweep(cfg)
    poles = pole_locations(cfg)
    grid = res.column("theta_u[2]")
    flagged = grid[res.column("pole") == 1]
    assert len(poles) == 2
    assert sorted(flagged) == poles
    # each pole solves r = -S_i for the spec at that axis value
    for t in poles:
        spec = cfg.spec_at(t)
        s = s_factors(treatment_moments_quadrature(spec))
        r = spec.theta_u[0, 0] * spec.mu_u[0, 0] / (spec.theta_u[1, 0] * spec.mu_u[1, 0])
        assert min(abs(r + s.s1), abs(r + s.s2)) < 1e-9
    ok = res.column("pole") == 0
    por, un = res.column("por")[ok], res.column("unadj")[ok]
    far = np.abs(grid[ok]) > 1.9
    near = np.abs(grid[ok]) < 0.1
    assert np.all(por[near] < un[near]) and np.all(por[far] > un[far])


def test_unsnapped_sweep_flags_nothing():
    cfg = dataclasses.replace(SweepConfig.load("fig6b"), snap_poles=False)
    res = run_sweep(cfg)
    assert not res.column("pole").any()
    grid, snapped = axis_grid(cfg)
    assert snapped == []


def test_oracle_columns_match_closed_forms():
    for name in ("fig5c", "fig7a"):
        res = run_sweep(SweepConfig.load(name))
        for est in SweepConfig.load(name).estimators:
            a, b = res.column(est), res.column(f"{est}_oracle")
            ok = ~np.isnan(a)
            assert np.max(np.abs(a[ok] - b[ok])) < 1e-9


def test_csv_is_byte_identical_across_runs_and_threads(tmp_path):
    cfg = SweepConfig.load("fig6a")
    one = run_sweep(cfg).to_csv()
    again = run_sweep(cfg, threads=4).to_csv(tmp_path / "out.csv")
    assert one == again == (tmp_path / "out.csv").read_text()
    header = [ln for ln in one.splitlines() if ln.startswith("#")]
    assert any("spec_hash" in ln for ln in header)
    assert not any("started" in ln or "finished" in ln for ln in header)


def test_cache_coherence():
    cfg = SweepConfig.load("fig7b")
    cache = MomentCache()
    cached = run_sweep(cfg, cache=cache)
    fresh = run_sweep(cfg, use_cache=False)
    assert cached.rows == fresh.rows
    # theta/mu axes reuse a single moment set
    run_sweep(SweepConfig.load("fig5a"), cache=cache)
    assert cache.hits > 0


def test_no_confounding_gives_zero_columns():
    spec = LsemSpec.make(p=2, alpha0=0.3, theta_a=[1], theta_u=[1, 0.5], mu_u=[0.5, 0.3],
                         gamma_a=0.5, gamma_u=[0, 0])
    cfg = SweepConfig(spec, "theta_u[2]", -1.0, 1.0, 2, setup=B.ZW)
    res = run_sweep(cfg)
    assert len(res.rows) == 2
    for est in cfg.estimators:
        assert np.all(res.column(est) == 0)


def test_monte_carlo_oracle_is_deterministic():
    doc = load_preset("fig5b")
    doc.update(axis={"path": "theta_u[2]", "lo": -1.0, "hi": 1.0, "steps": 3},
               oracle={"kind": "monte-carlo", "n": 4000, "seeds": 3}, estimators=["unadj"])
    cfg = SweepConfig.from_dict(doc)
    a = run_sweep(cfg).to_csv()
    assert a == run_sweep(cfg, threads=3).to_csv()
    res = run_sweep(cfg)
    assert res.columns == ["theta_u[2]", "unadj", "unadj_mc", "unadj_mc_se", "pole"]
    # loose: three replicates at n = 4000
    assert np.all(np.abs(res.column("unadj_mc") - res.column("unadj"))
                  < 6 * res.column("unadj_mc_se") + 0.05)


def test_base_preset_with_overrides():
    cfg = SweepConfig.from_dict({
        "base_preset": "zw_section6", "overrides": {"alpha_u[1]": 1.0},
        "axis": {"path": "mu_u[2]", "lo": 0, "hi": 1, "steps": 5}})
    assert cfg.base_spec.alpha_u[0] == 1.0
    again = SweepConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("change", [
    dict(steps=1), dict(lo=1.0, hi=1.0), dict(estimators=("ipw",)), dict(oracle="bootstrap"),
    dict(linked=(("mu_u[2]", float("inf")),)), dict(axis="theta_u[9]"),
])
def test_config_preconditions(change):
    base = dict(base_spec=preset_spec("zw_section6"), axis="theta_u[2]", lo=-1.0, hi=1.0, steps=3)
    base.update(change)
    with pytest.raises((ValueError, KeyError)):
        SweepConfig(**base)


def test_verify_all_minimal_passes():
    report = verify_all(budget="minimal")
    assert report.passed, report.lines()
    names = [b.name for b in report.batteries]
    assert names[:2] == ["bridge", "completeness"]


def test_corrupted_formula_is_caught():
    report = verify_all("zw", budget="minimal",
                        formulas={"unadj": lambda s, m: 1.01 * B.bias_unadj(s, m)})
    bad = [b for b in report.batteries if b.name == "equivalence[zw]"][0]
    assert not bad.passed and not report.passed


@pytest.mark.parametrize("budget", [0, 5, "tiny"])
def test_budget_precondition(budget):
    with pytest.raises(ValueError):
        verify_all(budget=budget)
