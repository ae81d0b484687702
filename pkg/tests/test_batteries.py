import numpy as np
import pytest

from proxbias import bias as B
from proxbias.batteries import (BatteryResult, degeneracy_battery, draw_ay, draw_general, draw_zw,
                                equivalence_battery, sign_battery)
from proxbias.lsem import make_rng, validate


@pytest.mark.parametrize("draw, setup", [(draw_zw, B.ZW), (draw_ay, B.AY)])
def test_generators_land_in_their_family(draw, setup):
    rng = make_rng(0, 1)
    for _ in range(20):
        spec = draw(rng)
        assert validate(spec) == []
        assert B.classify_setup(spec) == setup


def test_general_generator_shapes():
    rng = make_rng(0, 2)
    for _ in range(30):
        spec = draw_general(rng)
        d = spec.dims
        assert validate(spec) == []
        assert d.p <= 4 and d.m == d.n <= min(d.p, 3) and d.q <= 2
    sq = draw_general(rng, square=True)
    assert sq.dims.p == sq.dims.m == sq.dims.n


def test_equivalence_is_seed_deterministic():
    a = equivalence_battery("ay", 15, seed=3)
    b = equivalence_battery("ay", 15, seed=3)
    assert a.worst == b.worst and a.passed


def test_broken_por_formula_fails():
    res = equivalence_battery("zw", 20, formulas={"por": lambda s, m: -B.bias_por_zw(s, m)})
    assert not res.passed


def test_sign_battery_small_run():
    res = sign_battery(60, seed=1)
    assert res.passed
    assert res.details["single_threshold_rule_errors"] > 0


def test_degeneracy_small_run():
    assert degeneracy_battery(10, seed=2).passed


def test_result_line():
    assert BatteryResult("x", True, 1e-9, 4).line() == "PASS x: n=4 worst=1.000e-09"
    assert BatteryResult("x", False, np.inf, 0).line().startswith("FAIL")
