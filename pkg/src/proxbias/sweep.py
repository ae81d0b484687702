"""Configuration-driven bias sweeps and the batch verification driver."""

from __future__ import annotations

import datetime as _dt
import hashlib
import io
import json
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import __version__
from . import bias as B
from .batteries import BatteryResult, degeneracy_battery, equivalence_battery, sign_battery
from .bridge import fredholm_residual, solve_outcome_bridge_base
from .completeness import certify_completeness
from .errors import InvalidSpecError, SingularSystemError
from .estimators import (fit_or, fit_proximal_gmm, fit_unadj, population_gmm, population_ols,
                         population_unadj)
from .lsem import LsemSpec, sample, spec_hash, validate
from .moments import DEFAULT_ORDER, MomentCache, treatment_moments_quadrature

ESTIMATORS = ("por", "or", "unadj")
_FITTERS = {"por": fit_proximal_gmm, "or": fit_or, "unadj": fit_unadj}


# ----------------------------------------------------------------------------
# presets


def preset_names() -> list[str]:
    root = resources.files("proxbias") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("proxbias") / "presets" / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"no preset named {name!r}; known: {', '.join(preset_names())}")
    return json.loads(path.read_text())


def preset_spec(name: str) -> LsemSpec:
    """The LSEM inside a preset (a bare spec or a sweep's base spec)."""
    doc = load_preset(name)
    return LsemSpec.from_dict(doc.get("base_spec", doc))


# ----------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class SweepConfig:
    base_spec: LsemSpec
    axis: str
    lo: float
    hi: float
    steps: int
    linked: tuple = ()  # (path, multiplier) pairs
    estimators: tuple = ESTIMATORS
    oracle: str = "none"  # none | population-gmm | monte-carlo
    mc_n: int = 0
    mc_seeds: int = 0
    setup: str | None = None
    snap_poles: bool = False
    order: int = DEFAULT_ORDER
    seed: int = 0
    name: str = "sweep"
    output: str | None = None

    def __post_init__(self):
        errs = []
        if self.steps < 2:
            errs.append("steps must be >= 2")
        if not self.lo < self.hi:
            errs.append("axis range needs lo < hi")
        if any(not math.isfinite(mult) for _, mult in self.linked):
            errs.append("linked multipliers must be finite")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            errs.append(f"estimators must be a nonempty subset of {ESTIMATORS}")
        if self.oracle not in ("none", "population-gmm", "monte-carlo"):
            errs.append(f"unknown oracle {self.oracle!r}")
        if self.oracle == "monte-carlo" and (self.mc_n < 10 or self.mc_seeds < 2):
            errs.append("monte-carlo oracle needs n >= 10 and seeds >= 2")
        if errs:
            raise ValueError("; ".join(errs))
        # fail early on malformed paths
        self.base_spec.get(self.axis)
        for path, _ in self.linked:
            self.base_spec.get(path)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        if "base_preset" in d:
            base = preset_spec(d["base_preset"])
            for path, val in d.get("overrides", {}).items():
                base = base.set(path, val)
        else:
            base = LsemSpec.from_dict(d["base_spec"])
        ax = d["axis"]
        oracle = d.get("oracle", "none")
        mc_n = mc_seeds = 0
        if isinstance(oracle, dict):
            mc_n, mc_seeds = int(oracle["n"]), int(oracle["seeds"])
            oracle = oracle["kind"]
        return cls(
            base_spec=base, axis=ax["path"], lo=float(ax["lo"]), hi=float(ax["hi"]),
            steps=int(ax["steps"]),
            linked=tuple((l["path"], float(l["multiplier"])) for l in d.get("linked", [])),
            estimators=tuple(d.get("estimators", ESTIMATORS)), oracle=oracle,
            mc_n=mc_n, mc_seeds=mc_seeds, setup=d.get("setup"),
            snap_poles=bool(d.get("snap_poles", False)), order=int(d.get("order", DEFAULT_ORDER)),
            seed=int(d.get("seed", 0)), name=d.get("name", "sweep"), output=d.get("output"),
        )

    @classmethod
    def load(cls, path_or_preset: str) -> "SweepConfig":
        p = Path(path_or_preset)
        doc = json.loads(p.read_text()) if p.exists() else load_preset(path_or_preset)
        if "axis" not in doc:
            raise ValueError(f"{path_or_preset} is not a sweep config")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        oracle = self.oracle
        if oracle == "monte-carlo":
            oracle = {"kind": oracle, "n": self.mc_n, "seeds": self.mc_seeds}
        return {
            "name": self.name, "base_spec": self.base_spec.to_dict(),
            "axis": {"path": self.axis, "lo": self.lo, "hi": self.hi, "steps": self.steps},
            "linked": [{"path": p, "multiplier": m} for p, m in self.linked],
            "estimators": list(self.estimators), "oracle": oracle, "setup": self.setup,
            "snap_poles": self.snap_poles, "order": self.order, "seed": self.seed,
        }

    def spec_at(self, t: float) -> LsemSpec:
        s = self.base_spec.set(self.axis, t)
        for path, mult in self.linked:
            s = s.set(path, mult * t)
        return s

    @property
    def resolved_setup(self) -> str:
        return self.setup or B.classify_setup(self.base_spec)


# ----------------------------------------------------------------------------
# poles


def pole_locations(config: SweepConfig, cache: MomentCache | None = None,
                   resolution: int = 4000) -> list[float]:
    """Axis values where a ZW proximal-bias denominator vanishes."""
    if config.resolved_setup != B.ZW:
        return []
    cache = cache or MomentCache()

    def dens(t):
        s = config.spec_at(t)
        _, _, d = B.zw_denominators(s, cache.get(s, config.order))
        return d

    ts = np.linspace(config.lo, config.hi, resolution)
    vals = np.array([dens(t) for t in ts])
    roots = []
    for i in range(2):
        for k in np.nonzero(np.sign(vals[:-1, i]) * np.sign(vals[1:, i]) < 0)[0]:
            roots.append(brentq(lambda t: dens(t)[i], ts[k], ts[k + 1], xtol=1e-14, rtol=1e-15))
        roots += [float(t) for t, v in zip(ts, vals[:, i]) if v == 0.0]
    # with S1 = S2 both denominators vanish at the same point
    merged = []
    for r in sorted(roots):
        if not merged or abs(r - merged[-1]) > 1e-12 * max(1.0, abs(r)):
            merged.append(r)
    return merged


def axis_grid(config: SweepConfig, cache: MomentCache | None = None):
    """Grid values, with points nearest to each pole moved onto it if requested."""
    grid = np.linspace(config.lo, config.hi, config.steps)
    snapped = []
    if config.snap_poles:
        half = 0.5 * (config.hi - config.lo) / (config.steps - 1)
        for r in pole_locations(config, cache):
            i = int(np.argmin(np.abs(grid - r)))
            if abs(grid[i] - r) <= half:
                grid[i] = r
                snapped.append(i)
    return grid, snapped


# ----------------------------------------------------------------------------
# sweep


@dataclass
class SweepResult:
    columns: list
    rows: list
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self, path=None) -> str:
        """CSV text with a '#' metadata header; timestamps are left out so
        identical configs give byte-identical files."""
        buf = io.StringIO()
        for k in ("name", "setup", "spec_hash", "config_hash", "build", "moment_method"):
            buf.write(f"# {k}: {self.metadata.get(k, '')}\n")
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        text = buf.getvalue()
        if path:
            Path(path).write_text(text)
        return text


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def build_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _abs_or_nan(v):
    return float("nan") if v is None else abs(v)


def _closed_form(setup, spec, mom):
    """(por, or, unadj) signed biases; por is None at a pole."""
    rep = B.bias_report(spec, mom, setup=setup)
    return rep.delta_por, rep.delta_or, rep.delta_unadj, rep.pole


def _population_row(setup, spec, mom, ests):
    out = []
    form = "linear" if setup == B.GENERAL else "full"
    for e in ests:
        try:
            if e == "por":
                v = population_gmm(spec, form, mom).bias
            elif e == "or":
                v = population_ols(spec, mom).bias
            else:
                v = population_unadj(spec, mom).bias
            out.append(abs(v))
        except SingularSystemError:
            out.append(float("nan"))
    return out


def _mc_row(config, spec, row_idx):
    form = "linear" if config.resolved_setup == B.GENERAL else "full"
    draws = {e: [] for e in config.estimators}
    for rep in range(config.mc_seeds):
        data = sample(spec, config.mc_n, config.seed, stream=(row_idx, rep))
        for e in config.estimators:
            fit = fit_proximal_gmm(data, form) if e == "por" else _FITTERS[e](data)
            draws[e].append(fit.psi_hat - spec.gamma_a)
    out = []
    for e in config.estimators:
        d = np.array(draws[e])
        out += [abs(d.mean()), d.std(ddof=1) / np.sqrt(len(d))]
    return out


def run_sweep(config: SweepConfig, *, threads: int = 1, cache: MomentCache | None = None,
              use_cache: bool = True) -> SweepResult:
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    setup = config.resolved_setup
    cache = cache if cache is not None else MomentCache()
    grid, snapped = axis_grid(config, cache)
    specs = [config.spec_at(t) for t in grid]
    for t, s in zip(grid, specs):
        errs = validate(s)
        if errs:
            raise InvalidSpecError([f"at {config.axis}={t!r}: {e}" for e in errs])

    def moments_for(s):
        if use_cache:
            return cache.get(s, config.order)
        return treatment_moments_quadrature(s, config.order)

    def one_row(i):
        t, s = grid[i], specs[i]
        mom = moments_for(s)
        por, orv, un, pole = _closed_form(setup, s, mom)
        vals = {"por": _abs_or_nan(por), "or": _abs_or_nan(orv), "unadj": abs(un)}
        row = [float(t)] + [vals[e] for e in config.estimators]
        if config.oracle == "population-gmm":
            row += _population_row(setup, s, mom, config.estimators)
        elif config.oracle == "monte-carlo":
            row += _mc_row(config, s, i)
        return row + [bool(pole)]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one_row, range(len(grid))))
    else:
        rows = [one_row(i) for i in range(len(grid))]

    cols = [config.axis] + list(config.estimators)
    if config.oracle == "population-gmm":
        cols += [f"{e}_oracle" for e in config.estimators]
    elif config.oracle == "monte-carlo":
        for e in config.estimators:
            cols += [f"{e}_mc", f"{e}_mc_se"]
    cols.append("pole")
    cfg_blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    meta = {
        "name": config.name, "setup": setup,
        "spec_hash": spec_hash(config.base_spec),
        "config_hash": hashlib.sha256(cfg_blob).hexdigest()[:16],
        "build": build_string(),
        "moment_method": f"quadrature(order={config.order})",
        "snapped_rows": snapped, "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    return SweepResult(cols, rows, meta)


# ----------------------------------------------------------------------------
# verification driver

BUDGETS = {"minimal": 20, "default": 200, "full": 1000}
FAMILIES = ("zw", "ay", "general")


@dataclass
class VerificationReport:
    batteries: list

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.batteries)

    def lines(self) -> list[str]:
        return [b.line() for b in self.batteries]


def _bridge_battery() -> BatteryResult:
    spec = preset_spec("base_case")
    br = solve_outcome_bridge_base(spec)
    res = fredholm_residual(br, spec)
    coef = population_gmm(spec, "full").coef
    gap = float(np.max(np.abs(coef.as_array() - br.as_array())))
    return BatteryResult("bridge", res < 1e-8 and gap < 1e-10, max(res, gap), 1,
                         {"fredholm_residual": res, "gmm_gap": gap})


def _completeness_battery() -> BatteryResult:
    cert = certify_completeness(preset_spec("completeness"))
    return BatteryResult("completeness", cert.passed, cert.max_abs_mean, len(cert.rows),
                         {"max_abs_g": cert.max_abs_g})


def verify_all(family: str = "all", budget="default", seed: int = 0,
               formulas=None) -> VerificationReport:
    """Run every verification battery; failures are reported, not raised."""
    n = BUDGETS.get(budget, budget) if isinstance(budget, str) else budget
    if not isinstance(n, int) or n < BUDGETS["minimal"]:
        raise ValueError(f"budget must be at least {BUDGETS['minimal']} draws "
                         f"(or one of {sorted(BUDGETS)})")
    fams = FAMILIES if family == "all" else (family,)
    if any(f not in FAMILIES for f in fams):
        raise ValueError(f"family must be 'all' or one of {FAMILIES}")
    out = [_bridge_battery(), _completeness_battery()]
    out += [equivalence_battery(f, n, seed, formulas=formulas) for f in fams]
    if "zw" in fams:
        out.append(sign_battery(n, seed))
    if "general" in fams:
        out.append(degeneracy_battery(max(n // 4, 10), seed))
    return VerificationReport(out)
