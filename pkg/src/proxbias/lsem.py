"""Linear structural equation models for proximal inference.

The data-generating process is

    (U, X) ~ N(0, [[I_p, rho], [rho^T, Sigma_x]])
    logit P(A=1 | U, X) = alpha0 + alpha_u^T U + alpha_x^T X
    Z = theta0 + theta_a A + theta_u^T U + theta_x^T X + s1 * eps1
    W = mu0 + mu_u^T U + mu_x^T X + s2 * eps2
    Y = gamma0 + gamma_a A + gamma_u^T U + gamma_x^T X + A gamma_au^T U + s3 * eps3

with independent standard normal errors and (s1, s2, s3) = noise_sd.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from .errors import InvalidSpecError

_PATH_RE = re.compile(r"^([a-z_0-9]+)(?:\[(\d+)(?:,\s*(\d+))?\])?$")


@dataclass(frozen=True)
class Dimensions:
    p: int
    q: int
    m: int
    n: int

    def violations(self) -> list[str]:
        out = []
        for name in ("p", "m", "n"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.q < 0:
            out.append("q must be >= 0")
        return out


# name -> shape template in terms of dims; "" means scalar
_SHAPES = {
    "alpha0": "",
    "alpha_u": "p",
    "alpha_x": "q",
    "theta0": "m",
    "theta_a": "m",
    "theta_u": "pm",
    "theta_x": "qm",
    "mu0": "n",
    "mu_u": "pn",
    "mu_x": "qn",
    "gamma0": "",
    "gamma_a": "",
    "gamma_u": "p",
    "gamma_x": "q",
    "gamma_au": "p",
    "rho": "pq",
    "sigma_x": "qq",
}
_COEF_FIELDS = tuple(_SHAPES)


def _freeze(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def _coerce(name, value, dims):
    tmpl = _SHAPES[name]
    if tmpl == "":
        v = np.asarray(value, dtype=float)
        if v.size != 1:
            raise InvalidSpecError([f"{name} must be a scalar"])
        return float(v.reshape(()))
    shape = tuple(getattr(dims, c) for c in tmpl)
    v = np.asarray(value, dtype=float)
    if v.shape != shape:
        if v.size == int(np.prod(shape)) and (v.ndim <= 1 or len(tmpl) == 1):
            v = v.reshape(shape)
        else:
            raise InvalidSpecError([f"{name} has shape {v.shape}, expected {shape}"])
    return _freeze(v)


@dataclass(frozen=True)
class LsemSpec:
    """Full parameterization of the data-generating process.

    Matrices follow the (rows = source, columns = target) convention, so
    ``theta_u`` is p x m and ``theta_u[i, j]`` is the effect of U_{i+1} on
    Z_{j+1}.  Arrays are stored read-only.
    """

    dims: Dimensions
    alpha0: float
    alpha_u: np.ndarray
    alpha_x: np.ndarray
    theta0: np.ndarray
    theta_a: np.ndarray
    theta_u: np.ndarray
    theta_x: np.ndarray
    mu0: np.ndarray
    mu_u: np.ndarray
    mu_x: np.ndarray
    gamma0: float
    gamma_a: float
    gamma_u: np.ndarray
    gamma_x: np.ndarray
    gamma_au: np.ndarray
    rho: np.ndarray
    sigma_x: np.ndarray
    noise_sd: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in _COEF_FIELDS:
            object.__setattr__(self, name, _coerce(name, getattr(self, name), self.dims))
        ns = tuple(float(s) for s in self.noise_sd)
        if len(ns) != 3:
            raise InvalidSpecError(["noise_sd must have three entries"])
        object.__setattr__(self, "noise_sd", ns)

    # construction helpers -------------------------------------------------

    @classmethod
    def make(cls, p=1, q=0, m=1, n=1, **kw) -> "LsemSpec":
        """Build a spec with zero coefficients except those given.

        ``sigma_x`` defaults to the identity and ``noise_sd`` to ones.
        """
        dims = Dimensions(p, q, m, n)
        args = {}
        for name, tmpl in _SHAPES.items():
            if name in kw:
                args[name] = kw.pop(name)
            elif name == "sigma_x":
                args[name] = np.eye(q)
            else:
                args[name] = 0.0 if tmpl == "" else np.zeros([getattr(dims, c) for c in tmpl])
        args["noise_sd"] = kw.pop("noise_sd", (1.0, 1.0, 1.0))
        if kw:
            raise TypeError(f"unknown spec fields: {sorted(kw)}")
        return cls(dims=dims, **args)

    def replace(self, **kw) -> "LsemSpec":
        return replace(self, **kw)

    @property
    def cov(self) -> np.ndarray:
        """Joint covariance of (U, X)."""
        p, q = self.dims.p, self.dims.q
        c = np.eye(p + q)
        c[:p, p:] = self.rho
        c[p:, :p] = self.rho.T
        c[p:, p:] = self.sigma_x
        return c

    @property
    def alpha(self) -> np.ndarray:
        """Treatment logit coefficients on the stacked vector (U, X)."""
        return np.concatenate([self.alpha_u, self.alpha_x])

    # parameter paths ------------------------------------------------------

    def get(self, path: str) -> float:
        name, idx = _parse_path(path, self)
        v = getattr(self, name)
        return float(v) if idx is None else float(v[idx])

    def set(self, path: str, value: float) -> "LsemSpec":
        """Return a copy with one coefficient replaced (1-based bracket path)."""
        name, idx = _parse_path(path, self)
        if idx is None:
            return replace(self, **{name: float(value)})
        arr = np.array(getattr(self, name))
        arr[idx] = value
        return replace(self, **{name: arr})

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = {"dims": {f.name: getattr(self.dims, f.name) for f in fields(Dimensions)}}
        for name in _COEF_FIELDS:
            v = getattr(self, name)
            d[name] = v if isinstance(v, float) else v.tolist()
        d["noise_sd"] = list(self.noise_sd)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LsemSpec":
        d = dict(d)
        inferred = _infer_dims(d)
        given = d.pop("dims", None)
        if given is not None:
            given = Dimensions(**given)
            bad = [k for k in ("p", "q", "m", "n")
                   if getattr(inferred, k) is not None and getattr(inferred, k) != getattr(given, k)]
            if bad:
                raise InvalidSpecError([f"declared dimension {k} disagrees with array lengths" for k in bad])
            dims = given
        else:
            if None in (inferred.p, inferred.m, inferred.n):
                raise InvalidSpecError(["cannot infer dimensions; add a 'dims' entry"])
            dims = Dimensions(inferred.p, inferred.q or 0, inferred.m, inferred.n)
        return cls.make(dims.p, dims.q, dims.m, dims.n, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LsemSpec":
        return cls.from_dict(json.loads(text))


def _infer_dims(d):
    """Best-effort dimension inference from array lengths; None when unknown."""
    p = q = m = n = None

    def length(key):
        v = d.get(key)
        return None if v is None else int(np.size(v))

    p = length("alpha_u") or length("gamma_u") or length("gamma_au")
    q = length("alpha_x") if "alpha_x" in d else length("gamma_x")
    m = length("theta0") or length("theta_a")
    n = length("mu0")
    if p and m is None and "theta_u" in d:
        m = int(np.size(d["theta_u"])) // p
    if p and n is None and "mu_u" in d:
        n = int(np.size(d["mu_u"])) // p
    return Dimensions(p, q, m, n)


def _parse_path(path: str, spec: LsemSpec):
    mt = _PATH_RE.match(path.strip())
    if not mt or mt.group(1) not in _SHAPES:
        raise KeyError(f"unknown parameter path {path!r}")
    name, i, j = mt.groups()
    tmpl = _SHAPES[name]
    if tmpl == "":
        if i is not None:
            raise KeyError(f"{name} is a scalar; no index allowed")
        return name, None
    if i is None:
        raise KeyError(f"{name} needs an index")
    shape = getattr(spec, name).shape
    if len(tmpl) == 1:
        if j is not None:
            raise KeyError(f"{name} is a vector; use a single index")
        idx = (int(i) - 1,)
    elif j is not None:
        idx = (int(i) - 1, int(j) - 1)
    elif shape[1] == 1:
        # single-column matrix: theta_u[2] means theta_u[2,1]
        idx = (int(i) - 1, 0)
    elif shape[0] == 1:
        idx = (0, int(i) - 1)
    else:
        raise KeyError(f"{name} is a {shape} matrix; use [row,col]")
    if any(k < 0 or k >= s for k, s in zip(idx, shape)):
        raise KeyError(f"index out of range in {path!r}")
    return name, idx


def spec_hash(spec: LsemSpec, names=None) -> str:
    """Content hash of (a subset of) the spec fields, stable across runs."""
    d = spec.to_dict()
    if names is not None:
        d = {k: d[k] for k in ("dims", *names)}
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def validate(spec: LsemSpec) -> list[str]:
    """Return every invariant violation; an empty list means the spec is usable."""
    out = spec.dims.violations()
    for name in _COEF_FIELDS:
        v = np.asarray(getattr(spec, name))
        if not np.all(np.isfinite(v)):
            out.append(f"{name} has non-finite entries")
    if any(not (s > 0 and np.isfinite(s)) for s in spec.noise_sd):
        out.append(f"noise_sd must be strictly positive, got {spec.noise_sd}")
    sx = spec.sigma_x
    if spec.dims.q:
        if not np.allclose(sx, sx.T, atol=0, rtol=0):
            out.append("sigma_x is not symmetric")
        if not np.allclose(np.diag(sx), 1.0):
            out.append("sigma_x must have unit diagonal")
        if np.any(np.abs(spec.rho) >= 1):
            out.append("rho entries must lie in (-1, 1)")
        try:
            np.linalg.cholesky(sx)
        except np.linalg.LinAlgError:
            out.append("sigma_x is not positive definite")
    try:
        np.linalg.cholesky(spec.cov)
    except np.linalg.LinAlgError:
        out.append("joint covariance of (U, X) is not positive definite")
    return out


def check(spec: LsemSpec) -> LsemSpec:
    errs = validate(spec)
    if errs:
        raise InvalidSpecError(errs)
    return spec


def true_ace(spec: LsemSpec) -> float:
    # gamma_au^T E[U] vanishes because U is centred
    return float(spec.gamma_a)


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. sample.  ``u`` is kept for diagnostics only."""

    a: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    u: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = len(self.a)
        if n < 1:
            raise ValueError("empty dataset")
        for name in ("a", "y", "z", "w", "x", "u"):
            v = _freeze(getattr(self, name))
            if name in ("z", "w", "x", "u") and v.ndim == 1:
                v = _freeze(v.reshape(-1, 1))
            if v.shape[0] != n:
                raise ValueError(f"column {name} has {v.shape[0]} rows, expected {n}")
            object.__setattr__(self, name, v)

    @property
    def size(self) -> int:
        return len(self.a)


def make_rng(seed, *keys) -> np.random.Generator:
    """Counter-based generator; extra keys select independent sub-streams."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return np.random.Generator(np.random.Philox(ss))


def sample(spec: LsemSpec, n: int, seed: int, *, stream: tuple = ()) -> Dataset:
    """Draw ``n`` i.i.d. rows.  Deterministic in (spec, n, seed, stream)."""
    check(spec)
    if n < 1:
        raise ValueError("n must be >= 1")
    d = spec.dims
    rng = make_rng(seed, *stream)
    chol = np.linalg.cholesky(spec.cov)
    v = rng.standard_normal((n, d.p + d.q)) @ chol.T
    u, x = v[:, :d.p], v[:, d.p:]
    prob = expit(spec.alpha0 + v @ spec.alpha)
    a = (rng.random(n) < prob).astype(float)
    s1, s2, s3 = spec.noise_sd
    z = (spec.theta0 + np.outer(a, spec.theta_a) + u @ spec.theta_u + x @ spec.theta_x
         + s1 * rng.standard_normal((n, d.m)))
    w = spec.mu0 + u @ spec.mu_u + x @ spec.mu_x + s2 * rng.standard_normal((n, d.n))
    y = (spec.gamma0 + spec.gamma_a * a + u @ spec.gamma_u + x @ spec.gamma_x
         + a * (u @ spec.gamma_au) + s3 * rng.standard_normal(n))
    return Dataset(a=a, y=y, z=z, w=w, x=x, u=u)
