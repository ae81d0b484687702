"""Logistic-Gaussian treatment moments.

Every bias formula consumes integrals of the form E[A f(U, X)] with
P(A=1 | V) = sigmoid(alpha0 + alpha^T V), V = (U, X) ~ N(0, Sigma).  Because
A depends on V only through the scalar s = alpha^T V, we write
V = k s + R with k = Sigma alpha / var(s) and R independent of s.  Then

    E[A]       = E[sig(alpha0 + s)]
    E[A V]     = k E[sig s]
    E[A V V^T] = k k^T E[sig s^2] + E[sig] (Sigma - var(s) k k^T)

and only three one-dimensional Gauss-Hermite integrals are needed, whatever
the number of active coefficients.
"""

from __future__ import annotations

import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .errors import CorruptMomentsError, QuadratureError
from .lsem import LsemSpec, check, sample, spec_hash

MIN_ORDER = 20
DEFAULT_ORDER = 60
_MOMENT_FIELDS = ("alpha0", "alpha_u", "alpha_x", "rho", "sigma_x")


@dataclass(frozen=True)
class TreatmentMoments:
    """E[A], E[AU], E[AX] and the second-order moments E[A V V^T].

    ``e_aux`` and ``e_axx`` complete the second-order block for V = (U, X);
    the population-moment oracles need them when q > 0.
    """

    e_a: float
    e_au: np.ndarray
    e_ax: np.ndarray
    e_auu: np.ndarray
    e_aux: np.ndarray
    e_axx: np.ndarray
    method: str
    est_error: float

    @property
    def p(self) -> int:
        return len(self.e_au)

    @property
    def e_av(self) -> np.ndarray:
        return np.concatenate([self.e_au, self.e_ax])

    @property
    def e_avv(self) -> np.ndarray:
        return np.block([[self.e_auu, self.e_aux], [self.e_aux.T, self.e_axx]])

    @classmethod
    def from_blocks(cls, e_a, e_av, e_avv, p, method, est_error):
        e_av = np.asarray(e_av, float)
        e_avv = np.asarray(e_avv, float)
        e_avv = 0.5 * (e_avv + e_avv.T)
        return cls(float(e_a), e_av[:p], e_av[p:], e_avv[:p, :p], e_avv[:p, p:],
                   e_avv[p:, p:], method, float(est_error))

    def replace(self, **kw) -> "TreatmentMoments":
        d = dict(self.__dict__)
        d.update(kw)
        return TreatmentMoments(**d)

    def to_dict(self) -> dict:
        return {
            "e_a": self.e_a, "e_au": self.e_au.tolist(), "e_ax": self.e_ax.tolist(),
            "e_auu": self.e_auu.tolist(), "e_aux": self.e_aux.tolist(),
            "e_axx": self.e_axx.tolist(), "method": self.method, "est_error": self.est_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreatmentMoments":
        p = len(d["e_au"])
        q = len(d["e_ax"])
        return cls(
            float(d["e_a"]), np.array(d["e_au"], float), np.array(d["e_ax"], float),
            np.array(d["e_auu"], float).reshape(p, p), np.array(d["e_aux"], float).reshape(p, q),
            np.array(d["e_axx"], float).reshape(q, q), d["method"], float(d["est_error"]),
        )


@dataclass(frozen=True)
class SFactors:
    s1: float
    s2: float


@dataclass(frozen=True)
class RFactors:
    r1: float
    r2: float


def _projected(alpha0, alpha, sigma, order):
    """(E[A], E[AV], E[AVV^T]) by the one-dimensional reduction."""
    var = float(alpha @ sigma @ alpha)
    if var <= 0.0:
        ea = float(expit(alpha0))
        return ea, np.zeros(len(alpha)), ea * sigma
    nodes, weights = hermegauss(order)
    weights = weights / np.sqrt(2 * np.pi)
    s = np.sqrt(var) * nodes
    sig = expit(alpha0 + s)
    i0 = weights @ sig
    i1 = weights @ (sig * s)
    i2 = weights @ (sig * s * s)
    k = sigma @ alpha / var
    kk = np.outer(k, k)
    return float(i0), k * i1, kk * i2 + i0 * (sigma - var * kk)


def treatment_moments_quadrature(spec: LsemSpec, order: int = DEFAULT_ORDER) -> TreatmentMoments:
    """Gauss-Hermite treatment moments with an order-halving error estimate."""
    if order < MIN_ORDER:
        raise QuadratureError(f"quadrature order must be >= {MIN_ORDER}, got {order}")
    check(spec)
    sigma, alpha = spec.cov, spec.alpha
    hi = _projected(spec.alpha0, alpha, sigma, order)
    lo = _projected(spec.alpha0, alpha, sigma, order // 2)
    err = max(float(np.max(np.abs(np.atleast_1d(h) - np.atleast_1d(l)), initial=0.0))
              for h, l in zip(hi, lo))
    # floor at a few ulps of the largest moment
    err = max(err, 8 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(sigma)))))
    return TreatmentMoments.from_blocks(*hi, spec.dims.p, "quadrature", err)


def _mc_chunk(spec, n, seed, idx):
    data = sample(spec, n, seed, stream=(idx,))
    v = np.hstack([data.u, data.x])
    av = data.a[:, None] * v
    avv = av[:, :, None] * v[:, None, :]
    return (
        n,
        np.array([data.a.sum(), (data.a ** 2).sum()]),
        av.sum(0), (av ** 2).sum(0),
        avv.sum(0), (avv ** 2).sum(0),
    )


def treatment_moments_mc(spec: LsemSpec, n: int, seed: int, *, chunk: int = 500_000,
                         threads: int = 1) -> TreatmentMoments:
    """Plug-in sample moments; est_error is three standard errors of the worst component."""
    if n < 10_000:
        raise ValueError("Monte Carlo moments need n >= 1e4")
    check(spec)
    sizes = [chunk] * (n // chunk) + ([n % chunk] if n % chunk else [])
    jobs = [(spec, s, seed, i) for i, s in enumerate(sizes)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda j: _mc_chunk(*j), jobs))
    else:
        parts = [_mc_chunk(*j) for j in jobs]
    # fixed reduction order keeps the result independent of thread count
    tot = [sum(p[i] for p in parts) for i in range(1, 6)]
    a_s, av, av2, avv, avv2 = tot
    mean = [a_s[0] / n, av / n, avv / n]
    sq = [a_s[1] / n, av2 / n, avv2 / n]
    se = max(float(np.max(np.sqrt(np.maximum(s - np.square(m), 0) / n))) for m, s in zip(mean, sq))
    return TreatmentMoments.from_blocks(mean[0], mean[1], mean[2], spec.dims.p, "monte-carlo", 3 * se)


def positivity_violations(mom: TreatmentMoments, tol: float = 0.0) -> list[str]:
    """Check E[A]E[AU_i^2] >= E[AU_i]^2 and (1-E[A])(1-E[AU_i^2]) >= E[AU_i]^2."""
    out = []
    e = mom.e_a
    if not 0 < e < 1:
        out.append(f"E[A]={e} outside (0,1)")
    for i in range(mom.p):
        e1, e11 = mom.e_au[i], mom.e_auu[i, i]
        if e * e11 - e1 ** 2 < -tol:
            out.append(f"E[A]E[AU{i + 1}^2] < E[AU{i + 1}]^2")
        if (1 - e) * (1 - e11) - e1 ** 2 < -tol:
            out.append(f"(1-E[A])(1-E[AU{i + 1}^2]) < E[AU{i + 1}]^2")
    return out


def _denominators(mom, i=0):
    e, e1, e11 = mom.e_a, mom.e_au[i], mom.e_auu[i, i]
    return (1 - e) * (1 - e11) - e1 ** 2, e * e11 - e1 ** 2


def s_factors(mom: TreatmentMoments, i: int = 0) -> SFactors:
    d1, d2 = _denominators(mom, i)
    if d1 <= 0 or d2 <= 0:
        raise CorruptMomentsError(f"nonpositive S-factor denominator ({d1:.3g}, {d2:.3g})")
    e = mom.e_a
    return SFactors((1 - e) ** 2 / d1, e ** 2 / d2)


def r_factors(mom: TreatmentMoments) -> RFactors:
    if mom.p < 2:
        raise ValueError("R factors need p >= 2")
    d1, d2 = _denominators(mom, 0)
    if d1 == 0 or d2 == 0:
        raise CorruptMomentsError("zero R-factor denominator")
    e, e1, e11 = mom.e_a, mom.e_au[0], mom.e_auu[0, 0]
    return RFactors(e1 * mom.e_au[1] / d1, (1 - e - e11) / d2)


class MomentCache:
    """Memoizes quadrature moments by a hash of the fields they depend on.

    With ``path`` set, entries persist as JSON files so repeated CLI runs
    skip recomputation.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self._mem: dict[str, TreatmentMoments] = {}
        self._lock = threading.Lock()
        self.hits = 0
        if path:
            os.makedirs(path, exist_ok=True)

    @staticmethod
    def key(spec: LsemSpec, order: int) -> str:
        return f"{spec_hash(spec, _MOMENT_FIELDS)}-o{order}"

    def get(self, spec: LsemSpec, order: int = DEFAULT_ORDER) -> TreatmentMoments:
        k = self.key(spec, order)
        with self._lock:
            if k in self._mem:
                self.hits += 1
                return self._mem[k]
        fname = os.path.join(self.path, k + ".json") if self.path else None
        if fname and os.path.exists(fname):
            with open(fname) as fh:
                mom = TreatmentMoments.from_dict(json.load(fh))
        else:
            mom = treatment_moments_quadrature(spec, order)
            if fname:
                with open(fname, "w") as fh:
                    json.dump(mom.to_dict(), fh)
        with self._lock:
            self._mem[k] = mom
        return mom
