"""Numerical certificate that completeness fails for two-dimensional U.

With p = 2 and a scalar NCE Z there is a nonzero g(U) whose conditional mean
given (Z, A, X) is identically zero.  The function is built from three
factors: an odd cubic in u2 whose constant is tuned to kill the tilted
third moment, a factor cancelling the prior density of U given X, and a
factor cancelling the logistic treatment probability.  We check
E[g(U) | z, a, x] = 0 by two-dimensional Gauss-Hermite quadrature against the
conditional density assembled from its factorization, normalized
numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .errors import NoBridgeError, QuadratureError, SetupError
from .lsem import LsemSpec, check

MIN_ORDER = 40
NORM_TOL = 1e-6


@dataclass(frozen=True)
class CounterexampleG:
    """Parameters of g captured from a spec.

    ``perm`` maps the internal (u1, u2) labels to spec coordinates; it is
    (1, 0) when theta_u1 = 0 and the roles of the two confounders swap.
    ``c_shift`` perturbs the cubic's constant and exists to show the
    certificate has power.
    """

    alpha0: float
    alpha_u: tuple
    alpha_x: float
    theta0: float
    theta_a: float
    theta_x: float
    theta_u: tuple
    rho: tuple
    noise_z: float
    perm: tuple = (0, 1)
    c_shift: float = 0.0

    @classmethod
    def from_spec(cls, spec: LsemSpec, c_shift: float = 0.0) -> "CounterexampleG":
        check(spec)
        d = spec.dims
        if d.p != 2 or d.m != 1 or d.q > 1:
            raise SetupError("counterexample needs p = 2, m = 1, q <= 1")
        if d.q and spec.sigma_x[0, 0] != 1:
            raise SetupError("counterexample assumes Var(X) = 1")
        th = spec.theta_u[:, 0]
        if th[0] != 0:
            perm = (0, 1)
        elif th[1] != 0:
            perm = (1, 0)
        else:
            raise NoBridgeError("theta_u = 0: Z carries no information about U")
        pi = list(perm)
        rho = spec.rho[:, 0][pi] if d.q else np.zeros(2)
        return cls(
            alpha0=spec.alpha0,
            alpha_u=tuple(spec.alpha_u[pi]),
            alpha_x=float(spec.alpha_x[0]) if d.q else 0.0,
            theta0=float(spec.theta0[0]),
            theta_a=float(spec.theta_a[0]),
            theta_x=float(spec.theta_x[0, 0]) if d.q else 0.0,
            theta_u=tuple(th[pi]),
            rho=tuple(rho),
            noise_z=spec.noise_sd[0],
            perm=perm,
            c_shift=c_shift,
        )

    @property
    def cubic_constant(self) -> float:
        a1, a2 = self.alpha_u
        t1, t2 = self.theta_u
        return 3 + a2 ** 2 + (a1 * t2 / t1) ** 2 - 2 * a1 * a2 * t2 / t1 + self.c_shift


def _eta(ce, u1, u2, x):
    return ce.alpha0 + ce.alpha_x * x + ce.alpha_u[0] * u1 + ce.alpha_u[1] * u2


def _prior_exponent(ce, u1, u2, x):
    """log P[U=u | X=x] up to its normalizing constant."""
    r1, r2 = ce.rho
    det = 1 - r1 ** 2 - r2 ** 2
    return ((r2 * u1 - r1 * u2) ** 2 - (u2 - r2 * x) ** 2 - (u1 - r1 * x) ** 2) / (2 * det)


def _log_abs_g(ce, u1, u2, x):
    """(log|g|, sign g) in internal coordinates."""
    poly = u2 * (u2 ** 2 - ce.cubic_constant)
    eta = _eta(ce, u1, u2, x)
    with np.errstate(divide="ignore"):
        logpoly = np.log(np.abs(poly))
    # log(2 + e^eta + e^-eta) = 2 log(e^{eta/2} + e^{-eta/2})
    logcosh = 2 * np.logaddexp(eta / 2, -eta / 2)
    return logpoly - u2 ** 2 / 2 - _prior_exponent(ce, u1, u2, x) + logcosh, np.sign(poly)


def _to_internal(ce, u):
    u = np.asarray(u, dtype=float)
    return u[..., ce.perm[0]], u[..., ce.perm[1]]


def g_value(ce: CounterexampleG, u, x: float = 0.0):
    """g at spec-coordinate point(s) u (shape (..., 2))."""
    u1, u2 = _to_internal(ce, u)
    logabs, sign = _log_abs_g(ce, u1, u2, x)
    return sign * np.exp(logabs)


def _log_density_joint(ce, u1, u2, z, a, x):
    """log of P[U=u | X=x] P[A=a | U=u, X=x] P[Z=z | U=u, A=a, X=x], fully normalized."""
    r1, r2 = ce.rho
    det = 1 - r1 ** 2 - r2 ** 2
    log_prior = _prior_exponent(ce, u1, u2, x) - np.log(2 * np.pi * np.sqrt(det))
    eta = _eta(ce, u1, u2, x)
    log_treat = -np.logaddexp(0.0, -eta if a == 1 else eta)
    resid = z - ce.theta0 - ce.theta_a * a - ce.theta_x * x - ce.theta_u[0] * u1 - ce.theta_u[1] * u2
    s = ce.noise_z
    log_z = -0.5 * (resid / s) ** 2 - np.log(s * np.sqrt(2 * np.pi))
    return log_prior + log_treat + log_z


def _rule(order):
    t, w = hermegauss(order)
    logw = np.log(w / np.sqrt(2 * np.pi))
    t1, t2 = np.meshgrid(t, t, indexing="ij")
    lw = (logw[:, None] + logw[None, :]).ravel()
    # log of the standard bivariate normal density at the nodes
    lphi = (-0.5 * (t1 ** 2 + t2 ** 2) - np.log(2 * np.pi)).ravel()
    return t1.ravel(), t2.ravel(), lw, lphi


def _proxy_grid(ce, z, a, x, order):
    """Nodes for the reference density exp(-u2^2/2) N(z | ., s^2) in u1."""
    t1, t2, lw, lphi = _rule(order)
    th1, th2 = ce.theta_u
    shift = z - ce.theta0 - ce.theta_a * a - ce.theta_x * x
    u2 = t2
    sd1 = ce.noise_z / abs(th1)
    u1 = (shift - th2 * u2) / th1 + sd1 * t1
    # quadrature weight for int f du = E_ref[f / ref]; log|det| of the map
    return u1, u2, lw - lphi + np.log(sd1)


def _posterior_grid(ce, z, a, x, order):
    """Nodes adapted to the Gaussian part of the posterior of U."""
    t1, t2, lw, lphi = _rule(order)
    r = np.array(ce.rho)
    mean = r * x
    cov = np.eye(2) - np.outer(r, r)
    th = np.array(ce.theta_u)
    s2 = ce.noise_z ** 2
    resid = z - ce.theta0 - ce.theta_a * a - ce.theta_x * x - th @ mean
    szz = th @ cov @ th + s2
    gain = cov @ th / szz
    pm = mean + gain * resid
    pc = cov - np.outer(gain, th @ cov)
    chol = np.linalg.cholesky(0.5 * (pc + pc.T))
    u = pm[:, None] + chol @ np.vstack([t1, t2])
    return u[0], u[1], lw - lphi + np.log(abs(np.linalg.det(chol)))


def _log_normalizer(ce, z, a, x, grid):
    u1, u2, lw = grid
    return logsumexp(lw + _log_density_joint(ce, u1, u2, z, a, x))


def conditional_mean_g(ce: CounterexampleG, z: float, a: int, x: float = 0.0,
                       order: int = 48) -> float:
    """E[g(U) | Z=z, A=a, X=x] by self-normalized 2-D quadrature."""
    if order < MIN_ORDER:
        raise QuadratureError(f"order must be >= {MIN_ORDER}")
    pg = _proxy_grid(ce, z, a, x, order)
    log_norm = _log_normalizer(ce, z, a, x, _posterior_grid(ce, z, a, x, order))
    # the same normalizer on the numerator's grid must agree
    log_norm_check = _log_normalizer(ce, z, a, x, pg)
    if abs(np.expm1(log_norm_check - log_norm)) > NORM_TOL:
        raise QuadratureError(
            f"conditional density normalization off by {np.expm1(log_norm_check - log_norm):.2e}; "
            "raise the quadrature order")
    u1, u2, lw = pg
    logabs, sign = _log_abs_g(ce, u1, u2, x)
    terms = lw + logabs + _log_density_joint(ce, u1, u2, z, a, x) - log_norm
    # signed sum shifted by the largest term; exact cancellation gives 0, not nan
    keep = sign != 0
    top = terms[keep].max()
    return float(np.exp(top) * np.sum(sign[keep] * np.exp(terms[keep] - top)))


@dataclass(frozen=True)
class CompletenessCertificate:
    rows: list  # (z, a, x, E[g | z, a, x])
    max_abs_mean: float
    max_abs_g: float
    passed: bool


def certify_completeness(spec: LsemSpec, *, zs=(-2, -1, 0, 1, 2), xs=(-1, 0, 1),
                         order: int = 48, tol: float = NORM_TOL,
                         c_shift: float = 0.0) -> CompletenessCertificate:
    ce = CounterexampleG.from_spec(spec, c_shift=c_shift)
    if not spec.dims.q:
        xs = (0.0,)
    rows = [(float(z), a, float(x), conditional_mean_g(ce, z, a, x, order))
            for x in xs for a in (0, 1) for z in zs]
    grid = np.linspace(-1, 1, 9)
    uu = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
    max_g = float(np.max(np.abs(g_value(ce, uu, 0.0))))
    worst = max(abs(r[3]) for r in rows)
    return CompletenessCertificate(rows, worst, max_g, worst < tol and max_g > 1e-2)
