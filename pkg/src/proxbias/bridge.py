"""Base-case confounding bridges and their numerical certification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .errors import InvalidSpecError, NoBridgeError, SetupError
from .lsem import LsemSpec, check, sample


def _vec(v):
    return np.atleast_1d(np.asarray(v, dtype=float))


@dataclass(frozen=True)
class OutcomeBridgeParams:
    """h(W, A, X) = b0 + ba A + bx^T X + bw^T W + A bax^T X + A baw^T W."""

    b0: float
    ba: float
    bx: np.ndarray
    bw: np.ndarray
    bax: np.ndarray
    baw: np.ndarray

    def __post_init__(self):
        for name in ("bx", "bw", "bax", "baw"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        object.__setattr__(self, "b0", float(self.b0))
        object.__setattr__(self, "ba", float(self.ba))
        vals = np.concatenate([[self.b0, self.ba], self.bx, self.bw, self.bax, self.baw])
        if not np.all(np.isfinite(vals)):
            raise ValueError("bridge coefficients must be finite")

    def evaluate(self, w, a, x):
        w = np.atleast_2d(w)
        x = np.atleast_2d(x) if np.size(x) else np.zeros((w.shape[0], 0))
        a = np.asarray(a, float)
        return (self.b0 + self.ba * a + x @ self.bx + w @ self.bw
                + a * (x @ self.bax) + a * (w @ self.baw))

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.b0, self.ba], self.bx, self.bw, self.bax, self.baw])

    def perturbed(self, name: str, delta: float, index: int = 0) -> "OutcomeBridgeParams":
        kw = dict(self.__dict__)
        if name in ("b0", "ba"):
            kw[name] = kw[name] + delta
        else:
            arr = kw[name].copy()
            arr[index] += delta
            kw[name] = arr
        return OutcomeBridgeParams(**kw)

    def to_dict(self) -> dict:
        return {k: (v if isinstance(v, float) else v.tolist()) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class TreatmentBridgeParams:
    """q(Z, A, X) = 1 + exp{(-1)^(1-A) (t0 + tz Z + ta A + tx X)}."""

    t0: float
    ta: float
    tx: float
    tz: float

    def evaluate(self, z, a, x):
        a = np.asarray(a, float)
        lin = self.t0 + self.tz * np.ravel(z) + self.ta * a + self.tx * np.ravel(x)
        return 1.0 + np.exp(np.where(a == 1, lin, -lin))


def _require_base(spec: LsemSpec):
    d = spec.dims
    if not (d.p == d.m == d.n == 1 and d.q in (0, 1)):
        raise SetupError("base-case bridges need p = m = n = 1 and q <= 1")


def solve_outcome_bridge_base(spec: LsemSpec) -> OutcomeBridgeParams:
    _require_base(spec)
    mu_u = float(spec.mu_u[0, 0])
    if mu_u == 0.0:
        raise NoBridgeError("mu_u = 0: W carries no information about U")
    g0, ga = spec.gamma0, spec.gamma_a
    gu, gau = float(spec.gamma_u[0]), float(spec.gamma_au[0])
    mu0 = float(spec.mu0[0])
    mu_x = spec.mu_x[:, 0]
    return OutcomeBridgeParams(
        b0=g0 - mu0 * gu / mu_u,
        ba=ga - mu0 * gau / mu_u,
        bx=spec.gamma_x - mu_x * gu / mu_u,
        bw=[gu / mu_u],
        bax=-mu_x * gau / mu_u,
        baw=[gau / mu_u],
    )


def solve_treatment_bridge_base(spec: LsemSpec) -> TreatmentBridgeParams:
    """Closed-form treatment bridge.

    The constant and A terms carry the Z-noise variance s1^2; with unit noise
    this is the textbook form.
    """
    _require_base(spec)
    th_u = float(spec.theta_u[0, 0])
    if th_u == 0.0:
        raise NoBridgeError("theta_u = 0: Z carries no information about U")
    al_u = float(spec.alpha_u[0])
    s1sq = spec.noise_sd[0] ** 2
    th0, th_a = float(spec.theta0[0]), float(spec.theta_a[0])
    th_x = float(spec.theta_x[0, 0]) if spec.dims.q else 0.0
    al_x = float(spec.alpha_x[0]) if spec.dims.q else 0.0
    r = al_u / th_u
    return TreatmentBridgeParams(
        t0=-spec.alpha0 + th0 * r + 0.5 * s1sq * r ** 2,
        ta=-s1sq * r ** 2 + th_a * r,
        tx=th_x * r - al_x,
        tz=-r,
    )


def bridge_ace(bridge: OutcomeBridgeParams, spec: LsemSpec) -> float:
    """E[h(W,1,X) - h(W,0,X)] under the LSEM; X is centred so only W's mean enters."""
    return float(bridge.ba + bridge.baw @ spec.mu0)


def _gaussian_posterior(spec, z, a, x):
    """Mean and covariance of U given (Z=z, X=x) before the treatment tilt."""
    p, q = spec.dims.p, spec.dims.q
    if q:
        sx_inv_rho = np.linalg.solve(spec.sigma_x, spec.rho.T)  # q x p
        m_prior = sx_inv_rho.T @ x
        c_prior = np.eye(p) - spec.rho @ sx_inv_rho
    else:
        m_prior = np.zeros(p)
        c_prior = np.eye(p)
    th = spec.theta_u  # p x m
    resid = z - spec.theta0 - spec.theta_a * a - spec.theta_x.T @ x - th.T @ m_prior
    s_zz = th.T @ c_prior @ th + spec.noise_sd[0] ** 2 * np.eye(spec.dims.m)
    gain = np.linalg.solve(s_zz, th.T @ c_prior).T  # p x m
    mean = m_prior + gain @ resid
    cov = c_prior - gain @ th.T @ c_prior
    return mean, 0.5 * (cov + cov.T)


def conditional_mean_u(spec: LsemSpec, z, a: int, x=(), order: int = 60) -> np.ndarray:
    """E[U | Z=z, A=a, X=x].

    The Gaussian posterior from (Z, X) is tilted by P(A=a | U, X), which
    depends on U through a single direction, so one Gauss-Hermite rule
    suffices.
    """
    z = _vec(z)
    x = _vec(x) if spec.dims.q else np.zeros(0)
    mean, cov = _gaussian_posterior(spec, z, a, x)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidSpecError(["degenerate conditional covariance of U"]) from exc
    al = spec.alpha_u
    tau2 = float(al @ cov @ al)
    if tau2 <= 0:
        return mean
    sign = 1.0 if a == 1 else -1.0
    c = spec.alpha0 + spec.alpha_x @ x + al @ mean
    nodes, weights = hermegauss(order)
    t = np.sqrt(tau2) * nodes
    tilt = expit(sign * (c + t))
    shift = (weights @ (tilt * t)) / (weights @ tilt)
    return mean + cov @ al / tau2 * shift


def standard_grid(spec: LsemSpec, steps=(-2, -1, 0, 1, 2)) -> list[tuple]:
    """(z, a, x) points with z and x placed at whole conditional-SD offsets."""
    p, q = spec.dims.p, spec.dims.q
    xs = [np.full(q, float(k)) * np.sqrt(np.diag(spec.sigma_x)) for k in steps] if q else [np.zeros(0)]
    if q:
        proj = np.linalg.solve(spec.sigma_x, spec.rho.T).T  # p x q
        c_ux = np.eye(p) - proj @ spec.rho.T
    else:
        proj = np.zeros((p, 0))
        c_ux = np.eye(p)
    th = spec.theta_u
    sd_z = np.sqrt(np.diag(th.T @ c_ux @ th) + spec.noise_sd[0] ** 2)
    grid = []
    for x in xs:
        for a in (0, 1):
            centre = spec.theta0 + spec.theta_a * a + spec.theta_x.T @ x + th.T @ (proj @ x)
            for k in steps:
                grid.append((centre + k * sd_z, a, x))
    return grid


def fredholm_residual(bridge: OutcomeBridgeParams, spec: LsemSpec, grid=None,
                      order: int = 60) -> float:
    """max |E[Y - h(W, a, x) | Z=z, A=a, X=x]| over the grid."""
    check(spec)
    if grid is None:
        grid = standard_grid(spec)
    if not len(grid):
        raise ValueError("empty certification grid")
    worst = 0.0
    for z, a, x in grid:
        x = _vec(x) if spec.dims.q else np.zeros(0)
        eu = conditional_mean_u(spec, z, a, x, order)
        ey = spec.gamma0 + spec.gamma_a * a + spec.gamma_x @ x + (spec.gamma_u + a * spec.gamma_au) @ eu
        ew = spec.mu0 + spec.mu_u.T @ eu + spec.mu_x.T @ x
        eh = (bridge.b0 + bridge.ba * a + bridge.bx @ x + a * (bridge.bax @ x)
              + (bridge.bw + a * bridge.baw) @ ew)
        worst = max(worst, abs(float(ey - eh)))
    return worst


def treatment_bridge_ipw_check(tb: TreatmentBridgeParams, spec: LsemSpec, n: int,
                               seed: int) -> dict:
    """Sample means and SEs of q(Z, a, X) 1{A=a}; both should be 1."""
    data = sample(spec, n, seed)
    x = data.x[:, 0] if spec.dims.q else np.zeros(n)
    out = {}
    for a in (0, 1):
        vals = tb.evaluate(data.z[:, 0], np.full(n, a), x) * (data.a == a)
        out[a] = (float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n)))
    return out
