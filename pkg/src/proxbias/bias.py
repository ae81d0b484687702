"""Closed-form asymptotic biases of the proximal, OLS and unadjusted estimators.

Three LSEM families are covered:

* ``zw-violation``: p = 2, m = n = 1, q = 0, with U2 driving Z and W but
  neither A nor Y (completeness fails).
* ``ay-violation``: p = 2, m = n = 1, q = 0, with U2 driving A and Y but
  neither proxy (U-relevance fails).
* ``general``: any dimensions with m = n and no effect modification.

Formulas are written in terms of the arm-conditional moments of U,
m_a = E[U | A=a] and C_a = Cov(U | A=a), which come directly from the
treatment moments.  Note S1 = 1/C_0[1,1] and S2 = 1/C_1[1,1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (CorruptMomentsError, DegenerateComparisonError, PoleError, SetupError,
                     SingularSystemError)
from .lsem import LsemSpec
from .moments import TreatmentMoments, r_factors, s_factors, treatment_moments_quadrature

COND_LIMIT = 1e8
POLE_BAND = 1e-6

ZW, AY, GENERAL = "zw-violation", "ay-violation", "general"


# ----------------------------------------------------------------------------
# setup recognition


def _is_two_confounder(spec):
    d = spec.dims
    return d.p == 2 and d.m == 1 and d.n == 1 and d.q == 0


def _require_zw(spec):
    if not _is_two_confounder(spec):
        raise SetupError("ZW setup needs p=2, m=n=1, q=0")
    if spec.alpha_u[1] != 0 or spec.gamma_u[1] != 0 or spec.gamma_au[1] != 0:
        raise SetupError("ZW setup needs alpha_u2 = gamma_u2 = gamma_au2 = 0")
    if spec.theta_u[0, 0] == 0 or spec.mu_u[0, 0] == 0:
        raise SetupError("ZW setup needs theta_u1 and mu_u1 nonzero")


def _require_ay(spec):
    if not _is_two_confounder(spec):
        raise SetupError("AY setup needs p=2, m=n=1, q=0")
    if spec.theta_u[1, 0] != 0 or spec.mu_u[1, 0] != 0 or spec.gamma_au[1] != 0:
        raise SetupError("AY setup needs theta_u2 = mu_u2 = gamma_au2 = 0")
    if spec.theta_u[0, 0] == 0 or spec.mu_u[0, 0] == 0:
        raise SetupError("AY setup needs theta_u1 and mu_u1 nonzero")


def classify_setup(spec: LsemSpec) -> str:
    """Pick the formula family a spec belongs to.

    When a spec fits both two-confounder families (U2 inert everywhere) the
    ZW label wins; both formulas then agree.
    """
    if _is_two_confounder(spec):
        for tag, req in ((ZW, _require_zw), (AY, _require_ay)):
            try:
                req(spec)
                return tag
            except SetupError:
                pass
    if spec.dims.m == spec.dims.n and not np.any(spec.gamma_au):
        return GENERAL
    raise SetupError("spec matches no supported bias family")


# ----------------------------------------------------------------------------
# conditional moments


def arm_moments(mom: TreatmentMoments):
    """[(m_0, C_0), (m_1, C_1)] for U given A=a; Var(U) = I by construction."""
    e = mom.e_a
    m1 = mom.e_au / e
    c1 = mom.e_auu / e - np.outer(m1, m1)
    m0 = -mom.e_au / (1 - e)
    c0 = (np.eye(mom.p) - mom.e_auu) / (1 - e) - np.outer(m0, m0)
    return [(m0, c0), (m1, c1)]


def _near_zero(x, scale):
    return abs(x) <= POLE_BAND * max(1.0, abs(scale))


# ----------------------------------------------------------------------------
# ZW family


def zw_denominators(spec: LsemSpec, mom: TreatmentMoments):
    """The two denominators mu_u1 + S_i k, k = theta_u2 mu_u2 / theta_u1."""
    s = s_factors(mom)
    k = spec.theta_u[1, 0] * spec.mu_u[1, 0] / spec.theta_u[0, 0]
    mu1 = spec.mu_u[0, 0]
    return s, k, (mu1 + s.s1 * k, mu1 + s.s2 * k)


def bias_por_zw(spec: LsemSpec, mom: TreatmentMoments) -> float:
    _require_zw(spec)
    s, k, (d1, d2) = zw_denominators(spec, mom)
    mu1 = spec.mu_u[0, 0]
    for den, si in ((d1, s.s1), (d2, s.s2)):
        if _near_zero(den, max(abs(mu1), abs(si * k))):
            raise PoleError("proximal bias is unbounded: mu_u1 + S k vanishes",
                            location=-si)
    e, e1 = mom.e_a, mom.e_au[0]
    gu1, gau1 = spec.gamma_u[0], spec.gamma_au[0]
    inner = ((1 - e) * s.s2 / d2 * gau1
             + (e * s.s1 / d1 + (1 - e) * s.s2 / d2) * gu1)
    return float(e1 / (e * (1 - e)) * k * inner)


def ratio_f(r: float, e_a: float, s1: float, s2: float) -> float:
    """delta_POR / delta_unadj for the ZW family with gamma_au1 = 0."""
    return e_a * s1 / (r + s1) + (1 - e_a) * s2 / (r + s2)


# ----------------------------------------------------------------------------
# AY family


def bias_por_ay(spec: LsemSpec, mom: TreatmentMoments) -> float:
    """Proximal bias when U2 affects A and Y only.

    In each arm the proximal fit is an IV regression of Y on W with Z as the
    instrument; the slope picks up the U2 path through Cov(U1, U2 | A=a).
    """
    _require_ay(spec)
    (m0, c0), (m1, c1) = arm_moments(mom)
    if c0[0, 0] <= 0 or c1[0, 0] <= 0:
        raise CorruptMomentsError("nonpositive conditional variance of U1")
    arm1 = m1[1] - c1[0, 1] * m1[0] / c1[0, 0]
    arm0 = m0[1] - c0[0, 1] * m0[0] / c0[0, 0]
    return float(spec.gamma_u[1] * (arm1 - arm0))


# ----------------------------------------------------------------------------
# OLS and unadjusted (any shape)


def bias_or(spec: LsemSpec, mom: TreatmentMoments) -> float:
    """Fully interacted OLS on L = (Z, W, X), standardized over L.

    Interacted OLS is two separate regressions, one per arm, so the limit
    uses only the arm-conditional mean and covariance of V = (U, X).
    """
    p, q = spec.dims.p, spec.dims.q
    sigma = spec.cov
    e = mom.e_a
    eav, eavv = mom.e_av, mom.e_avv
    arms = [(-eav / (1 - e), (sigma - eavv) / (1 - e)), (eav / e, eavv / e)]
    # L = c_L(a) + T V + noise
    t = np.vstack([np.vstack([spec.theta_u, spec.theta_x]).T,
                   np.vstack([spec.mu_u, spec.mu_x]).T,
                   np.hstack([np.zeros((q, p)), np.eye(q)])])
    s1, s2, _ = spec.noise_sd
    noise = np.concatenate([np.full(spec.dims.m, s1 ** 2), np.full(spec.dims.n, s2 ** 2),
                            np.zeros(q)])
    el = np.concatenate([spec.theta0 + spec.theta_a * e, spec.mu0, np.zeros(q)])
    parts = []
    for a, (mv, cv_raw) in enumerate(arms):
        cv = cv_raw - np.outer(mv, mv)
        g = np.concatenate([spec.gamma_u + a * spec.gamma_au, spec.gamma_x])
        cl = t @ cv @ t.T + np.diag(noise)
        cond = float(np.linalg.cond(cl))
        if cond > COND_LIMIT:
            raise SingularSystemError("population OLS design is singular", cond)
        beta = np.linalg.solve(cl, t @ cv @ g)
        mean_l = np.concatenate([spec.theta0 + spec.theta_a * a, spec.mu0, np.zeros(q)]) + t @ mv
        mean_y = spec.gamma0 + spec.gamma_a * a + g @ mv
        parts.append((mean_y - beta @ mean_l, beta))
    (c0, b0), (c1, b1) = parts
    return float(c1 - c0 + (b1 - b0) @ el - spec.gamma_a)


def bias_or_zw(spec: LsemSpec, mom: TreatmentMoments) -> float:
    _require_zw(spec)
    return bias_or(spec, mom)


def bias_or_ay(spec: LsemSpec, mom: TreatmentMoments) -> float:
    _require_ay(spec)
    return bias_or(spec, mom)


def bias_unadj(spec: LsemSpec, mom: TreatmentMoments) -> float:
    """E[Y|A=1] - E[Y|A=0] - gamma_a.

    The effect-modification term is weighted by E[AU]/E[A] because it enters
    only through the treated arm mean E[U | A=1].
    """
    e = mom.e_a
    confounding = (spec.gamma_u @ mom.e_au + spec.gamma_x @ mom.e_ax) / (e * (1 - e))
    return float(confounding + spec.gamma_au @ mom.e_au / e)


# ----------------------------------------------------------------------------
# general family


def general_b_matrix(spec: LsemSpec, mom: TreatmentMoments):
    """(B, beta) of the multi-dimensional bias formula."""
    p, q = spec.dims.p, spec.dims.q
    e = mom.e_a
    if q:
        sx_inv_rho = np.linalg.solve(spec.sigma_x, spec.rho.T)  # q x p
        adj = mom.e_au - sx_inv_rho.T @ mom.e_ax
        den = e * (1 - e) - mom.e_ax @ np.linalg.solve(spec.sigma_x, mom.e_ax)
        resid = np.eye(p) - spec.rho @ sx_inv_rho
    else:
        adj = mom.e_au.copy()
        den = e * (1 - e)
        resid = np.eye(p)
    if den <= 0:
        raise CorruptMomentsError("nonpositive residual treatment variance")
    b = (resid - np.outer(adj, adj) / den) @ spec.theta_u
    return b, adj / den


def bias_general(spec: LsemSpec, mom: TreatmentMoments, *, return_parts: bool = False):
    """Bias of the linear proximal fit h = (1, A, W, X) with no effect modification.

    For p >= m the m x m matrix B^T mu_u must be well conditioned; for p < m
    it is rank deficient by construction and its pseudo-inverse is used.
    """
    d = spec.dims
    if d.m != d.n:
        raise SetupError("general bias formula needs m == n")
    if np.any(spec.gamma_au):
        raise SetupError("general bias formula assumes gamma_au = 0")
    b, beta = general_b_matrix(spec, mom)
    mu = spec.mu_u
    bm = b.T @ mu
    cond = float(np.linalg.cond(bm))
    if d.p >= d.m:
        if cond > COND_LIMIT:
            raise SingularSystemError("B^T mu_u is singular", cond)
        proj = mu @ np.linalg.solve(bm, b.T)
    else:
        proj = mu @ np.linalg.pinv(bm) @ b.T
    delta = float(beta @ (np.eye(d.p) - proj) @ spec.gamma_u)
    if return_parts:
        return delta, {"B": b, "cond_BTmu": cond}
    return delta


# ----------------------------------------------------------------------------
# bias comparison for the ZW family


@dataclass(frozen=True)
class Comparison:
    """Verdict of |delta_POR| versus |delta_unadj|.

    ``r_star`` is -S1(1-E[A]) - S2 E[A], the root of f(r) = 1 between the two
    poles.  ``r_lo`` and ``r_hi`` solve f(r) = -1.  For r < 0 the proximal
    bias is smaller exactly on (-inf, r_lo) and on (r_star, r_hi); the second
    interval is empty when S1 = S2.
    """

    verdict: str
    r: float
    r_star: float
    r_lo: float
    r_hi: float
    poles: tuple
    s1: float
    s2: float
    margin: float
    extras: dict = field(default_factory=dict)


def compare_biases_zw(spec: LsemSpec, mom: TreatmentMoments) -> Comparison:
    _require_zw(spec)
    if spec.gamma_au[0] != 0:
        raise SetupError("bias comparison assumes gamma_au1 = 0")
    prod2 = spec.theta_u[1, 0] * spec.mu_u[1, 0]
    if prod2 == 0:
        raise DegenerateComparisonError("theta_u2 mu_u2 = 0: the proximal estimator is unbiased")
    prod1 = spec.theta_u[0, 0] * spec.mu_u[0, 0]
    r = prod1 / prod2
    s = s_factors(mom)
    e = mom.e_a
    s1, s2 = s.s1, s.s2
    r_star = -s1 * (1 - e) - s2 * e
    bq = (1 + e) * s1 + (2 - e) * s2
    disc = np.sqrt(max(bq * bq - 8 * s1 * s2, 0.0))
    r_lo, r_hi = (-bq - disc) / 2, (-bq + disc) / 2
    poles = (-s1, -s2)
    if r > 0:
        return Comparison("por-dominates", r, r_star, r_lo, r_hi, poles, s1, s2, np.inf)
    edges = [r_lo, r_star, r_hi, *poles, 0.0]
    margin = min(abs(r - x) for x in edges)
    if min(abs(r - p) for p in poles) <= POLE_BAND * max(s1, s2):
        verdict = "pole"
    elif r < r_lo or r_star < r < r_hi:
        verdict = "por-dominates"
    else:
        verdict = "unadj-dominates"
    return Comparison(verdict, r, r_star, r_lo, r_hi, poles, s1, s2, margin)


# ----------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class BiasReport:
    delta_por: float | None
    delta_or: float | None
    delta_unadj: float
    setup: str
    intermediates: dict
    pole: bool = False

    def to_dict(self) -> dict:
        inter = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                 for k, v in self.intermediates.items()}
        return {"setup": self.setup, "delta_por": self.delta_por, "delta_or": self.delta_or,
                "delta_unadj": self.delta_unadj, "pole": self.pole, "intermediates": inter}


def bias_report(spec: LsemSpec, mom: TreatmentMoments | None = None, *,
                setup: str | None = None, order: int = 60) -> BiasReport:
    """All closed-form biases for one spec.  Poles yield ``delta_por=None``."""
    if mom is None:
        mom = treatment_moments_quadrature(spec, order)
    setup = setup or classify_setup(spec)
    inter: dict = {"e_a": mom.e_a, "moment_method": mom.method, "moment_est_error": mom.est_error}
    pole = False
    por = None
    if setup == ZW:
        s = s_factors(mom)
        inter.update(s1=s.s1, s2=s.s2)
        prod2 = spec.theta_u[1, 0] * spec.mu_u[1, 0]
        if prod2 != 0:
            inter["r"] = spec.theta_u[0, 0] * spec.mu_u[0, 0] / prod2
            inter["r_star"] = -s.s1 * (1 - mom.e_a) - s.s2 * mom.e_a
        try:
            por = bias_por_zw(spec, mom)
        except PoleError:
            pole = True
    elif setup == AY:
        r = r_factors(mom)
        s = s_factors(mom)
        inter.update(r1=r.r1, r2=r.r2, s1=s.s1, s2=s.s2)
        por = bias_por_ay(spec, mom)
    elif setup == GENERAL:
        por, parts = bias_general(spec, mom, return_parts=True)
        inter.update(parts)
    else:
        raise SetupError(f"unknown setup {setup!r}")
    try:
        orv = bias_or(spec, mom)
    except SingularSystemError:
        orv = None
    return BiasReport(por, orv, bias_unadj(spec, mom), setup, inter, pole)
