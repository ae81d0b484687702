"""Finite-sample estimators and their exact population analogues.

Population oracle
-----------------
Inside treatment arm a every model variable is a linear form in the basis
(1, V, eps1, eps2, eps3), with V = (U, X).  Writing 1{A=a} f g and taking
expectations gives E[f g 1{A=a}] = f_a^T G_a g_a where G_a collects the
treatment moments (E[A], E[AV], E[AVV^T]) and their complements.  Any
moment equation of the proximal GMM or of OLS is a sum of such terms, so the
probability limits come out of a small linear solve with no approximation
beyond the treatment moments themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bridge import OutcomeBridgeParams
from .errors import EmptyArmError, IdentificationError, SetupError, SingularSystemError
from .lsem import Dataset, LsemSpec
from .moments import TreatmentMoments, treatment_moments_quadrature

COND_LIMIT = 1e8
FORMS = ("full", "linear")


# ----------------------------------------------------------------------------
# population algebra


class _Arms:
    """Linear-form representation of the LSEM, one Gram matrix per arm."""

    def __init__(self, spec: LsemSpec, mom: TreatmentMoments):
        d = spec.dims
        self.spec, self.dims = spec, d
        self.nv = d.p + d.q
        self.nb = 1 + self.nv + d.m + d.n + 1
        nb, nv = self.nb, self.nv
        sigma = spec.cov
        ea, eav, eavv = mom.e_a, mom.e_av, mom.e_avv
        g1 = np.zeros((nb, nb))
        g1[0, 0] = ea
        g1[0, 1:1 + nv] = g1[1:1 + nv, 0] = eav
        g1[1:1 + nv, 1:1 + nv] = eavv
        g1[1 + nv:, 1 + nv:] = ea * np.eye(nb - 1 - nv)
        g0 = -g1
        g0[0, 0] = 1 - ea
        g0[1:1 + nv, 1:1 + nv] = sigma - eavv
        g0[1 + nv:, 1 + nv:] = (1 - ea) * np.eye(nb - 1 - nv)
        self.gram = (g0, g1)
        self.e_a = ea

    def _basis(self, i):
        e = np.zeros(self.nb)
        e[i] = 1.0
        return e

    def one(self, a):
        return self._basis(0)

    def x(self, a):
        """q x nb block of forms for X."""
        p, q = self.dims.p, self.dims.q
        out = np.zeros((q, self.nb))
        out[:, 1 + p:1 + p + q] = np.eye(q)
        return out

    def z(self, a):
        s, d = self.spec, self.dims
        out = np.zeros((d.m, self.nb))
        out[:, 0] = s.theta0 + s.theta_a * a
        out[:, 1:1 + self.nv] = np.vstack([s.theta_u, s.theta_x]).T
        off = 1 + self.nv
        out[:, off:off + d.m] = s.noise_sd[0] * np.eye(d.m)
        return out

    def w(self, a):
        s, d = self.spec, self.dims
        out = np.zeros((d.n, self.nb))
        out[:, 0] = s.mu0
        out[:, 1:1 + self.nv] = np.vstack([s.mu_u, s.mu_x]).T
        off = 1 + self.nv + d.m
        out[:, off:off + d.n] = s.noise_sd[1] * np.eye(d.n)
        return out

    def y(self, a):
        s = self.spec
        out = np.zeros(self.nb)
        out[0] = s.gamma0 + s.gamma_a * a
        out[1:1 + self.nv] = np.concatenate([s.gamma_u + a * s.gamma_au, s.gamma_x])
        out[-1] = s.noise_sd[2]
        return out

    def cross(self, left, right):
        """E[L R^T] where left/right map an arm to a (k x nb) block of forms."""
        return sum(np.atleast_2d(left(a)) @ self.gram[a] @ np.atleast_2d(right(a)).T
                   for a in (0, 1))


def _features(arms: _Arms, kind: str, form: str):
    """Stacked forms for the bridge features h or the instruments Q."""
    proxy = arms.w if kind == "h" else arms.z
    q = arms.dims.q

    def block(a):
        rows = [arms.one(a)[None], a * arms.one(a)[None], proxy(a)]
        if q:
            rows.append(arms.x(a))
        if form == "full":
            if q:
                rows.append(a * arms.x(a))
            rows.append(a * proxy(a))
        return np.vstack(rows)

    return block


def _unpack_bridge(b, n, q, form) -> OutcomeBridgeParams:
    b0, ba = b[0], b[1]
    i = 2
    bw = b[i:i + n]
    i += n
    bx = b[i:i + q]
    i += q
    if form == "full":
        bax = b[i:i + q]
        i += q
        baw = b[i:i + n]
    else:
        bax, baw = np.zeros(q), np.zeros(n)
    return OutcomeBridgeParams(b0=b0, ba=ba, bx=bx, bw=bw, bax=bax, baw=baw)


@dataclass(frozen=True)
class PopulationFit:
    """Probability limit of an estimator under a spec."""

    coef: object
    psi: float
    bias: float
    cond: float


def _moments_for(spec, mom, order):
    return mom if mom is not None else treatment_moments_quadrature(spec, order)


def _check_form(form):
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")


def population_gmm(spec: LsemSpec, form: str = "full", mom: TreatmentMoments | None = None,
                   *, order: int = 60, allow_singular: bool = False) -> PopulationFit:
    """Solve the population moment equations E[(Y - h) Q] = 0.

    Features h = (1, A, W, X[, AX, AW]) are paired with instruments
    Q = (1, A, Z, X[, AX, AZ]); X terms drop when q = 0.  The system is square
    only when m = n.  ``allow_singular`` switches to the minimum-norm
    least-squares root, the analogue of a pseudo-inverse.
    """
    _check_form(form)
    if spec.dims.m != spec.dims.n:
        raise SetupError("exact identification needs dim(Z) == dim(W)")
    arms = _Arms(spec, _moments_for(spec, mom, order))
    hf, qf = _features(arms, "h", form), _features(arms, "q", form)
    qh = arms.cross(qf, hf)
    qy = arms.cross(qf, arms.y).ravel()
    cond = float(np.linalg.cond(qh))
    if cond > COND_LIMIT:
        if not allow_singular:
            raise SingularSystemError("population GMM system is singular", cond)
        b = np.linalg.lstsq(qh, qy, rcond=None)[0]
    else:
        b = np.linalg.solve(qh, qy)
    bridge = _unpack_bridge(b, spec.dims.n, spec.dims.q, form)
    # E[X] = 0 and E[W] = mu0
    psi = float(bridge.ba + bridge.baw @ spec.mu0)
    return PopulationFit(bridge, psi, psi - spec.gamma_a, cond)


def _or_design(arms):
    q = arms.dims.q

    def block(a):
        one = arms.one(a)[None]
        rows = [one, arms.z(a), arms.w(a)]
        if q:
            rows.append(arms.x(a))
        rows += [a * one, a * arms.z(a), a * arms.w(a)]
        if q:
            rows.append(a * arms.x(a))
        return np.vstack(rows)

    return block


def _or_contrast_weights(spec, e_a, sizes):
    """Coefficient weights that turn OLS coefficients into the standardized contrast."""
    m, n, q = sizes
    ez = spec.theta0 + spec.theta_a * e_a
    return np.concatenate([np.zeros(1 + m + n + q), [1.0], ez, spec.mu0, np.zeros(q)])


def population_ols(spec: LsemSpec, mom: TreatmentMoments | None = None, *,
                   order: int = 60) -> PopulationFit:
    """Probability limit of the fully interacted OLS g-formula estimator."""
    m = _moments_for(spec, mom, order)
    arms = _Arms(spec, m)
    des = _or_design(arms)
    mm = arms.cross(des, des)
    my = arms.cross(des, arms.y).ravel()
    cond = float(np.linalg.cond(mm))
    if cond > COND_LIMIT:
        raise SingularSystemError("population OLS design is singular", cond)
    beta = np.linalg.solve(mm, my)
    d = spec.dims
    psi = float(_or_contrast_weights(spec, m.e_a, (d.m, d.n, d.q)) @ beta)
    return PopulationFit(beta, psi, psi - spec.gamma_a, cond)


def population_unadj(spec: LsemSpec, mom: TreatmentMoments | None = None, *,
                     order: int = 60) -> PopulationFit:
    """Probability limit of the difference in arm means."""
    m = _moments_for(spec, mom, order)
    arms = _Arms(spec, m)
    one, y = arms.one(0), arms.y
    mean1 = one @ arms.gram[1] @ y(1) / m.e_a
    mean0 = one @ arms.gram[0] @ y(0) / (1 - m.e_a)
    psi = float(mean1 - mean0)
    return PopulationFit(np.array([mean0, mean1]), psi, psi - spec.gamma_a, 1.0)


# ----------------------------------------------------------------------------
# finite-sample estimators


@dataclass(frozen=True)
class FitResult:
    psi_hat: float
    bridge_hat: object
    n: int
    se_psi: float
    estimator: str

    def to_dict(self) -> dict:
        bh = self.bridge_hat
        if isinstance(bh, OutcomeBridgeParams):
            bh = bh.to_dict()
        elif isinstance(bh, np.ndarray):
            bh = bh.tolist()
        return {"estimator": self.estimator, "psi_hat": self.psi_hat, "se_psi": self.se_psi,
                "n": self.n, "bridge_hat": bh}


def _sandwich_se(g: np.ndarray, jac: np.ndarray) -> float:
    """SE of the last parameter from stacked estimating functions g (N x k)."""
    n = g.shape[0]
    omega = g.T @ g / n
    jinv = np.linalg.inv(jac)
    cov = jinv @ omega @ jinv.T / n
    return float(np.sqrt(max(cov[-1, -1], 0.0)))


def _scaled_cond(mat: np.ndarray) -> float:
    # scale-invariant conditioning so large raw magnitudes do not trigger failure
    r = np.sqrt(np.maximum(np.abs(mat).sum(1), 1e-300))
    c = np.sqrt(np.maximum(np.abs(mat).sum(0), 1e-300))
    return float(np.linalg.cond(mat / r[:, None] / c[None, :]))


def _design_blocks(data: Dataset, form: str):
    a = data.a[:, None]
    one = np.ones_like(a)
    xs = [data.x] if data.x.shape[1] else []
    h = [one, a, data.w, *xs]
    q = [one, a, data.z, *xs]
    if form == "full":
        if xs:
            h.append(a * data.x)
            q.append(a * data.x)
        h.append(a * data.w)
        q.append(a * data.z)
    return np.hstack(h), np.hstack(q)


def fit_proximal_gmm(data: Dataset, form: str = "full") -> FitResult:
    """Just-identified proximal GMM, solved exactly as a linear system."""
    _check_form(form)
    h, qm = _design_blocks(data, form)
    nobs, k = h.shape
    if qm.shape[1] < k:
        raise IdentificationError("fewer instruments than bridge parameters", np.inf)
    if qm.shape[1] > k:
        raise IdentificationError("over-identified system; expected dim(Z) == dim(W)", np.inf)
    if nobs <= k:
        raise IdentificationError(f"need more than {k} rows, got {nobs}", np.inf)
    qh = qm.T @ h / nobs
    cond = _scaled_cond(qh)
    if not np.isfinite(cond) or cond > 1e12:
        raise IdentificationError("instrument/feature cross-moment matrix is rank deficient", cond)
    b = np.linalg.solve(qh, qm.T @ data.y / nobs)
    dims_n, dims_q = data.w.shape[1], data.x.shape[1]
    # contrast weights: d psi / d b for each row
    contrast = np.zeros((nobs, k))
    contrast[:, 1] = 1.0
    if form == "full":
        off = 2 + dims_n + dims_q
        contrast[:, off:off + dims_q] = data.x
        contrast[:, off + dims_q:off + dims_q + dims_n] = data.w
    cvals = contrast @ b
    psi = float(cvals.mean())
    g = np.hstack([qm * (data.y - h @ b)[:, None], (cvals - psi)[:, None]])
    jac = np.zeros((k + 1, k + 1))
    jac[:k, :k] = -qh
    jac[k, :k] = contrast.mean(0)
    jac[k, k] = -1.0
    bridge = _unpack_bridge(b, dims_n, dims_q, form)
    return FitResult(psi, bridge, nobs, _sandwich_se(g, jac), "por")


def fit_or(data: Dataset) -> FitResult:
    """OLS of Y on (1, Z, W, X, A, AZ, AW, AX) with the standardized contrast."""
    a = data.a[:, None]
    one = np.ones_like(a)
    base = np.hstack([one, data.z, data.w, data.x])
    des = np.hstack([base, a * base])
    nobs, k = des.shape
    if nobs <= k:
        raise IdentificationError(f"need more than {k} rows, got {nobs}", np.inf)
    xtx = des.T @ des / nobs
    cond = _scaled_cond(xtx)
    if not np.isfinite(cond) or cond > 1e12:
        raise IdentificationError("OLS design is rank deficient", cond)
    beta = np.linalg.solve(xtx, des.T @ data.y / nobs)
    # Yhat(1) - Yhat(0) = beta_A-block . (1, Z, W, X)
    kb = base.shape[1]
    contrast = np.hstack([np.zeros_like(base), base])
    cvals = base @ beta[kb:]
    psi = float(cvals.mean())
    g = np.hstack([des * (data.y - des @ beta)[:, None], (cvals - psi)[:, None]])
    jac = np.zeros((k + 1, k + 1))
    jac[:k, :k] = -xtx
    jac[k, :k] = contrast.mean(0)
    jac[k, k] = -1.0
    return FitResult(psi, beta, nobs, _sandwich_se(g, jac), "or")


def fit_unadj(data: Dataset) -> FitResult:
    treated = data.a == 1
    n1 = int(treated.sum())
    n0 = data.size - n1
    if n1 == 0 or n0 == 0:
        raise EmptyArmError("both treatment arms must be present")
    y1, y0 = data.y[treated], data.y[~treated]
    psi = float(y1.mean() - y0.mean())
    var1 = y1.var(ddof=1) / n1 if n1 > 1 else 0.0
    var0 = y0.var(ddof=1) / n0 if n0 > 1 else 0.0
    return FitResult(psi, np.array([y0.mean(), y1.mean()]), data.size,
                     float(np.sqrt(var1 + var0)), "unadj")
