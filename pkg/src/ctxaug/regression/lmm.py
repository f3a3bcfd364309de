"""Linear mixed model with independent random intercepts (and slopes), fit by REML.

Model: y = X b + sum_k Z_k u_k + e, u_k ~ N(0, lam_k s2 I), e ~ N(0, s2 I).
With H = I + Z Lam Z', the residual variance s2 is profiled out and

    -2 l_R(lam) = (n - p) log(y'Py) + log|H| + log|X'H^-1 X| + const,
    P = H^-1 - H^-1 X (X'H^-1 X)^-1 X'H^-1.

Everything is evaluated in the q-dimensional random-effect space through
M = I + S Z'Z S with S = Lam^(1/2), so H^-1 = I - Z S M^-1 S Z' and
log|H| = log|M|; lam_k = 0 needs no special case. The optimizer works on
phi = log lam with an analytic gradient.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg, optimize

from ..errors import ConfigError, ConvergenceError, SizingError
from ..seeding import derive_seed
from .model import ModelSpec, RegressionFitReport, RegressionRow, check_rank, design_matrix, group_codes, term_value

PHI_LO, PHI_HI = -30.0, 15.0
GRAD_TOL = 1e-6
CRIT_TOL = 1e-8


def random_design(rows: list[RegressionRow], spec: ModelSpec) -> tuple[np.ndarray, list[int], list[str]]:
    """Stacked Z, the component index of each column, and component names."""
    blocks, comp, names = [], [], []
    for key in spec.random:
        codes, levels = group_codes(rows, key)
        if len(levels) < 2:
            raise SizingError(f"grouping {key!r} has {len(levels)} level(s); need at least 2")
        Z = np.zeros((len(rows), len(levels)))
        Z[np.arange(len(rows)), codes] = 1.0
        blocks.append(Z)
        comp += [len(names)] * len(levels)
        names.append(key)
    for key, term in spec.random_slopes:
        codes, levels = group_codes(rows, key)
        if len(levels) < 2:
            raise SizingError(f"grouping {key!r} has {len(levels)} level(s); need at least 2")
        vals = np.array([term_value(r, term) for r in rows])
        Z = np.zeros((len(rows), len(levels)))
        Z[np.arange(len(rows)), codes] = vals
        blocks.append(Z)
        comp += [len(names)] * len(levels)
        names.append(f"{key}:{term}")
    if not blocks:
        raise ConfigError("mixed model needs at least one random grouping")
    return np.hstack(blocks), comp, names


class RemlProblem:
    """Profiled REML criterion and gradient for fixed X, Z, y."""

    def __init__(self, X: np.ndarray, Z: np.ndarray, comp: list[int], y: np.ndarray):
        self.n, self.p = X.shape
        self.comp = np.asarray(comp)
        self.K = int(self.comp.max()) + 1
        # Work with X = Q R and y residualized on X: P X = 0 leaves P y unchanged, and the
        # criterion only shifts by log|R|^2. This avoids cancellation in y'H^-1 y.
        Q, R = np.linalg.qr(X)
        self.R = R
        self.b0 = linalg.solve_triangular(R, Q.T @ y)
        y = y - X @ self.b0
        X = Q
        self.logdetR2 = 2.0 * float(np.sum(np.log(np.abs(np.diag(R)))))
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.ZtZ = Z.T @ Z
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.nu = self.n - self.p
        if self.nu <= 0:
            raise SizingError(f"{self.n} rows cannot support {self.p} fixed effects")
        self.const = self.nu * (1.0 + math.log(2.0 * math.pi / self.nu))

    def _solve(self, lam: np.ndarray):
        lam = np.maximum(np.asarray(lam, dtype=float), 0.0)
        s = np.sqrt(lam[self.comp])
        M = np.eye(len(s)) + s[:, None] * self.ZtZ * s[None, :]
        cM = linalg.cho_factor(M, lower=True)
        logdetH = 2.0 * float(np.sum(np.log(np.diag(cM[0]))))
        SZX = s[:, None] * self.ZtX
        SZy = s * self.Zty
        MiSZX = linalg.cho_solve(cM, SZX)
        MiSZy = linalg.cho_solve(cM, SZy)
        XHX = self.XtX - SZX.T @ MiSZX
        XHy = self.Xty - SZX.T @ MiSZy
        yHy = self.yty - float(SZy @ MiSZy)
        cX = linalg.cho_factor(XHX, lower=True)
        beta = linalg.cho_solve(cX, XHy)
        Q = yHy - float(XHy @ beta)
        logdetX = 2.0 * float(np.sum(np.log(np.diag(cX[0])))) + self.logdetR2
        return dict(s=s, cM=cM, MiSZX=MiSZX, MiSZy=MiSZy, XHX=XHX, cX=cX, beta=beta,
                    Q=Q, logdetH=logdetH, logdetX=logdetX)

    def criterion(self, lam) -> float:
        st = self._solve(lam)
        if not st["Q"] > 0:
            return math.inf
        return self.nu * math.log(st["Q"]) + st["logdetH"] + st["logdetX"] + self.const

    def criterion_and_grad(self, lam) -> tuple[float, np.ndarray]:
        """Criterion and its gradient with respect to lam (not log lam)."""
        st = self._solve(lam)
        Q = st["Q"]
        if not Q > 0:
            return math.inf, np.zeros(self.K)
        crit = self.nu * math.log(Q) + st["logdetH"] + st["logdetX"] + self.const
        s = st["s"]
        ZtZs = self.ZtZ * s[None, :]
        ZHZ = self.ZtZ - ZtZs @ linalg.cho_solve(st["cM"], s[:, None] * self.ZtZ)
        ZHX = self.ZtX - ZtZs @ st["MiSZX"]
        ZHy = self.Zty - ZtZs @ st["MiSZy"]
        ZPZ_diag = np.diag(ZHZ) - np.einsum("ij,ji->i", ZHX, linalg.cho_solve(st["cX"], ZHX.T))
        ZPy = ZHy - ZHX @ st["beta"]
        tr = np.bincount(self.comp, weights=ZPZ_diag, minlength=self.K)
        quad = np.bincount(self.comp, weights=ZPy * ZPy, minlength=self.K)
        return crit, tr - self.nu * quad / Q

    def gls(self, lam):
        """(beta, cov(beta), sigma2) at the given variance ratios."""
        st = self._solve(lam)
        sigma2 = st["Q"] / self.nu
        Rinv = linalg.solve_triangular(self.R, np.eye(self.p))
        cov = sigma2 * Rinv @ linalg.cho_solve(st["cX"], np.eye(self.p)) @ Rinv.T
        return self.b0 + Rinv @ st["beta"], cov, sigma2


def _phi_fun(prob: RemlProblem, free: np.ndarray, lam_fixed: np.ndarray):
    def f(phi):
        lam = lam_fixed.copy()
        lam[free] = np.exp(phi)
        c, g = prob.criterion_and_grad(lam)
        if not math.isfinite(c):
            return 1e300, np.zeros_like(phi)
        return c, g[free] * lam[free]
    return f


def _newton_polish(f, phi: np.ndarray, trace: list, max_iter: int = 50):
    """Newton steps with a finite-difference Hessian of the analytic gradient."""
    c, g = f(phi)
    last_change = math.inf
    for _ in range(max_iter):
        if np.linalg.norm(g) < GRAD_TOL and last_change < CRIT_TOL:
            break
        h = 1e-5
        Hm = np.empty((len(phi), len(phi)))
        for i in range(len(phi)):
            e = np.zeros_like(phi)
            e[i] = h
            Hm[:, i] = (f(phi + e)[1] - f(phi - e)[1]) / (2 * h)
        Hm = 0.5 * (Hm + Hm.T)
        try:
            w = np.linalg.eigvalsh(Hm)
            step = -np.linalg.solve(Hm, g) if w.min() > 1e-12 else -g
        except np.linalg.LinAlgError:
            step = -g
        t = 1.0
        while True:
            cand = np.clip(phi + t * step, PHI_LO, PHI_HI)
            c_new, g_new = f(cand)
            if c_new <= c + 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            # near the optimum the decrease is below rounding in the criterion;
            # accept a step that shrinks the gradient without a real increase
            noise = 1e-12 * max(1.0, abs(c))
            if c_new <= c + noise and np.linalg.norm(g_new) < 0.5 * np.linalg.norm(g):
                break
            t *= 0.5
        last_change = abs(c - c_new)
        phi, c, g = cand, c_new, g_new
        trace.append(("newton", float(c), float(np.linalg.norm(g))))
    return phi, c, g, last_change


def _optimize(prob: RemlProblem, seed: int, restarts: int = 3, max_iter: int = 500):
    K = prob.K
    rng = np.random.default_rng(seed)
    starts = [np.zeros(K)] + [rng.normal(0.0, 1.5, K) for _ in range(restarts - 1)]
    trace: list = []
    best = None
    for x0 in starts:
        f = _phi_fun(prob, np.arange(K), np.zeros(K))
        res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B", bounds=[(PHI_LO, PHI_HI)] * K,
                                options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-10})
        trace.append(("lbfgs", float(res.fun), int(res.nit)))
        if best is None or res.fun < best[1]:
            best = (res.x, float(res.fun), int(res.nit))
    phi, _, nit = best

    # components pushed toward -inf are boundary candidates, fixed at exactly 0
    at_zero = phi < PHI_LO + 10.0
    for _ in range(K + 1):
        free = np.flatnonzero(~at_zero)
        lam = np.zeros(K)
        if len(free):
            f = _phi_fun(prob, free, np.zeros(K))
            phi_free, c, g, change = _newton_polish(f, phi[free], trace)
            lam[free] = np.exp(phi_free)
        else:
            c, g, change = prob.criterion(lam), np.zeros(0), 0.0
        _, g_lam = prob.criterion_and_grad(lam)
        # KKT at the boundary: moving a zero component inward must not lower the criterion
        reenter = [k for k in np.flatnonzero(at_zero) if g_lam[k] < -GRAD_TOL]
        if not reenter:
            break
        for k in reenter:
            at_zero[k] = False
            phi[k] = math.log(1e-3)
        phi[free] = np.log(lam[free])
    converged = (np.linalg.norm(g) < GRAD_TOL) and change < CRIT_TOL
    return lam, c, converged, float(np.linalg.norm(g)) if len(g) else 0.0, at_zero, nit, trace


def fit_lmm(rows: list[RegressionRow], spec: ModelSpec, seed: int = 0, restarts: int = 3) -> RegressionFitReport:
    """REML fit; fixed effects by GLS at the optimum, df = n - rank."""
    X, y, names = design_matrix(rows, spec)
    check_rank(X, names)
    Z, comp, comp_names = random_design(rows, spec)
    prob = RemlProblem(X, Z, comp, y)
    lam, crit, converged, gnorm, at_zero, nit, trace = _optimize(
        prob, derive_seed(seed, "reml-restarts"), restarts
    )
    if not converged:
        raise ConvergenceError(
            f"REML did not converge (gradient norm {gnorm:.3g})", trace
        )
    beta, cov, sigma2 = prob.gls(lam)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    components = {name: float(lam[k] * sigma2) for k, name in enumerate(comp_names)}
    components["residual"] = float(sigma2)
    return RegressionFitReport(
        estimation="reml",
        names=names,
        coefficients=dict(zip(names, map(float, beta))),
        std_errors=dict(zip(names, map(float, se))),
        covariance=cov,
        df=float(len(y) - X.shape[1]),
        n_rows=len(y),
        variance_components=components,
        criterion=float(crit),
        log_likelihood=-0.5 * float(crit),
        converged=True,
        iterations=nit,
        boundary={name: bool(at_zero[k]) for k, name in enumerate(comp_names)},
        gradient_norm=gnorm,
        spec=spec,
    )


def reml_problem(rows: list[RegressionRow], spec: ModelSpec) -> RemlProblem:
    X, y, names = design_matrix(rows, spec)
    Z, comp, _ = random_design(rows, spec)
    return RemlProblem(X, Z, comp, y)


def fit(rows: list[RegressionRow], spec: ModelSpec, seed: int = 0) -> RegressionFitReport:
    from .ols import fit_ols_cluster

    if spec.estimation == "ols_cluster":
        return fit_ols_cluster(rows, spec)
    return fit_lmm(rows, spec, seed)
