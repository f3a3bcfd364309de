"""Ordinary least squares with cluster-robust (CR1) standard errors."""

from __future__ import annotations

import numpy as np

from .model import ModelSpec, RegressionFitReport, RegressionRow, check_rank, design_matrix, group_codes


def ols_arrays(X: np.ndarray, y: np.ndarray, clusters: np.ndarray | None = None):
    """Coefficients, covariance, residual variance for y on X.

    With ``clusters`` the sandwich covariance uses the CR1 small-sample factor
    G/(G-1) * (n-1)/(n-k); otherwise classical s^2 (X'X)^-1.
    """
    n, k = X.shape
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ (X.T @ y)
    resid = y - X @ beta
    dof = n - k
    sigma2 = float(resid @ resid / dof) if dof > 0 else 0.0
    if clusters is None:
        cov = sigma2 * XtX_inv
    else:
        G = int(clusters.max()) + 1
        scores = np.zeros((G, k))
        np.add.at(scores, clusters, X * resid[:, None])
        meat = scores.T @ scores
        c = (G / (G - 1)) * ((n - 1) / dof) if G > 1 and dof > 0 else 1.0
        cov = c * XtX_inv @ meat @ XtX_inv
    return beta, cov, sigma2, resid


def fit_ols_cluster(rows: list[RegressionRow], spec: ModelSpec) -> RegressionFitReport:
    """OLS; standard errors clustered on the first grouping key of ``spec.random``."""
    X, y, names = design_matrix(rows, spec)
    check_rank(X, names)
    clusters, key, n_clusters = None, None, None
    if spec.random:
        key = spec.random[0]
        clusters, levels = group_codes(rows, key)
        n_clusters = len(levels)
    beta, cov, sigma2, _ = ols_arrays(X, y, clusters)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return RegressionFitReport(
        estimation="ols_cluster",
        names=names,
        coefficients=dict(zip(names, map(float, beta))),
        std_errors=dict(zip(names, map(float, se))),
        covariance=cov,
        df=float(len(y) - X.shape[1]),
        n_rows=len(y),
        variance_components={"residual": sigma2},
        cluster_key=key,
        n_clusters=n_clusters,
        spec=spec,
    )
