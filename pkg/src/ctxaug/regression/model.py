"""Regression rows, model specifications, fit reports, and design matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..errors import ConfigError, RankDeficiencyError

BASELINES = ("shuffle", "jabberwocky", "mask")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RegressionRow:
    observation_id: str
    context_id: str
    response: float
    shuffle_score: float
    jabberwocky_score: float
    mask_score: float | None = None
    covariates: tuple[float, ...] = ()
    moderators: dict[str, float] = field(default_factory=dict)
    groupings: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        scores = [self.response, self.shuffle_score, self.jabberwocky_score]
        if self.mask_score is not None:
            scores.append(self.mask_score)
        if not all(math.isfinite(v) for v in scores):
            raise ValueError(f"row {self.observation_id}/{self.context_id} has a non-finite score")

    def baseline(self, name: str) -> float:
        v = getattr(self, f"{name}_score")
        if v is None:
            raise ConfigError(f"row {self.observation_id}/{self.context_id} has no {name} score")
        return v

    def log_ratio(self, name: str) -> float:
        """Per-row indirect-effect diagnostic log Pr(y|x_inf,c) - log Pr(y|x_variant,c)."""
        return self.response - self.baseline(name)

    def as_dict(self) -> dict:
        return {
            "observation_id": self.observation_id,
            "context_id": self.context_id,
            "response": self.response,
            "shuffle_score": self.shuffle_score,
            "jabberwocky_score": self.jabberwocky_score,
            "mask_score": self.mask_score,
            "covariates": list(self.covariates),
            "moderators": dict(self.moderators),
            "groupings": dict(self.groupings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionRow":
        d = dict(d)
        d["covariates"] = tuple(d.get("covariates", ()))
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    """Fixed terms, random-effect groupings, and estimator.

    Term names: ``shuffle``, ``jabberwocky``, ``mask``, covariates ``x0..x{p-1}``,
    moderator names, and ``a:b`` interactions of declared main effects.
    ``random_slopes`` holds (grouping, term) pairs, each an extra variance
    component independent of that grouping's intercept.
    """

    fixed: tuple[str, ...] = BASELINES
    random: tuple[str, ...] = ()
    random_slopes: tuple[tuple[str, str], ...] = ()
    estimation: str = "reml"
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        object.__setattr__(self, "random_slopes", tuple(tuple(x) for x in self.random_slopes))
        if self.estimation not in ("ols_cluster", "reml"):
            raise ConfigError(f"estimation must be 'ols_cluster' or 'reml', got {self.estimation!r}")
        if len(set(self.fixed)) != len(self.fixed):
            raise ConfigError("duplicate fixed terms")
        mains = {t for t in self.fixed if ":" not in t}
        for t in self.fixed:
            if ":" in t:
                parts = t.split(":")
                missing = [p for p in parts if p not in mains]
                if len(parts) != 2 or missing:
                    raise ConfigError(f"interaction {t!r} references undeclared main effects {missing}")
        for g, term in self.random_slopes:
            if ":" in term:
                raise ConfigError(f"random slope term {term!r} must be a main effect")

    @property
    def column_names(self) -> list[str]:
        return (["(Intercept)"] if self.intercept else []) + list(self.fixed)

    def as_dict(self) -> dict:
        return {
            "fixed": list(self.fixed),
            "random": list(self.random),
            "random_slopes": [list(x) for x in self.random_slopes],
            "estimation": self.estimation,
            "intercept": self.intercept,
        }


def term_value(row: RegressionRow, term: str) -> float:
    if ":" in term:
        a, b = term.split(":")
        return term_value(row, a) * term_value(row, b)
    if term in BASELINES:
        return row.baseline(term)
    if term.startswith("x") and term[1:].isdigit():
        k = int(term[1:])
        if k >= len(row.covariates):
            raise ConfigError(f"row {row.observation_id} has no covariate {term}")
        return float(row.covariates[k])
    if term in row.moderators:
        return float(row.moderators[term])
    raise ConfigError(f"unknown term {term!r} for row {row.observation_id}")


def design_matrix(rows: list[RegressionRow], spec: ModelSpec) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if not rows:
        raise ConfigError("no rows to fit")
    names = spec.column_names
    X = np.empty((len(rows), len(names)))
    for i, r in enumerate(rows):
        for j, name in enumerate(names):
            X[i, j] = 1.0 if name == "(Intercept)" else term_value(r, name)
    y = np.array([r.response for r in rows], dtype=float)
    return X, y, names


def check_rank(X: np.ndarray, names: list[str], tol: float | None = None) -> None:
    """Raise naming every column that is a linear combination of earlier ones."""
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    if tol is None:
        tol = max(X.shape) * np.finfo(float).eps * 1e3
    collinear = []
    kept: list[int] = []
    for j in range(Xs.shape[1]):
        cand = kept + [j]
        s = np.linalg.svd(Xs[:, cand], compute_uv=False)
        if s[-1] <= tol * s[0]:
            collinear.append(names[j])
        else:
            kept.append(j)
    if collinear:
        raise RankDeficiencyError(f"design is rank deficient; collinear terms: {collinear}", collinear)


def group_codes(rows: list[RegressionRow], key: str) -> tuple[np.ndarray, list[str]]:
    labels = []
    for r in rows:
        if key not in r.groupings:
            raise ConfigError(f"row {r.observation_id}/{r.context_id} lacks grouping key {key!r}")
        labels.append(str(r.groupings[key]))
    levels = sorted(set(labels))
    index = {lv: i for i, lv in enumerate(levels)}
    return np.array([index[lv] for lv in labels]), levels


def stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


@dataclass
class RegressionFitReport:
    estimation: str
    names: list[str]
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    covariance: np.ndarray
    df: float
    n_rows: int
    variance_components: dict[str, float]
    criterion: float | None = None
    log_likelihood: float | None = None
    converged: bool = True
    iterations: int = 0
    boundary: dict[str, bool] = field(default_factory=dict)
    gradient_norm: float | None = None
    cluster_key: str | None = None
    n_clusters: int | None = None
    spec: ModelSpec | None = None

    @property
    def t_values(self) -> dict[str, float]:
        out = {}
        for k in self.names:
            b, se = self.coefficients[k], self.std_errors[k]
            out[k] = b / se if se > 0 else (math.copysign(math.inf, b) if b else 0.0)
        return out

    @property
    def p_values(self) -> dict[str, float]:
        return {k: float(2 * stats.t.sf(abs(t), self.df)) for k, t in self.t_values.items()}

    def conf_int(self, level: float = 0.95) -> dict[str, tuple[float, float]]:
        q = stats.t.ppf(0.5 + level / 2, self.df)
        return {k: (self.coefficients[k] - q * self.std_errors[k], self.coefficients[k] + q * self.std_errors[k])
                for k in self.names}

    def as_dict(self) -> dict:
        p = self.p_values
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "regression",
            "estimation": self.estimation,
            "spec": self.spec.as_dict() if self.spec else None,
            "n_rows": self.n_rows,
            "df": self.df,
            "terms": [
                {"term": k, "estimate": self.coefficients[k], "std_error": self.std_errors[k],
                 "p_value": p[k], "stars": stars(p[k])}
                for k in self.names
            ],
            "variance_components": self.variance_components,
            "boundary": self.boundary,
            "criterion": self.criterion,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "cluster_key": self.cluster_key,
            "n_clusters": self.n_clusters,
        }


def predict_moderated(report: RegressionFitReport, moderator_value: float,
                      moderator: str | None = None) -> dict[str, float]:
    """Effective baseline slopes beta + delta * moderator_value."""
    mods = set()
    for t in report.names:
        if ":" in t:
            a, b = t.split(":")
            mods.add(b if a in BASELINES else a)
    if moderator is None:
        if len(mods) != 1:
            raise ConfigError(f"specify the moderator; report has {sorted(mods) or 'none'}")
        moderator = next(iter(mods))
    if moderator not in mods:
        raise ConfigError(f"unknown moderator {moderator!r}; report has {sorted(mods)}")
    out = {}
    for b in BASELINES:
        if b not in report.coefficients:
            continue
        delta = report.coefficients.get(f"{b}:{moderator}", report.coefficients.get(f"{moderator}:{b}", 0.0))
        out[b] = report.coefficients[b] + delta * moderator_value
    return out


def format_table(reports: dict[str, RegressionFitReport], labels: dict[str, str] | None = None) -> str:
    """Plain-text table: estimate with stars, SE in parentheses below, one column per fit."""
    labels = labels or {"jabberwocky": "Semantic Baseline", "shuffle": "Syntactic Baseline",
                        "mask": "Lexical Baseline", "(Intercept)": "Constant"}
    cols = list(reports)
    terms: list[str] = []
    for r in reports.values():
        for n in r.names:
            if n not in terms:
                terms.append(n)
    terms = [t for t in terms if t != "(Intercept)"] + (["(Intercept)"] if "(Intercept)" in terms else [])
    width = max([len(labels.get(t, t)) for t in terms] + [20])
    lines = [" " * width + "".join(f"{c:>18}" for c in cols)]
    for t in terms:
        est, se = [], []
        for c in cols:
            r = reports[c]
            if t in r.coefficients:
                est.append(f"{r.coefficients[t]:.3f}{stars(r.p_values[t])}")
                se.append(f"({r.std_errors[t]:.3f})")
            else:
                est.append("")
                se.append("")
        lines.append(f"{labels.get(t, t):<{width}}" + "".join(f"{e:>18}" for e in est))
        lines.append(" " * width + "".join(f"{s:>18}" for s in se))
    lines.append(f"{'Observations':<{width}}" + "".join(f"{reports[c].n_rows:>18}" for c in cols))
    comps = sorted({k for r in reports.values() for k in r.variance_components})
    for k in comps:
        vals = [reports[c].variance_components.get(k) for c in cols]
        lines.append(f"{'var(' + k + ')':<{width}}" + "".join(
            f"{v:>18.4f}" if v is not None else f"{'':>18}" for v in vals))
    lines.append("* p<0.1; ** p<0.05; *** p<0.01")
    return "\n".join(lines)
