"""Two-sample test by repeated cross-fitting.

Each string i gets D_i = agg(log-probs over group-A contexts) minus
agg(log-probs over group-B contexts), using only contexts sourced from the
other fold. A Welch t compares D over A-strings with D over B-strings in each
direction; the cross-fit statistic is sqrt(2) * (t12 + t21) / 2, averaged over
R random fold assignments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .clause import Aggregation, ScoreMatrix
from .errors import CtxAugError, DegenerateStatisticError, EmptyAggregationError, SizingError
from .records import StringRecord
from .seeding import derive_seed

REFERENCES = ("adjusted", "normal", "student")
LOO_EPSILON = 1e-3
SCHEMA_VERSION = 1


# folds -------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    repetition: int
    seed: int
    folds: dict[str, int]

    def members(self, fold: int) -> list[str]:
        return [s for s, f in self.folds.items() if f == fold]


def _group_members(strings) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for s in strings:
        sid, g = (s.id, s.group) if isinstance(s, StringRecord) else s
        if g is None:
            raise SizingError(f"string {sid!r} has no group label")
        groups.setdefault(g, []).append(sid)
    return groups


def split_folds(strings, seed: int, repetition: int) -> FoldAssignment:
    """Stratified two-fold split; ``floor(n_g / 2)`` strings of each group go to fold 1.

    ``strings`` holds StringRecords or (id, group) pairs. Each group's
    permutation is seeded by (seed, repetition, the group's sorted member ids),
    so renaming group labels does not change the folds.
    """
    folds: dict[str, int] = {}
    for g, ids in sorted(_group_members(strings).items(), key=lambda kv: str(kv[0])):
        if len(ids) < 4:
            raise SizingError(f"group {g!r} has {len(ids)} strings; at least 4 are needed")
        ids = sorted(ids)
        rng = np.random.default_rng(derive_seed(seed, "folds", repetition, "\x1e".join(ids)))
        perm = rng.permutation(len(ids))
        half = len(ids) // 2
        for k, idx in enumerate(perm):
            folds[ids[idx]] = 1 if k < half else 2
    return FoldAssignment(repetition, derive_seed(seed, "folds", repetition), folds)


# statistics ----------------------------------------------------------------------

def welch(a, b) -> tuple[float, float]:
    """Welch t of mean(a) - mean(b) and its Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise SizingError(f"Welch t needs at least 2 values per group, got {len(a)} and {len(b)}")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    se2 = va + vb
    if not se2 > 0:
        raise DegenerateStatisticError("zero variance in both groups")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    den = (va * va / (len(a) - 1) if va > 0 else 0.0) + (vb * vb / (len(b) - 1) if vb > 0 else 0.0)
    df = se2 * se2 / den
    return float(t), float(df)


def welch_t(a, b) -> float:
    return welch(a, b)[0]


class _Design:
    """Index arrays for a matrix with two string groups, built once per matrix."""

    def __init__(self, matrix: ScoreMatrix, groups=None, agg="mean"):
        self.m = matrix
        self.agg = Aggregation.parse(agg)
        src = matrix.col_source_index
        if np.any(src < 0):
            bad = matrix.col_sources[int(np.argmax(src < 0))]
            raise SizingError(f"context source {bad!r} is not a row of the matrix")
        # a string's group is the label of the contexts it sourced
        row_group: list = [None] * matrix.shape[0]
        for j, i in enumerate(src):
            g = matrix.col_groups[j]
            if row_group[i] is not None and row_group[i] != g:
                raise SizingError(f"string {matrix.row_ids[i]!r} sourced contexts with different labels")
            row_group[i] = g
        for i, g in enumerate(row_group):
            if g is None:
                raise SizingError(f"string {matrix.row_ids[i]!r} sourced no labelled contexts")
        labels = sorted(set(row_group), key=str)
        if groups is None:
            if len(labels) != 2:
                raise SizingError(f"need exactly two groups, found {labels}")
            groups = tuple(labels)
        elif set(groups) != set(labels) or len(groups) != 2:
            raise SizingError(f"groups {groups} do not match matrix labels {labels}")
        self.groups = tuple(groups)
        self.row_group = row_group
        self.row_is_a = np.array([g == groups[0] for g in row_group])
        self.col_is_a = np.array([g == groups[0] for g in matrix.col_groups])
        self.pairs = [(rid, g) for rid, g in zip(matrix.row_ids, row_group)]

    def fold_vector(self, fa: FoldAssignment) -> np.ndarray:
        return np.array([fa.folds[r] for r in self.m.row_ids])

    def diffs(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """D for the given rows using only the given columns."""
        a_cols = cols[self.col_is_a[cols]]
        b_cols = cols[~self.col_is_a[cols]]
        if len(a_cols) == 0 or len(b_cols) == 0:
            which = self.groups[0] if len(a_cols) == 0 else self.groups[1]
            raise EmptyAggregationError(f"no {which!r} contexts left after applying the fold mask")
        v = self.m.values
        return self.agg(v[np.ix_(rows, a_cols)], axis=1) - self.agg(v[np.ix_(rows, b_cols)], axis=1)

    def direction(self, fold_of_row: np.ndarray, eval_fold: int, ctx_fold: int):
        """(t, df, theta) evaluating ``eval_fold`` strings on ``ctx_fold`` contexts."""
        rows = np.flatnonzero(fold_of_row == eval_fold)
        col_fold = fold_of_row[self.m.col_source_index]
        cols = np.flatnonzero(col_fold == ctx_fold)
        # no cell may pair a string with a context sourced inside its own fold
        if np.isin(self.m.col_source_index[cols], rows).any():
            raise AssertionError("self-referential cell in cross-fit direction")
        d = self.diffs(rows, cols)
        is_a = self.row_is_a[rows]
        t, df = welch(d[is_a], d[~is_a])
        return t, df, float(d[is_a].mean() - d[~is_a].mean())


def string_diff(matrix: ScoreMatrix, string_id: str, ctx_fold, agg="mean", groups=None) -> float:
    """D_i for one string using contexts sourced by the string ids in ``ctx_fold``."""
    des = _Design(matrix, groups, agg)
    ctx = set(ctx_fold)
    if string_id in ctx:
        raise ValueError(f"string {string_id!r} belongs to the context fold")
    cols = np.flatnonzero([s in ctx for s in matrix.col_sources])
    return float(des.diffs(np.array([matrix.row(string_id)]), cols)[0])


def direction_t(matrix: ScoreMatrix, eval_fold, ctx_fold, agg="mean", groups=None) -> float:
    """Welch t of D over A-strings versus B-strings in ``eval_fold``."""
    ev, cf = set(eval_fold), set(ctx_fold)
    if ev & cf:
        raise ValueError("evaluation and context folds overlap")
    des = _Design(matrix, groups, agg)
    fold = np.array([1 if r in ev else (2 if r in cf else 0) for r in matrix.row_ids])
    return des.direction(fold, 1, 2)[0]


def crossfit_combine(t12: float, t21: float) -> float:
    return math.sqrt(2.0) * 0.5 * (t12 + t21)


def _split_stats(des: _Design, fa: FoldAssignment):
    fold = des.fold_vector(fa)
    t12, df12, th12 = des.direction(fold, 1, 2)
    t21, df21, th21 = des.direction(fold, 2, 1)
    kappa = 0.5 * (_kappa(df12) + _kappa(df21))
    return crossfit_combine(t12, t21), (t12, t21), kappa, 0.5 * (th12 + th21)


def _kappa(df: float) -> float:
    nu = max(df, 3.0)
    return nu / (nu - 2.0)


def crossfit_t(matrix: ScoreMatrix, fold_assignment: FoldAssignment, agg="mean", groups=None) -> float:
    """sqrt(2) * (t_{1->2} + t_{2->1}) / 2 for one fold assignment."""
    return _split_stats(_Design(matrix, groups, agg), fold_assignment)[0]


# repeated cross-fitting -----------------------------------------------------------

@dataclass
class CrossFitReport:
    per_rep_t: list[float]
    mean_t: float
    p_value: float
    R: int
    per_direction_t: list[tuple[float, float]]
    seeds: list[int]
    seed: int
    reference: str
    reference_scale: float = 1.0
    reference_df: float | None = None
    kappa: float | None = None
    split_variance: float | None = None
    variance_splits: int = 0
    theta_hat: float = float("nan")
    per_rep_theta: list[float] = field(default_factory=list)
    dropped: list[tuple[int, str]] = field(default_factory=list)
    groups: tuple[str, str] = ("A", "B")
    n_strings: dict[str, int] = field(default_factory=dict)
    aggregation: str = "mean"

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "crossfit",
            "mean_t": self.mean_t,
            "p_value": self.p_value,
            "R": self.R,
            "R_used": len(self.per_rep_t),
            "per_rep_t": self.per_rep_t,
            "per_direction_t": [list(x) for x in self.per_direction_t],
            "seed": self.seed,
            "seeds": self.seeds,
            "reference": self.reference,
            "reference_scale": self.reference_scale,
            "reference_df": self.reference_df,
            "kappa": self.kappa,
            "split_variance": self.split_variance,
            "variance_splits": self.variance_splits,
            "theta_hat": self.theta_hat,
            "per_rep_theta": self.per_rep_theta,
            "dropped": [list(x) for x in self.dropped],
            "groups": list(self.groups),
            "n_strings": self.n_strings,
            "aggregation": self.aggregation,
        }


def reference_p(mean_t: float, reference: str, scale: float = 1.0, df: float | None = None) -> float:
    """Two-sided p = 2 * (1 - F(|mean_t|)) with F the configured reference law."""
    z = abs(mean_t)
    if reference == "student":
        if df is None or not df > 0:
            raise ValueError("student reference needs df > 0")
        return float(min(1.0, 2.0 * stats.t.sf(z, df)))
    if reference in ("normal", "adjusted"):
        return float(min(1.0, 2.0 * stats.norm.sf(z / math.sqrt(scale))))
    raise ValueError(f"unknown reference {reference!r}; expected one of {REFERENCES}")


def adjusted_scale(kappa: float, split_variance: float, R: int) -> float:
    """Null variance of the mean of R dependent cross-fit t's.

    ``kappa`` estimates the variance of one cross-fit t and ``split_variance``
    the part of it due to the random split; averaging R splits removes a
    (1 - 1/R) share of the latter. Floored at kappa / R.
    """
    if R < 2:
        return kappa
    return max(kappa - split_variance * (1.0 - 1.0 / R), kappa / R)


def repeated_crossfit(
    matrix: ScoreMatrix,
    R: int = 25,
    seed: int = 0,
    reference: str = "adjusted",
    agg="mean",
    groups=None,
    variance_splits: int = 200,
    student_df: float | None = None,
) -> CrossFitReport:
    """Average R cross-fit t's over independent fold assignments.

    ``reference`` selects the law F used for the p-value:

    * ``adjusted`` (default): N(0, v), with v estimated from the Welch degrees
      of freedom and the spread of the cross-fit t over ``variance_splits``
      random splits (the R reported ones plus auxiliary ones).
    * ``normal``: the standard normal.
    * ``student``: Student t with ``student_df`` (default n - 2).
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    if reference not in REFERENCES:
        raise ValueError(f"unknown reference {reference!r}; expected one of {REFERENCES}")
    des = _Design(matrix, groups, agg)
    n_total = len(des.pairs)
    n_splits = max(R, variance_splits) if reference == "adjusted" else R

    per_t, per_dir, per_theta, seeds, dropped = [], [], [], [], []
    all_t, all_kappa = [], []
    for r in range(n_splits):
        fa = split_folds(des.pairs, seed, r)
        try:
            t, dirs, kappa, theta = _split_stats(des, fa)
        except (DegenerateStatisticError, EmptyAggregationError) as exc:
            if r < R:
                dropped.append((r, str(exc)))
            continue
        all_t.append(t)
        all_kappa.append(kappa)
        if r < R:
            per_t.append(t)
            per_dir.append(dirs)
            per_theta.append(theta)
            seeds.append(fa.seed)
    if not per_t:
        raise DegenerateStatisticError(f"all {R} cross-fit repetitions were degenerate")

    mean_t = float(np.mean(per_t))
    scale, df, kappa_bar, s2 = 1.0, None, None, None
    if reference == "adjusted":
        kappa_bar = float(np.mean(all_kappa))
        s2 = float(np.var(all_t, ddof=1)) if len(all_t) > 1 else 0.0
        scale = adjusted_scale(kappa_bar, s2, len(per_t))
    elif reference == "student":
        df = float(student_df) if student_df is not None else float(n_total - 2)
    p = reference_p(mean_t, reference, scale, df)
    counts = {g: sum(1 for _, gg in des.pairs if gg == g) for g in des.groups}
    return CrossFitReport(
        per_rep_t=per_t, mean_t=mean_t, p_value=p, R=R, per_direction_t=per_dir, seeds=seeds,
        seed=seed, reference=reference, reference_scale=scale, reference_df=df, kappa=kappa_bar,
        split_variance=s2, variance_splits=len(all_t) if reference == "adjusted" else 0,
        theta_hat=float(np.mean(per_theta)), per_rep_theta=per_theta, dropped=dropped,
        groups=des.groups, n_strings=counts, aggregation=str(des.agg),
    )


def mean_crossfit_t(matrix: ScoreMatrix, R: int, seed: int, agg="mean", groups=None) -> float:
    """Mean cross-fit t over R splits, without p-value machinery."""
    return repeated_crossfit(matrix, R, seed, "normal", agg, groups).mean_t


# naive full-sample statistic --------------------------------------------------------

@dataclass(frozen=True)
class NaiveReport:
    t: float
    df: float
    p_value: float
    theta_hat: float


def naive_t(matrix: ScoreMatrix, agg="mean", groups=None) -> NaiveReport:
    """Single Welch t with every string scored against all contexts, its own included."""
    des = _Design(matrix, groups, agg)
    rows = np.arange(matrix.shape[0])
    d = des.diffs(rows, np.arange(matrix.shape[1]))
    t, df = welch(d[des.row_is_a], d[~des.row_is_a])
    p = float(2.0 * stats.t.sf(abs(t), df))
    return NaiveReport(t, df, p, float(d[des.row_is_a].mean() - d[~des.row_is_a].mean()))


# leave-one-out sensitivity --------------------------------------------------------------

@dataclass
class SensitivityReport:
    unit_kind: str
    unit_ids: list[str]
    delta_t: list[float]
    classification: list[str]
    epsilon: float
    baseline_t: float

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": f"loo_{self.unit_kind}",
            "epsilon": self.epsilon,
            "baseline_t": self.baseline_t,
            "units": [
                {"id": u, "delta_t": d, "classification": c}
                for u, d, c in zip(self.unit_ids, self.delta_t, self.classification)
            ],
        }


STRING_LABELS = {"amplifies": "above average", "unchanged": "at the average", "dampens": "below average"}


def classify_context(delta: float, eps: float = LOO_EPSILON) -> str:
    """A context whose removal lowers t amplifies it."""
    if delta < -eps:
        return "amplifies"
    if delta > eps:
        return "dampens"
    return "unchanged"


def classify_string(delta: float, eps: float = LOO_EPSILON) -> str:
    """Strings use the opposite sign: removal raising t marks an above-average string."""
    if delta > eps:
        return "amplifies"
    if delta < -eps:
        return "dampens"
    return "unchanged"


def _loo_t(matrix, baseline: CrossFitReport) -> float:
    try:
        return mean_crossfit_t(matrix, baseline.R, baseline.seed, baseline.aggregation, baseline.groups)
    except CtxAugError:
        return float("nan")


def loo_context(matrix: ScoreMatrix, baseline_report: CrossFitReport, eps: float = LOO_EPSILON) -> SensitivityReport:
    """Delta t = t without the context minus t with it, for every context."""
    base = mean_crossfit_t(matrix, baseline_report.R, baseline_report.seed,
                           baseline_report.aggregation, baseline_report.groups)
    deltas = []
    for j in range(matrix.shape[1]):
        keep = np.delete(np.arange(matrix.shape[1]), j)
        deltas.append(_loo_t(matrix.subset(cols=keep), baseline_report) - base)
    return SensitivityReport("context", list(matrix.col_ids), deltas,
                             [classify_context(d, eps) for d in deltas], eps, base)


def loo_string(matrix: ScoreMatrix, baseline_report: CrossFitReport, eps: float = LOO_EPSILON) -> SensitivityReport:
    """Delta t after dropping each string together with every context it sourced."""
    base = mean_crossfit_t(matrix, baseline_report.R, baseline_report.seed,
                           baseline_report.aggregation, baseline_report.groups)
    deltas = []
    for i, rid in enumerate(matrix.row_ids):
        rows = np.delete(np.arange(matrix.shape[0]), i)
        cols = np.flatnonzero(matrix.col_source_index != i)
        deltas.append(_loo_t(matrix.subset(rows=rows, cols=cols), baseline_report) - base)
    return SensitivityReport("string", list(matrix.row_ids), deltas,
                             [classify_string(d, eps) for d in deltas], eps, base)


# diagnostics ---------------------------------------------------------------------------

def variance_decomposition(matrix: ScoreMatrix, ddof: int = 0, exclude_self: bool = True) -> tuple[float, float]:
    """(mean within-string variance over contexts, variance of string means).

    Population variances by default; self-pair cells are left out.
    """
    n, m = matrix.shape
    if n < 2:
        raise SizingError(f"need at least 2 strings, got {n}")
    within, means = [], []
    for i in range(n):
        keep = ~matrix.self_mask[i] if exclude_self else np.ones(m, dtype=bool)
        x = matrix.values[i, keep]
        if len(x) < 2:
            raise SizingError(f"string {matrix.row_ids[i]!r} has {len(x)} eligible contexts; need 2")
        within.append(x.var(ddof=ddof))
        means.append(x.mean())
    return float(np.mean(within)), float(np.var(means, ddof=ddof))
