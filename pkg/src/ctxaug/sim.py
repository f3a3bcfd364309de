"""Simulation studies on the mock LM: calibration, power, self-reference, budget scaling,
and coefficient recovery for the regression."""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .clause import ScoreMatrix, build_matrix
from .contexts.pipeline import gen_two_sample_contexts
from .contexts.profiles import get_profile
from .lm.mock import MockLM, MockLmConfig
from .records import StringRecord
from .regression.lmm import fit_lmm
from .regression.model import ModelSpec, RegressionRow
from .regression.ols import fit_ols_cluster
from .seeding import derive_seed, rng_for
from .two_sample import naive_t, repeated_crossfit

DEFAULT_CATEGORIES = ("animals", "body", "cities", "food", "plants")


@dataclass(frozen=True)
class SimConfig:
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    n_per_group: int = 20
    J: int = 4
    R: int = 10
    a: float = 2.0
    b: float = 3.0
    sigma: float = 0.5
    beta_self: float = 0.0
    seeds: tuple[int, ...] = tuple(range(200))
    reference: str = "adjusted"
    variance_splits: int = 200
    aggregation: str = "mean"
    profile: str = "synthetic-categories"

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.categories:
            raise ValueError("at least one category is required")
        for name in ("n_per_group", "J", "R"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.seeds:
            raise ValueError("seed grid is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seed grid entries must be distinct")

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["categories"] = list(self.categories)
        d["seeds"] = list(self.seeds)
        return d


# data generation -------------------------------------------------------------------

_ONSET = "bdfgklmnprstvz"
_VOWEL = "aeiou"


def pseudoword(rng: np.random.Generator, syllables: int = 3) -> str:
    return "".join(_ONSET[rng.integers(len(_ONSET))] + _VOWEL[rng.integers(len(_VOWEL))]
                   for _ in range(syllables))


def make_strings(category: str, n: int, seed: int, group: str, prefix: str) -> list[StringRecord]:
    """n unique strings "<category> <pseudoword> <pseudoword>" labelled ``group``."""
    rng = rng_for(seed, "strings", prefix, category)
    seen: set[str] = set()
    out = []
    while len(out) < n:
        text = f"{category} {pseudoword(rng)} {pseudoword(rng)}"
        if text in seen:
            continue
        seen.add(text)
        out.append(StringRecord(f"{prefix}{len(out):03d}", text, group))
    return out


def mock_for(config: SimConfig, seed: int) -> MockLM:
    return MockLM(MockLmConfig(categories=config.categories, a=config.a, b=config.b, sigma=config.sigma,
                               seed=derive_seed(seed, "mock"), beta_self=config.beta_self))


def simulate_matrix(config: SimConfig, cat_a: str, cat_b: str, seed: int, J: int | None = None) -> ScoreMatrix:
    """Generate strings and contexts on the mock and score the full matrix.

    With ``cat_a == cat_b`` the A/B labels are a random split of one category.
    """
    J = config.J if J is None else J
    n = config.n_per_group
    if cat_a == cat_b:
        pool = make_strings(cat_a, 2 * n, seed, None, "s")
        labels = rng_for(seed, "labels").permutation(["A"] * n + ["B"] * n)
        strings = [dataclasses.replace(s, group=str(g)) for s, g in zip(pool, labels)]
    else:
        strings = make_strings(cat_a, n, seed, "A", "a") + make_strings(cat_b, n, seed, "B", "b")
    backend = mock_for(config, seed)
    profile = get_profile(config.profile)
    templates = gen_two_sample_contexts(strings, J, profile, profile.params(seed=derive_seed(seed, "gen")), backend)
    return build_matrix(strings, templates, backend)


def _one_run(args):
    config, cat_a, cat_b, seed, naive = args
    m = simulate_matrix(config, cat_a, cat_b, seed)
    rep = repeated_crossfit(m, config.R, derive_seed(seed, "crossfit"), config.reference, config.aggregation,
                            ("A", "B"), config.variance_splits)
    out = {"seed": seed, "mean_t": rep.mean_t, "p_value": rep.p_value}
    if naive:
        nv = naive_t(m, config.aggregation, ("A", "B"))
        out.update(naive_t=nv.t, naive_p=nv.p_value)
    return out


def _map(fn, items, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# studies ---------------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    p_values: list[float]
    ks_distance: float
    runs: int
    mean_t: list[float] = field(default_factory=list)

    def fpr(self, alpha: float = 0.05) -> float:
        return float(np.mean(np.asarray(self.p_values) < alpha))


def null_calibration(config: SimConfig, workers: int = 1) -> CalibrationResult:
    """Within-category null: one category, strings split at random into A and B."""
    cat = config.categories[0]
    runs = _map(_one_run, [(config, cat, cat, s, False) for s in config.seeds], workers)
    p = [r["p_value"] for r in runs]
    ks = float(stats.kstest(p, "uniform").statistic)
    return CalibrationResult(p, ks, len(p), [r["mean_t"] for r in runs])


@dataclass
class PowerResult:
    pair: tuple[str, str]
    t_values: list[float]

    @property
    def power(self) -> float:
        """Fraction of runs with |mean t| > 2."""
        return float(np.mean(np.abs(self.t_values) > 2.0))

    @property
    def mean_abs_t(self) -> float:
        return float(np.mean(np.abs(self.t_values)))


def power_study(config: SimConfig, category_pairs, workers: int = 1) -> dict[tuple[str, str], PowerResult]:
    if len(config.categories) < 2:
        raise ValueError("power study needs at least two categories")
    out = {}
    for a, b in category_pairs:
        if a not in config.categories or b not in config.categories:
            raise ValueError(f"unknown category pair {(a, b)}")
        runs = _map(_one_run, [(config, a, b, s, False) for s in config.seeds], workers)
        out[(a, b)] = PowerResult((a, b), [r["mean_t"] for r in runs])
    return out


@dataclass
class SelfReferenceResult:
    naive_abs_t: float
    crossfit_abs_t: float
    fpr_naive: float
    fpr_crossfit: float
    runs: int


def self_reference_demo(config: SimConfig, alpha: float = 0.05, workers: int = 1) -> SelfReferenceResult:
    """Naive full-sample statistic versus cross-fitting under the within-category null."""
    cat = config.categories[0]
    runs = _map(_one_run, [(config, cat, cat, s, True) for s in config.seeds], workers)
    return SelfReferenceResult(
        naive_abs_t=float(np.mean([abs(r["naive_t"]) for r in runs])),
        crossfit_abs_t=float(np.mean([abs(r["mean_t"]) for r in runs])),
        fpr_naive=float(np.mean([r["naive_p"] < alpha for r in runs])),
        fpr_crossfit=float(np.mean([r["p_value"] < alpha for r in runs])),
        runs=len(runs),
    )


# budget sweep -----------------------------------------------------------------------------

@dataclass
class BudgetCell:
    n_c: int
    M: int
    mean_abs_bias: float
    se_abs_bias: float
    median_abs_bias: float
    mean_t: float
    abs_bias: list[float]


@dataclass
class BudgetTable:
    cells: list[BudgetCell]
    slope: float
    intercept: float
    target: str
    reference_mode: str
    reference_nc: int
    reference_M: int

    def cell(self, n_c: int, M: int) -> BudgetCell:
        for c in self.cells:
            if c.n_c == n_c and c.M == M:
                return c
        raise KeyError((n_c, M))


def _column_subset(m: ScoreMatrix, J_full: int, n_c: int) -> ScoreMatrix:
    """Keep the first n_c contexts of every string (contexts are nested across budgets)."""
    keep = [j for j, cid in enumerate(m.col_ids) if int(cid.rsplit("#", 1)[1]) < n_c]
    return m.subset(cols=keep)


def _budget_seed(args):
    config, cat_a, cat_b, seed, nc_grid, M_grid, ref_nc, ref_M, target, mode = args
    full = simulate_matrix(config, cat_a, cat_b, seed, J=max(ref_nc, max(nc_grid)))
    groups = ("A", "B")

    def estimate(m, M, label):
        rep = repeated_crossfit(m, M, derive_seed(seed, *label), "normal", config.aggregation, groups)
        return rep.theta_hat if target == "theta" else rep.mean_t, rep.mean_t

    ref_cache = {}
    if mode == "large_budget":
        ref_val, _ = estimate(_column_subset(full, ref_nc, ref_nc), ref_M, ("reference",))
    out = {}
    for nc in nc_grid:
        sub = _column_subset(full, ref_nc, nc)
        if mode == "same_contexts":
            if nc not in ref_cache:
                ref_cache[nc] = estimate(sub, ref_M, ("reference", nc))[0]
            ref_val = ref_cache[nc]
        for M in M_grid:
            val, t = estimate(sub, M, ("sweep", nc, M))
            out[(nc, M)] = (abs(val - ref_val), t)
    return out


def budget_sweep(config: SimConfig, nc_grid=(1, 2, 4, 8), M_grid=(5, 10, 20), reference_nc: int = 64,
                 reference_M: int = 100, target: str = "theta", reference_mode: str = "large_budget",
                 categories: tuple[str, str] | None = None, workers: int = 1) -> BudgetTable:
    """Absolute deviation of the cross-fit estimate from a high-budget reference.

    ``target="theta"`` tracks the averaged difference-in-means estimate and
    ``target="t"`` the mean cross-fit t. ``reference_mode="large_budget"``
    compares against (reference_nc, reference_M) on the same strings;
    ``"same_contexts"`` keeps each cell's contexts and only raises M.
    A least-squares slope of log mean |bias| on log(n_c * M) summarizes scaling.
    """
    if not nc_grid or not M_grid:
        raise ValueError("grids must be non-empty")
    if target not in ("theta", "t"):
        raise ValueError("target must be 'theta' or 't'")
    if reference_mode not in ("large_budget", "same_contexts"):
        raise ValueError("reference_mode must be 'large_budget' or 'same_contexts'")
    if max(nc_grid) > reference_nc:
        raise ValueError("reference_nc must be at least the largest n_c")
    cat_a, cat_b = categories or (config.categories[0], config.categories[min(1, len(config.categories) - 1)])
    args = [(config, cat_a, cat_b, s, tuple(nc_grid), tuple(M_grid), reference_nc, reference_M, target,
             reference_mode) for s in config.seeds]
    per_seed = _map(_budget_seed, args, workers)
    cells = []
    for nc in nc_grid:
        for M in M_grid:
            bias = np.array([r[(nc, M)][0] for r in per_seed])
            ts = np.array([r[(nc, M)][1] for r in per_seed])
            cells.append(BudgetCell(nc, M, float(bias.mean()), float(bias.std(ddof=1) / math.sqrt(len(bias)))
                                    if len(bias) > 1 else float("nan"),
                                    float(np.median(bias)), float(ts.mean()), bias.tolist()))
    x = np.log([c.n_c * c.M for c in cells])
    y = np.log([c.mean_abs_bias for c in cells])
    slope, intercept = np.polyfit(x, y, 1)
    return BudgetTable(cells, float(slope), float(intercept), target, reference_mode, reference_nc, reference_M)


# regression recovery --------------------------------------------------------------------

TRUE_SLOPES = {"shuffle": 0.4, "jabberwocky": 0.3, "mask": 0.3}


def synthetic_regression_rows(seed: int, n_obs: int = 30, J: int = 10, slopes=None, intercept: float = -1.0,
                              tau: float = 0.5, sigma: float = 0.5) -> list[RegressionRow]:
    """Rows from response = sum(slope * baseline) + u_obs + noise.

    Each baseline has an observation-level part and a context-level part;
    u_obs ~ N(0, tau^2) is the observation random intercept.
    """
    slopes = dict(TRUE_SLOPES if slopes is None else slopes)
    rng = rng_for(seed, "regression-rows")
    rows = []
    for i in range(n_obs):
        level = {k: rng.normal(-5.0, 1.0) for k in slopes}
        u = rng.normal(0.0, tau)
        for j in range(J):
            base = {k: level[k] + rng.normal(0.0, 0.7) for k in slopes}
            y = intercept + sum(slopes[k] * base[k] for k in slopes) + u + rng.normal(0.0, sigma)
            rows.append(RegressionRow(f"o{i:03d}", f"o{i:03d}#{j}", y, base["shuffle"], base["jabberwocky"],
                                      base["mask"], groupings={"observation": f"o{i:03d}"}))
    return rows


@dataclass
class RecoveryResult:
    coverage: dict[str, int]
    significant: dict[str, int]
    replications: int
    estimates: dict[str, list[float]]


def regression_recovery(seeds, slopes=None, spec: ModelSpec | None = None, level: float = 0.95,
                        alpha: float = 0.05, **row_kw) -> RecoveryResult:
    """Confidence-interval coverage and significance counts over seeded replications."""
    slopes = dict(TRUE_SLOPES if slopes is None else slopes)
    spec = spec or ModelSpec(fixed=("shuffle", "jabberwocky", "mask"), random=("observation",))
    cover = {k: 0 for k in slopes}
    sig = {k: 0 for k in slopes}
    est = {k: [] for k in slopes}
    seeds = list(seeds)
    for s in seeds:
        rows = synthetic_regression_rows(s, slopes=slopes, **row_kw)
        rep = fit_lmm(rows, spec, seed=s) if spec.estimation == "reml" else fit_ols_cluster(rows, spec)
        ci = rep.conf_int(level)
        p = rep.p_values
        for k, true in slopes.items():
            lo, hi = ci[k]
            cover[k] += int(lo <= true <= hi)
            sig[k] += int(p[k] < alpha)
            est[k].append(rep.coefficients[k])
    return RecoveryResult(cover, sig, len(seeds), est)


# outputs ---------------------------------------------------------------------------------

def _header(meta: dict) -> str:
    return "# " + json.dumps(meta, sort_keys=True) + "\n"


def write_table(path: str | Path, columns: list[str], rows, meta: dict) -> None:
    """Tab-delimited table with a one-line JSON metadata header."""
    lines = [_header(meta), "\t".join(columns) + "\n"]
    for r in rows:
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in r) + "\n")
    Path(path).write_text("".join(lines))


def write_plot_data(path: str | Path, points, meta: dict) -> None:
    """(x, y, series) triples for a figure."""
    write_table(path, ["x", "y", "series"], points, meta)


def qq_points(p_values) -> list[tuple[float, float, str]]:
    p = np.sort(np.asarray(p_values))
    n = len(p)
    return [(float((k + 1) / (n + 1)), float(v), "null") for k, v in enumerate(p)]


def violin_points(results: dict[tuple[str, str], PowerResult]) -> list[tuple[str, float, str]]:
    return [(f"{a}-{b}", float(t), f"{a}-{b}") for (a, b), r in results.items() for t in r.t_values]


def budget_points(table: BudgetTable) -> list[tuple[int, float, str]]:
    return [(c.n_c * c.M, c.mean_abs_bias, f"n_c={c.n_c}") for c in table.cells]
