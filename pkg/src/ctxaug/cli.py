"""Command-line entry point: staged pipeline verbs over a shared config.

Verbs: gen-contexts, score, two-sample, regress, simulate, compact, run.
Intermediate artifacts live under the cache directory (default
``<output_dir>/cache``) and are keyed by a hash of the settings that
determine them; reports go to the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import sim
from .clause import MANIFEST, ScoreCacheManifest, build_matrix, compact, load_matrix
from .contexts.pipeline import gen_all_regression_contexts, gen_two_sample_contexts
from .contexts.profiles import get_profile
from .errors import (
    CapabilityError,
    ConfigError,
    CtxAugError,
    ManifestMismatchError,
    PartialOutputError,
    PhaseError,
)
from .io import RunConfig, ingest_pairs, ingest_strings, read_contexts, write_contexts, write_report
from .lm.base import Backend
from .lm.mock import MockLM, MockLmConfig
from .lm.remote import RemoteBackend, RemoteConfig
from .regression.design import build_design
from .regression.lmm import fit
from .regression.model import ModelSpec, format_table
from .seeding import derive_seed
from .two_sample import loo_context, loo_string, naive_t, repeated_crossfit, variance_decomposition

log = logging.getLogger("ctxaug")

EXIT_CONFIG = 2
EXIT_PHASE = 3


def make_backend(spec: dict) -> Backend:
    spec = dict(spec)
    kind = spec.pop("kind", "mock")
    if kind == "mock":
        try:
            return MockLM(MockLmConfig(**spec))
        except TypeError as exc:
            raise ConfigError(f"bad mock backend settings: {exc}") from None
    return RemoteBackend(RemoteConfig.from_mapping(spec))


class _Phase:
    """Re-raise library errors tagged with the pipeline phase."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (CtxAugError, ValueError)) and not isinstance(exc, PhaseError):
            raise PhaseError(self.name, exc) from exc
        return False


class Workspace:
    def __init__(self, cfg: RunConfig, workers: int, resume: bool):
        self.cfg = cfg
        self.workers = workers
        self.resume = resume
        self.out = cfg.path(cfg["output_dir"])
        self.cache = cfg.path(cfg["cache_dir"]) if cfg["cache_dir"] else self.out / "cache"
        self.profile = get_profile(cfg["profile"], cfg.path(cfg["profile_file"]))
        self._backend = None

    @property
    def backend(self) -> Backend:
        if self._backend is None:
            self._backend = make_backend(self.cfg["backend"])
        return self._backend

    @property
    def J(self) -> int:
        return int(self.cfg["budgets"]["J"])

    def input_path(self, key: str) -> Path:
        p = self.cfg["inputs"].get(key)
        if p is None:
            raise ConfigError(f"no input {key!r} configured (set inputs.{key} or pass --{key})")
        return self.cfg.path(p)

    # contexts ---------------------------------------------------------------------

    def _contexts(self, name: str, generate) -> list:
        """Load cached contexts for this scoring hash or generate (and cache) them."""
        path = self.cache / f"{name}.jsonl"
        partial = self.cache / f"{name}.partial.jsonl"
        key = self.cfg.scoring_hash()
        if path.exists():
            header = json.loads(path.read_text().split("\n", 1)[0])
            if header.get("scoring_hash") != key:
                raise ManifestMismatchError(
                    f"{path} was generated under settings {header.get('scoring_hash')}, this run uses {key}"
                )
            return read_contexts(path)
        completed = None
        if partial.exists():
            if not self.resume:
                raise ConfigError(f"{partial} holds an interrupted generation; pass --resume")
            header = json.loads(partial.read_text().split("\n", 1)[0])
            if header.get("scoring_hash") != key:
                raise ManifestMismatchError(f"{partial} belongs to settings {header.get('scoring_hash')}")
            completed = read_contexts(partial)
        self.cache.mkdir(parents=True, exist_ok=True)
        try:
            with _Phase("generation"):
                templates = generate(completed)
        except PhaseError as exc:
            if isinstance(exc.cause, PartialOutputError):
                _write_contexts(partial, exc.cause.completed, key)
            raise
        _write_contexts(path, templates, key)
        partial.unlink(missing_ok=True)
        return templates

    def two_sample_contexts(self, strings) -> list:
        params = self.profile.params("generation", derive_seed(self.cfg["seed"], "generation"))
        return self._contexts("contexts", lambda done: gen_two_sample_contexts(
            strings, self.J, self.profile, params, self.backend, done, self.workers))

    def regression_contexts(self, predictors) -> list:
        params = self.profile.params("regression_generation", derive_seed(self.cfg["seed"], "generation"))
        return self._contexts("regression_contexts", lambda done: gen_all_regression_contexts(
            predictors, self.J, self.profile, params, self.backend, done, self.workers))

    # scoring ------------------------------------------------------------------------

    def score_seeds(self) -> dict:
        return {"seed": self.cfg["seed"], "settings": self.cfg.scoring_hash()}

    def matrix(self, strings, templates):
        d = self.cache / "scores"
        if (d / MANIFEST).exists():
            cached = ScoreCacheManifest.from_dict(json.loads((d / MANIFEST).read_text()))
            if cached.seeds != self.score_seeds():
                raise ManifestMismatchError(
                    f"score cache {d} belongs to settings {cached.seeds.get('settings')}, "
                    f"this run uses {self.cfg.scoring_hash()}"
                )
            if cached.completed_cells == cached.total_cells and cached.total_cells > 0:
                return load_matrix(d)
        with _Phase("scoring"):
            return build_matrix(strings, templates, self.backend, resume=self.resume, cache_dir=d,
                                workers=self.workers, scoring=self.cfg["scoring"],
                                profile_hash=self.profile.digest(), seeds=self.score_seeds())


def _write_contexts(path: Path, templates, key: str) -> None:
    header = json.dumps({"kind": "contexts", "scoring_hash": key}, sort_keys=True)
    tmp = path.with_suffix(".tmp")
    write_contexts(tmp, templates)
    tmp.write_text(header + "\n" + tmp.read_text())
    tmp.replace(path)


# verbs ----------------------------------------------------------------------------------

def cmd_gen_contexts(ws: Workspace) -> list[Path]:
    if ws.cfg["task"] == "regress":
        pairs = ingest_pairs(ws.input_path("pairs"))
        ws.regression_contexts(_predictors(pairs))
        return [ws.cache / "regression_contexts.jsonl"]
    ws.two_sample_contexts(ingest_strings(ws.input_path("strings")))
    return [ws.cache / "contexts.jsonl"]


def cmd_score(ws: Workspace) -> list[Path]:
    strings = ingest_strings(ws.input_path("strings"))
    m = ws.matrix(strings, ws.two_sample_contexts(strings))
    path = ws.out / "score_summary.json"
    write_report(path, {"kind": "score_summary", "rows": m.shape[0], "cols": m.shape[1],
                        "evaluation_count": m.evaluation_count,
                        "model_identifier": m.manifest.model_identifier}, ws.cfg)
    log.info("scored %d cells (%d new)", m.evaluation_count, m.new_evaluations)
    return [path]


def cmd_two_sample(ws: Workspace) -> list[Path]:
    cfg = ws.cfg
    strings = ingest_strings(ws.input_path("strings"))
    m = ws.matrix(strings, ws.two_sample_contexts(strings))
    written = []
    with _Phase("estimation"):
        rep = repeated_crossfit(m, int(cfg["budgets"]["R"]), derive_seed(cfg["seed"], "crossfit"),
                                cfg["reference"], cfg["aggregation"], None, int(cfg["variance_splits"]))
        naive = naive_t(m, cfg["aggregation"], rep.groups)
        within, between = variance_decomposition(m)
        body = rep.as_dict()
        body.update(
            evaluation_count=m.evaluation_count,
            naive={"t": naive.t, "df": naive.df, "p_value": naive.p_value, "theta_hat": naive.theta_hat},
            variance_decomposition={"within": within, "between": between},
        )
        path = ws.out / "crossfit_report.json"
        write_report(path, body, cfg)
        written.append(path)
        loo = cfg["loo"]
        if loo in ("context", "both"):
            path = ws.out / "loo_context.json"
            write_report(path, loo_context(m, rep).as_dict(), cfg)
            written.append(path)
        if loo in ("string", "both"):
            path = ws.out / "loo_string.json"
            write_report(path, loo_string(m, rep).as_dict(), cfg)
            written.append(path)
    return written


def _predictors(pairs):
    seen = {}
    for x, _ in pairs:
        seen.setdefault(x.id, x)
    return list(seen.values())


def cmd_regress(ws: Workspace) -> list[Path]:
    cfg = ws.cfg
    rc = cfg["regression"]
    baselines = tuple(rc["baselines"])
    try:
        spec = ModelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in rc["model"].items()})
    except TypeError as exc:
        raise ConfigError(f"bad regression.model settings: {exc}") from None
    pairs = ingest_pairs(ws.input_path("pairs"))
    caps = ws.backend.capabilities()
    if "mask" in baselines and not caps.supports_mask:
        raise PhaseError("scoring", CapabilityError(
            f"backend {caps.model_identifier!r} has no mask token; drop the mask baseline"))
    contexts = ws.regression_contexts(_predictors(pairs))
    with _Phase("scoring"):
        design = build_design(
            pairs, ws.J, ws.backend, ws.profile, baselines=baselines,
            jabberwocky_mode=rc.get("jabberwocky_mode", "rule"), seed=cfg["seed"], workers=ws.workers,
            cache_dir=ws.cache / "regression_scores", resume=ws.resume, contexts=contexts,
            scoring=cfg["scoring"],
        )
    with _Phase("estimation"):
        report = fit(design.rows, spec, seed=cfg["seed"])
    body = report.as_dict()
    body["evaluation_count"] = design.evaluations
    body["variants"] = {pid: {k: {"text": v.text, "fallback": v.fallback} for k, v in vs.items()}
                        for pid, vs in sorted(design.variants.items())}
    rpath, tpath, dpath = ws.out / "regression_report.json", ws.out / "regression_table.txt", ws.out / "rows.jsonl"
    write_report(rpath, body, cfg)
    head = f"# config_hash {cfg.config_hash()}\n"
    tpath.write_text(head + format_table({"model": report}) + "\n")
    dpath.write_text(json.dumps({"config_hash": cfg.config_hash()}, sort_keys=True) + "\n" + "".join(
        json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in design.rows))
    return [rpath, tpath, dpath]


SIM_FIELDS = {f for f in sim.SimConfig.__dataclass_fields__}
STUDIES = ("null", "power", "self_reference", "budget", "recovery")


def sim_config(cfg: RunConfig) -> tuple[sim.SimConfig, dict]:
    sc = dict(cfg["simulate"])
    extra = {k: sc.pop(k) for k in list(sc) if k not in SIM_FIELDS}
    runs = extra.pop("runs", None)
    if runs is not None and "seeds" not in sc:
        sc["seeds"] = range(int(runs))
    if "seeds" in sc and isinstance(sc["seeds"], int):
        sc["seeds"] = range(sc["seeds"])
    sc.setdefault("R", int(cfg["budgets"]["R"]) if "R" in cfg["budgets"] else 10)
    sc.setdefault("reference", cfg["reference"])
    sc.setdefault("aggregation", cfg["aggregation"])
    sc.setdefault("profile", cfg["profile"])
    sc.setdefault("J", int(cfg["budgets"]["J"]))
    try:
        base = sim.SimConfig(**sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad simulate settings: {exc}") from None
    # seeds are offset by the root seed so --seed changes the replication set
    root = int(cfg["seed"])
    if root:
        base = base.replace(seeds=tuple(derive_seed(root, "sim", s) % (2**31) for s in base.seeds))
    return base, extra


def cmd_simulate(ws: Workspace) -> list[Path]:
    cfg = ws.cfg
    base, extra = sim_config(cfg)
    study = extra.get("study", "null")
    studies = STUDIES if study == "all" else (study,)
    unknown = set(studies) - set(STUDIES)
    if unknown:
        raise ConfigError(f"unknown study {sorted(unknown)}; expected one of {STUDIES} or 'all'")
    meta = {"config_hash": cfg.config_hash(), "sim": base.as_dict()}
    written = []
    ws.out.mkdir(parents=True, exist_ok=True)
    for st in studies:
        with _Phase("estimation"):
            if st == "null":
                res = sim.null_calibration(base, ws.workers)
                body = {"ks_distance": res.ks_distance, "fpr_05": res.fpr(0.05), "runs": res.runs,
                        "p_values": res.p_values, "mean_t": res.mean_t}
                sim.write_plot_data(ws.out / "null_qq.tsv", sim.qq_points(res.p_values), meta)
                written.append(ws.out / "null_qq.tsv")
            elif st == "power":
                pairs = extra.get("pairs") or [[base.categories[i], base.categories[j]]
                                               for i in range(len(base.categories))
                                               for j in range(i + 1, len(base.categories))]
                res = sim.power_study(base, [tuple(p) for p in pairs], ws.workers)
                body = {"pairs": [{"a": a, "b": b, "power": r.power, "mean_abs_t": r.mean_abs_t,
                                   "t_values": r.t_values} for (a, b), r in res.items()]}
                sim.write_plot_data(ws.out / "power_violin.tsv", sim.violin_points(res), meta)
                written.append(ws.out / "power_violin.tsv")
            elif st == "self_reference":
                res = sim.self_reference_demo(base, workers=ws.workers)
                body = {"naive_abs_t": res.naive_abs_t, "crossfit_abs_t": res.crossfit_abs_t,
                        "fpr_naive": res.fpr_naive, "fpr_crossfit": res.fpr_crossfit, "runs": res.runs}
            elif st == "budget":
                b = dict(extra.get("budget") or {})
                table = sim.budget_sweep(base, workers=ws.workers, **b)
                body = {"slope": table.slope, "intercept": table.intercept, "target": table.target,
                        "reference_mode": table.reference_mode,
                        "cells": [{"n_c": c.n_c, "M": c.M, "mean_abs_bias": c.mean_abs_bias,
                                   "se_abs_bias": c.se_abs_bias, "median_abs_bias": c.median_abs_bias,
                                   "mean_t": c.mean_t} for c in table.cells]}
                sim.write_plot_data(ws.out / "budget_bias.tsv", sim.budget_points(table), meta)
                written.append(ws.out / "budget_bias.tsv")
            else:
                r = dict(extra.get("recovery") or {})
                n = int(r.pop("replications", 100))
                res = sim.regression_recovery(range(n), **r)
                body = {"coverage": res.coverage, "significant": res.significant,
                        "replications": res.replications}
        body = {"kind": f"simulation/{st}", "config": base.as_dict(), **body}
        path = ws.out / f"sim_{st}.json"
        write_report(path, body, cfg)
        written.append(path)
    return written


VERBS = {
    "gen-contexts": cmd_gen_contexts,
    "score": cmd_score,
    "two-sample": cmd_two_sample,
    "regress": cmd_regress,
    "simulate": cmd_simulate,
}
TASK_OF_VERB = {"two-sample": "two-sample", "regress": "regress", "simulate": "simulate"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxaug", description="Context-augmented inference on text.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--output-dir")
        p.add_argument("--cache-dir")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--resume", action="store_true", help="continue an interrupted run")
        p.add_argument("--seed", type=int)
        p.add_argument("--budget", type=int, metavar="J", help="contexts per string")
        p.add_argument("--reps", type=int, metavar="R", help="cross-fit repetitions (default 25)")
        p.add_argument("--agg", help="mean, median, or trimmed:ALPHA")
        p.add_argument("--reference", choices=("adjusted", "normal", "student"))
        p.add_argument("--profile")
        p.add_argument("--strings", help="JSON-lines string records")
        p.add_argument("--pairs", help="JSON-lines predictor/outcome records")
        p.add_argument("-v", "--verbose", action="store_true")

    for name, help_ in [
        ("gen-contexts", "generate and cache contexts"),
        ("score", "score every string in every context"),
        ("two-sample", "repeated cross-fit two-sample test"),
        ("regress", "text-on-text regression with negative-control baselines"),
        ("simulate", "simulation studies on the mock LM"),
        ("run", "run the task named in the config"),
    ]:
        p = sub.add_parser(name, help=help_)
        common(p)
        if name in ("two-sample", "run"):
            p.add_argument("--loo", choices=("context", "string", "both"))
        if name in ("simulate", "run"):
            p.add_argument("--study", choices=STUDIES + ("all",))
            p.add_argument("--runs", type=int, help="number of seeded replications")
    p = sub.add_parser("compact", help="rewrite a score cache log densely")
    p.add_argument("cache_dir")
    return parser


def overrides_from(args) -> dict:
    ov: dict = {}
    for attr, key in [("output_dir", "output_dir"), ("cache_dir", "cache_dir"), ("seed", "seed"),
                      ("agg", "aggregation"), ("reference", "reference"), ("profile", "profile"),
                      ("loo", "loo")]:
        v = getattr(args, attr, None)
        if v is not None:
            ov[key] = str(Path(v).resolve()) if key.endswith("_dir") else v
    budgets = {k: v for k, v in (("J", args.budget), ("R", args.reps)) if v is not None}
    if budgets:
        ov["budgets"] = budgets
    inputs = {k: getattr(args, k) for k in ("strings", "pairs") if getattr(args, k, None) is not None}
    if inputs:
        ov["inputs"] = {k: str(Path(v).resolve()) for k, v in inputs.items()}
    simulate = {k: getattr(args, k) for k in ("study", "runs") if getattr(args, k, None) is not None}
    if simulate:
        ov["simulate"] = simulate
    if args.verb in TASK_OF_VERB:
        ov["task"] = TASK_OF_VERB[args.verb]
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.verb == "compact":
        try:
            n = compact(args.cache_dir)
        except (CtxAugError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{n} cells")
        return 0
    try:
        cfg = RunConfig.load(args.config, overrides_from(args))
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        ws = Workspace(cfg, args.workers, args.resume)
        verb = args.verb if args.verb != "run" else cfg["task"]
        written = VERBS[verb](ws)
    except PhaseError as exc:
        print(f"error [{exc.phase}]: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return EXIT_PHASE
    except (CtxAugError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
