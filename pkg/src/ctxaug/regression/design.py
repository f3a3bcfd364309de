"""Regression design: contexts from each predictor, four predictor variants, pair scores."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..clause import ORDERS, ScoreCache, ScoreCacheManifest, _run_cells, pair_texts, _value
from ..contexts.pipeline import ContextTemplate, gen_all_regression_contexts
from ..contexts.profiles import PromptProfile
from ..contexts.variants import (
    PredictorVariant,
    informative_variant,
    jabberwocky_variant,
    mask_variant,
    shuffle_variant,
)
from ..errors import CapabilityError
from ..lm.base import Backend, GenerationParams
from ..records import StringRecord
from ..seeding import derive_seed
from .model import RegressionRow

VARIANT_OF_BASELINE = {"shuffle": "shuffled", "jabberwocky": "jabberwocky", "mask": "masked"}


@dataclass(frozen=True)
class DesignResult:
    rows: list[RegressionRow]
    contexts: list[ContextTemplate]
    variants: dict[str, dict[str, PredictorVariant]]
    evaluations: int
    new_evaluations: int


def pair_id(predictor: StringRecord, outcome: StringRecord) -> str:
    return f"{predictor.id}->{outcome.id}"


def build_variants(predictor: StringRecord, backend: Backend, profile: PromptProfile, seed: int,
                   baselines, jabberwocky_mode: str = "rule") -> dict[str, PredictorVariant]:
    out = {"informative": informative_variant(predictor.text, predictor.id)}
    if "shuffle" in baselines:
        out["shuffled"] = shuffle_variant(predictor.text, derive_seed(seed, "shuffle", predictor.id), predictor.id)
    if "jabberwocky" in baselines:
        jseed = derive_seed(seed, "jabberwocky", predictor.id)
        if jabberwocky_mode == "llm":
            out["jabberwocky"] = jabberwocky_variant(
                predictor.text, "llm", jseed, profile.params("jabberwocky_generation", jseed),
                backend, profile.jabberwocky(predictor.text), predictor.id,
            )
        else:
            out["jabberwocky"] = jabberwocky_variant(predictor.text, "rule", jseed, source_string_id=predictor.id)
    if "mask" in baselines:
        out["masked"] = mask_variant(predictor.text, backend.capabilities().mask_token, predictor.id)
    return out


def build_design(
    pairs: list[tuple[StringRecord, StringRecord]],
    J: int,
    backend: Backend,
    profile: PromptProfile,
    params: GenerationParams | None = None,
    baselines=("shuffle", "jabberwocky", "mask"),
    jabberwocky_mode: str = "rule",
    seed: int = 0,
    workers: int = 1,
    cache_dir: str | Path | None = None,
    resume: bool = False,
    contexts: list[ContextTemplate] | None = None,
    scoring: str = "sum",
) -> DesignResult:
    """One row per (pair, context) with the response and baseline scores.

    Every score is the max over the two concatenation orders, on the same
    context for all variants. Requesting the mask baseline on a backend
    without a mask token fails before any backend call.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    caps = backend.capabilities()
    if "mask" in baselines and not caps.supports_mask:
        raise CapabilityError(f"backend {caps.model_identifier!r} has no mask token; drop the mask baseline")
    unknown = set(baselines) - set(VARIANT_OF_BASELINE)
    if unknown:
        raise ValueError(f"unknown baselines {sorted(unknown)}")
    if not {"shuffle", "jabberwocky"} <= set(baselines):
        raise ValueError("the shuffle and jabberwocky baselines are required")
    ids = [pair_id(x, y) for x, y in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate (predictor, outcome) pairs")

    params = params or profile.params("regression_generation", seed)
    predictors: dict[str, StringRecord] = {}
    for x, _ in pairs:
        if predictors.setdefault(x.id, x).text != x.text:
            raise ValueError(f"predictor id {x.id!r} used with different texts")
    if contexts is None:
        contexts = gen_all_regression_contexts(list(predictors.values()), J, profile, params, backend,
                                               workers=workers)
    by_source: dict[str, list[ContextTemplate]] = {}
    for t in contexts:
        by_source.setdefault(t.source_string_id, []).append(t)
    variants = {pid: build_variants(x, backend, profile, seed, baselines, jabberwocky_mode)
                for pid, x in predictors.items()}

    kinds = ["informative"] + [VARIANT_OF_BASELINE[b] for b in ("shuffle", "jabberwocky", "mask") if b in baselines]
    outcomes = {y.id: y for _, y in pairs}
    ctx_by_id = {t.id: t for t in contexts}
    keys = []
    for x, y in pairs:
        for t in by_source.get(x.id, [])[:J]:
            for kind in kinds:
                for order in ORDERS:
                    keys.append((y.id, t.id, kind, order, x.id))

    def compute(key):
        yid, cid, kind, order, xid = key
        text, span = pair_texts(outcomes[yid].text, variants[xid][kind].text, ctx_by_id[cid],
                                profile.eval_prompt)[order]
        return _value(backend.score(text, span), scoring)

    cache = None
    if cache_dir is not None:
        manifest = ScoreCacheManifest(
            model_identifier=caps.model_identifier, profile_hash=profile.digest(), scoring=scoring,
            seeds={"seed": seed, "generation_seed": params.seed, "jabberwocky_mode": jabberwocky_mode},
            total_cells=len(keys),
        )
        cache = ScoreCache(cache_dir, manifest, resume=resume)
    # cache keys drop the predictor id: a context id already names its predictor
    cache_view = _KeyView(cache) if cache is not None else None
    try:
        values, n_new = _run_cells(keys, compute, cache_view, workers)
    finally:
        if cache is not None:
            done = sum(1 for k in keys if cache.get(k[:4]) is not None)
            cache.finish(ScoreCacheManifest(**{**cache.manifest.as_dict(), "completed_cells": done}))
            cache.close()

    rows = []
    for x, y in pairs:
        for t in by_source.get(x.id, [])[:J]:
            best = {k: max(values[(y.id, t.id, k, o, x.id)] for o in ORDERS) for k in kinds}
            groupings = {**x.groupings, **y.groupings, "observation": pair_id(x, y)}
            rows.append(RegressionRow(
                observation_id=pair_id(x, y),
                context_id=t.id,
                response=best["informative"],
                shuffle_score=best["shuffled"],
                jabberwocky_score=best["jabberwocky"],
                mask_score=best.get("masked"),
                covariates=tuple(y.covariates or x.covariates),
                moderators={**x.moderators, **y.moderators},
                groupings=groupings,
            ))
    return DesignResult(rows, contexts, variants, len(keys), n_new)


class _KeyView:
    """Adapts 5-field design keys to the 4-field cache keys."""

    def __init__(self, cache: ScoreCache):
        self.cache = cache

    def get(self, key):
        return self.cache.get(key[:4])

    def put_many(self, items):
        self.cache.put_many([(k[:4], v) for k, v in items])
