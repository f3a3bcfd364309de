"""Clause-function evaluation: the string x context score matrix and its cache.

The cache directory holds ``manifest.json`` and an append-only ``cells.tsv``
log with columns (string_id, context_id, variant, order, logprob). A cache is
only reused when model, prompt profile, generation seeds, and scoring flags
all match the requesting run.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .contexts.pipeline import ContextTemplate
from .contexts.variants import PredictorVariant
from .errors import AlignmentError, ConfigError, EmptyAggregationError, ManifestMismatchError
from .lm.base import Backend
from .records import StringRecord

SCORINGS = ("sum", "mean")
ORDERS = ("PX", "XP")
CELL_FIELDS = ("string_id", "context_id", "variant", "order", "logprob")
MANIFEST = "manifest.json"
CELLS = "cells.tsv"


# aggregation -----------------------------------------------------------------

@dataclass(frozen=True)
class Aggregation:
    method: str = "mean"
    alpha: float = 0.0

    def __post_init__(self):
        if self.method not in ("mean", "median", "trimmed_mean"):
            raise ConfigError(f"unknown aggregation {self.method!r}")
        if self.method == "trimmed_mean" and not 0 <= self.alpha < 0.5:
            raise ConfigError(f"trim fraction must be in [0, 0.5), got {self.alpha}")

    @classmethod
    def parse(cls, spec: "str | Aggregation") -> "Aggregation":
        """Accepts ``mean``, ``median``, ``trimmed:0.1`` or ``trimmed_mean(0.1)``."""
        if isinstance(spec, Aggregation):
            return spec
        spec = spec.strip()
        if spec in ("mean", "median"):
            return cls(spec)
        m = re.fullmatch(r"trimmed(?:_mean)?(?::|\()\s*([0-9.eE+-]+)\s*\)?", spec)
        if m:
            return cls("trimmed_mean", float(m.group(1)))
        raise ConfigError(f"cannot parse aggregation {spec!r}")

    def __str__(self):
        return f"trimmed:{self.alpha!r}" if self.method == "trimmed_mean" else self.method

    def __call__(self, values, axis=-1):
        x = np.asarray(values, dtype=float)
        if self.method == "mean":
            return x.mean(axis=axis)
        if self.method == "median":
            return np.median(x, axis=axis)
        return stats.trim_mean(x, self.alpha, axis=axis)


# matrix ------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreCacheManifest:
    model_identifier: str
    profile_hash: str
    scoring: str = "sum"
    seeds: dict = field(default_factory=dict)
    completed_cells: int = 0
    total_cells: int = 0
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)

    def __post_init__(self):
        if self.scoring not in SCORINGS:
            raise ConfigError(f"scoring must be one of {SCORINGS}, got {self.scoring!r}")

    def key(self) -> dict:
        return {
            "model_identifier": self.model_identifier,
            "profile_hash": self.profile_hash,
            "scoring": self.scoring,
            "seeds": self.seeds,
        }

    def check_compatible(self, other: "ScoreCacheManifest") -> None:
        mine, theirs = self.key(), other.key()
        diff = [k for k in mine if mine[k] != theirs[k]]
        if diff:
            detail = ", ".join(f"{k}: cached {mine[k]!r} vs requested {theirs[k]!r}" for k in diff)
            raise ManifestMismatchError(f"score cache was built under a different run ({detail})")

    def as_dict(self) -> dict:
        return {
            "model_identifier": self.model_identifier,
            "profile_hash": self.profile_hash,
            "scoring": self.scoring,
            "seeds": self.seeds,
            "completed_cells": self.completed_cells,
            "total_cells": self.total_cells,
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreCacheManifest":
        return cls(**d)


@dataclass
class ScoreMatrix:
    """Dense string x context log-probabilities with provenance per column."""

    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    col_groups: tuple[str | None, ...]
    col_sources: tuple[str, ...]
    values: np.ndarray
    manifest: ScoreCacheManifest | None = None
    new_evaluations: int = 0

    def __post_init__(self):
        self.row_ids = tuple(self.row_ids)
        self.col_ids = tuple(self.col_ids)
        self.col_groups = tuple(self.col_groups)
        self.col_sources = tuple(self.col_sources)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.row_ids)} rows x {len(self.col_ids)} cols")
        if not (len(self.col_groups) == len(self.col_sources) == len(self.col_ids)):
            raise ValueError("column metadata lengths differ")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("score matrix contains non-finite cells")
        self._row_index = {r: i for i, r in enumerate(self.row_ids)}
        if len(self._row_index) != len(self.row_ids):
            raise ValueError("duplicate row ids")
        src_idx = np.array([self._row_index.get(s, -1) for s in self.col_sources], dtype=int)
        self.col_source_index = src_idx
        self.self_mask = src_idx[None, :] == np.arange(len(self.row_ids))[:, None]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def evaluation_count(self) -> int:
        """Clause evaluations backing the matrix, self-pairs included."""
        return self.values.size

    def row(self, string_id: str) -> int:
        try:
            return self._row_index[string_id]
        except KeyError:
            raise KeyError(f"unknown string id {string_id!r}") from None

    def self_pairs(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.self_mask))}

    def group_mask(self, group_label) -> np.ndarray:
        return np.array([g == group_label for g in self.col_groups])

    def subset(self, rows=None, cols=None) -> "ScoreMatrix":
        """A new matrix restricted to the given row and column positions."""
        r = np.arange(self.shape[0]) if rows is None else np.asarray(rows, dtype=int)
        c = np.arange(self.shape[1]) if cols is None else np.asarray(cols, dtype=int)
        return ScoreMatrix(
            [self.row_ids[i] for i in r],
            [self.col_ids[j] for j in c],
            [self.col_groups[j] for j in c],
            [self.col_sources[j] for j in c],
            self.values[np.ix_(r, c)],
            self.manifest,
        )

    def with_labels(self, row_groups: dict[str, str]) -> "ScoreMatrix":
        """Relabel column groups from their source strings' labels."""
        return ScoreMatrix(self.row_ids, self.col_ids,
                           [row_groups[s] for s in self.col_sources], self.col_sources,
                           self.values, self.manifest)

    def to_bytes(self) -> bytes:
        """Canonical serialization used for determinism checks."""
        head = json.dumps([self.row_ids, self.col_ids, self.col_groups, self.col_sources]).encode()
        return head + b"\n" + np.ascontiguousarray(self.values, dtype="<f8").tobytes()


def aggregate_str(matrix: ScoreMatrix, string_id: str, group_label, method="mean",
                  mask: np.ndarray | None = None, mask_name: str = "fold mask",
                  exclude_self: bool = True) -> float:
    """Aggregate one string's cells over contexts carrying ``group_label``."""
    agg = Aggregation.parse(method)
    i = matrix.row(string_id)
    eligible = matrix.group_mask(group_label)
    if mask is not None:
        eligible &= np.asarray(mask, dtype=bool)
    if exclude_self:
        eligible &= ~matrix.self_mask[i]
    if not eligible.any():
        name = mask_name if mask is not None else ("self-pair mask" if exclude_self else "group filter")
        raise EmptyAggregationError(
            f"no cells for string {string_id!r} in group {group_label!r} after applying the {name}"
        )
    return float(agg(matrix.values[i, eligible]))


# cache ------------------------------------------------------------------------

class ScoreCache:
    """Manifest plus append-only cell log in one directory.

    Appends are serialized through a lock and flushed per batch, so a killed
    run loses at most the batch in flight.
    """

    def __init__(self, directory: str | Path, manifest: ScoreCacheManifest, resume: bool = False):
        self.dir = Path(directory)
        self.manifest = manifest
        self.cells: dict[tuple[str, str, str, str], float] = {}
        self._lock = threading.Lock()
        self.dir.mkdir(parents=True, exist_ok=True)
        mpath = self.dir / MANIFEST
        cpath = self.dir / CELLS
        if mpath.exists():
            cached = ScoreCacheManifest.from_dict(json.loads(mpath.read_text()))
            cached.check_compatible(manifest)
            if not resume and cpath.exists() and cpath.stat().st_size > 0:
                raise ConfigError(f"score cache {self.dir} already holds cells; resume it or use a fresh directory")
            if resume:
                self.cells = read_cells(cpath)
        self._write_manifest()
        new = not cpath.exists()
        self._fh = open(cpath, "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, delimiter="\t", lineterminator="\n")
        if new:
            self._writer.writerow(CELL_FIELDS)
            self._fh.flush()

    def _write_manifest(self):
        tmp = self.dir / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.manifest.as_dict(), indent=1, sort_keys=True))
        os.replace(tmp, self.dir / MANIFEST)

    def get(self, key):
        return self.cells.get(key)

    def put_many(self, items: list[tuple[tuple[str, str, str, str], float]]):
        with self._lock:
            for key, val in items:
                if key in self.cells:
                    continue
                self.cells[key] = val
                self._writer.writerow((*key, repr(float(val))))
            self._fh.flush()

    def finish(self, manifest: ScoreCacheManifest):
        self.manifest = manifest
        self._write_manifest()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_cells(path: Path) -> dict[tuple[str, str, str, str], float]:
    cells: dict = {}
    if not path.exists():
        return cells
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is not None and tuple(header) != CELL_FIELDS:
            raise ConfigError(f"{path}: unexpected header {header}")
        for row in reader:
            if len(row) != 5:
                continue  # torn final line from an interrupted write
            key = (row[0], row[1], row[2], row[3])
            cells.setdefault(key, float(row[4]))
    return cells


def compact(directory: str | Path) -> int:
    """Rewrite the cell log sorted and de-duplicated; returns the cell count."""
    d = Path(directory)
    cells = read_cells(d / CELLS)
    tmp = d / (CELLS + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CELL_FIELDS)
        for key in sorted(cells):
            w.writerow((*key, repr(cells[key])))
    os.replace(tmp, d / CELLS)
    mpath = d / MANIFEST
    if mpath.exists():
        m = json.loads(mpath.read_text())
        m["completed_cells"] = len(cells)
        mpath.write_text(json.dumps(m, indent=1, sort_keys=True))
    return len(cells)


# scoring -----------------------------------------------------------------------

def _value(seq, scoring: str) -> float:
    return seq.total_logprob if scoring == "sum" else seq.mean_logprob


def fill_and_score(s: StringRecord, t: ContextTemplate, backend: Backend, scoring: str = "sum") -> float:
    """Log-probability of ``s`` inserted at the template's placeholder."""
    text, span = t.fill(s.text)
    try:
        seq = backend.score(text, span)
    except AlignmentError as exc:
        raise AlignmentError(f"string {s.id!r} in context {t.id!r}: {exc}", exc.boundary) from exc
    return _value(seq, scoring)


def pair_texts(outcome: str, variant_text: str, context: ContextTemplate, eval_prompt: str = ""):
    """(text, span) for both concatenation orders: variant+context+outcome, outcome+context+variant."""
    head = eval_prompt + " " if eval_prompt else ""
    ctx = context.context_text
    px_prefix = head + " ".join(p for p in (variant_text, ctx) if p)
    px_prefix = px_prefix + " " if px_prefix.strip() else head
    px = px_prefix + outcome
    xp_tail = " ".join(p for p in (ctx, variant_text) if p)
    xp = head + outcome + (" " + xp_tail if xp_tail else "")
    return {
        "PX": (px, (len(px_prefix), len(px))),
        "XP": (xp, (len(head), len(head) + len(outcome))),
    }


def score_pair_orders(outcome: str, variant: PredictorVariant, context: ContextTemplate,
                      backend: Backend, eval_prompt: str = "", scoring: str = "sum") -> dict[str, float]:
    texts = pair_texts(outcome, variant.text, context, eval_prompt)
    return {o: _value(backend.score(*texts[o]), scoring) for o in ORDERS}


def score_pair_max(outcome: str, variant: PredictorVariant, context: ContextTemplate,
                   backend: Backend, eval_prompt: str = "", scoring: str = "sum") -> float:
    """Outcome log-probability, maximized over the two concatenation orders."""
    scores = score_pair_orders(outcome, variant, context, backend, eval_prompt, scoring)
    return max(scores.values())


def _run_cells(keys, compute, cache: ScoreCache | None, workers: int, batch: int = 256):
    """Evaluate ``compute(key)`` for every key not already cached.

    Results are written by the calling thread only, in batches.
    """
    out = {}
    todo = []
    for k in keys:
        v = cache.get(k) if cache is not None else None
        if v is None:
            todo.append(k)
        else:
            out[k] = v
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, len(todo), batch):
            chunk = todo[start:start + batch]
            if pool:
                vals = list(pool.map(compute, chunk))
            else:
                vals = []
                try:
                    for k in chunk:
                        vals.append(compute(k))
                except BaseException:
                    # keep the finished part of the batch for a later resume
                    if cache is not None and vals:
                        cache.put_many(list(zip(chunk, vals)))
                    raise
            for k, v in zip(chunk, vals):
                if not math.isfinite(v):
                    raise ValueError(f"non-finite score for cell {k}")
                out[k] = v
            if cache is not None:
                cache.put_many(list(zip(chunk, vals)))
    finally:
        if pool:
            pool.shutdown(wait=True)
    return out, len(todo)


def build_matrix(
    strings: list[StringRecord],
    templates: list[ContextTemplate],
    backend: Backend,
    resume: bool = False,
    cache_dir: str | Path | None = None,
    workers: int = 1,
    scoring: str = "sum",
    profile_hash: str = "",
    seeds: dict | None = None,
) -> ScoreMatrix:
    """Score every string in every template (self-pairs included, flagged later)."""
    ids = [s.id for s in strings]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate string ids")
    known = set(ids)
    missing = sorted({t.source_string_id for t in templates} - known)
    if missing:
        raise ValueError(f"templates reference unknown source strings: {missing[:5]}")
    manifest = ScoreCacheManifest(
        model_identifier=backend.capabilities().model_identifier,
        profile_hash=profile_hash,
        scoring=scoring,
        seeds=dict(seeds or {}),
        total_cells=len(strings) * len(templates),
        rows=ids,
        cols=[[t.id, t.group_label, t.source_string_id] for t in templates],
    )
    s_by_id = {s.id: s for s in strings}
    t_by_id = {t.id: t for t in templates}
    keys = [(s.id, t.id, "", "") for s in strings for t in templates]

    def compute(key):
        return fill_and_score(s_by_id[key[0]], t_by_id[key[1]], backend, scoring)

    cache = ScoreCache(cache_dir, manifest, resume=resume) if cache_dir is not None else None
    try:
        out, n_new = _run_cells(keys, compute, cache, workers)
    finally:
        if cache is not None:
            done = sum(1 for k in keys if cache.get(k) is not None)
            cache.finish(ScoreCacheManifest(**{**manifest.as_dict(), "completed_cells": done}))
            cache.close()
    values = np.array([out[k] for k in keys], dtype=float).reshape(len(strings), len(templates))
    done_manifest = ScoreCacheManifest(**{**manifest.as_dict(), "completed_cells": len(keys)})
    return ScoreMatrix(ids, [t.id for t in templates], [t.group_label for t in templates],
                       [t.source_string_id for t in templates], values, done_manifest, n_new)


def load_matrix(cache_dir: str | Path) -> ScoreMatrix:
    """Rebuild a completed two-sample matrix from its cache directory."""
    d = Path(cache_dir)
    manifest = ScoreCacheManifest.from_dict(json.loads((d / MANIFEST).read_text()))
    cells = read_cells(d / CELLS)
    rows = manifest.rows
    cols = manifest.cols
    vals = np.empty((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, (cid, _, _) in enumerate(cols):
            v = cells.get((r, cid, "", ""))
            if v is None:
                raise ConfigError(f"cache {d} is incomplete: missing cell ({r}, {cid})")
            vals[i, j] = v
    return ScoreMatrix(rows, [c[0] for c in cols], [c[1] for c in cols], [c[2] for c in cols],
                       vals, manifest)
