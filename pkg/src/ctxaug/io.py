"""Input ingestion, run configuration, hashing, and report writing."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .contexts.pipeline import ContextTemplate
from .errors import ConfigError
from .records import StringRecord

TASKS = ("two-sample", "regress", "simulate")


class IngestError(ConfigError):
    """A record file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _read_jsonl(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise IngestError(f"input file {p} does not exist")
    with open(p, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise IngestError(f"malformed JSON: {exc.msg}", n) from None
            if not isinstance(obj, dict):
                raise IngestError("each line must be a JSON object", n)
            yield n, obj


def _floats(value, what: str, n: int) -> tuple[float, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise IngestError(f"{what} must be a list of numbers", n)
    out = tuple(float(v) for v in value)
    if not all(math.isfinite(v) for v in out):
        raise IngestError(f"{what} must be finite", n)
    return out


def _mapping(value, what: str, n: int, numeric: bool) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise IngestError(f"{what} must be an object", n)
    if numeric:
        bad = [k for k, v in value.items() if not isinstance(v, (int, float)) or isinstance(v, bool)]
        if bad:
            raise IngestError(f"{what} values must be numbers (bad keys {bad})", n)
        return {str(k): float(v) for k, v in value.items()}
    return {str(k): str(v) for k, v in value.items()}


def _text(obj: dict, key: str, n: int, required: bool = True) -> str | None:
    v = obj.get(key)
    if v is None:
        if required:
            raise IngestError(f"missing field {key!r}", n)
        return None
    if not isinstance(v, (str, int)) or isinstance(v, bool):
        raise IngestError(f"field {key!r} must be a string", n)
    v = str(v)
    if required and not v:
        raise IngestError(f"field {key!r} is empty", n)
    return v


def ingest_strings(path: str | Path) -> list[StringRecord]:
    """Read line-delimited JSON records with id, text, group and optional extras."""
    out, seen = [], {}
    for n, obj in _read_jsonl(path):
        sid = _text(obj, "id", n)
        if sid in seen:
            raise IngestError(f"duplicate id {sid!r} (first on line {seen[sid]})", n)
        seen[sid] = n
        out.append(StringRecord(
            id=sid,
            text=_text(obj, "text", n),
            group=_text(obj, "group", n, required=False),
            covariates=_floats(obj.get("covariates"), "covariates", n),
            moderators=_mapping(obj.get("moderators"), "moderators", n, True),
            groupings=_mapping(obj.get("groupings"), "groupings", n, False),
        ))
    if not out:
        raise IngestError(f"{path} holds no records")
    return out


def ingest_pairs(path: str | Path) -> list[tuple[StringRecord, StringRecord]]:
    """Read predictor/outcome pair records for the regression task."""
    out, seen = [], {}
    predictors: dict[str, str] = {}
    for n, obj in _read_jsonl(path):
        pid, ptxt = _text(obj, "predictor_id", n), _text(obj, "predictor_text", n)
        oid, otxt = _text(obj, "outcome_id", n), _text(obj, "outcome_text", n)
        if predictors.setdefault(pid, ptxt) != ptxt:
            raise IngestError(f"predictor id {pid!r} reused with different text", n)
        key = (pid, oid)
        if key in seen:
            raise IngestError(f"duplicate pair {pid!r} -> {oid!r} (first on line {seen[key]})", n)
        seen[key] = n
        extras = dict(
            covariates=_floats(obj.get("covariates"), "covariates", n),
            moderators=_mapping(obj.get("moderators"), "moderators", n, True),
            groupings=_mapping(obj.get("groupings"), "groupings", n, False),
        )
        out.append((StringRecord(pid, ptxt), StringRecord(oid, otxt, **extras)))
    if not out:
        raise IngestError(f"{path} holds no records")
    return out


def write_jsonl(path: str | Path, records) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def read_contexts(path: str | Path) -> list[ContextTemplate]:
    """Templates from a JSON-lines file; header lines carrying ``scoring_hash`` are skipped."""
    return [ContextTemplate.from_dict(obj) for _, obj in _read_jsonl(path) if "scoring_hash" not in obj]


def write_contexts(path: str | Path, templates) -> None:
    write_jsonl(path, [t.as_dict() for t in templates])


# configuration -------------------------------------------------------------------------

DEFAULTS = {
    "task": "two-sample",
    "backend": {"kind": "mock"},
    "profile": "synthetic-categories",
    "profile_file": None,
    "inputs": {},
    "budgets": {"J": 4, "R": 25},
    "aggregation": "mean",
    "reference": "adjusted",
    "variance_splits": 200,
    "scoring": "sum",
    "seed": 0,
    "loo": None,
    "cache_dir": None,
    "output_dir": "out",
    "regression": {
        "baselines": ["shuffle", "jabberwocky", "mask"],
        "jabberwocky_mode": "rule",
        "model": {"fixed": ["shuffle", "jabberwocky", "mask"], "random": ["observation"], "estimation": "reml"},
    },
    "simulate": {"study": "all"},
}

# keys that never change report contents
_UNHASHED = ("cache_dir", "output_dir")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        raw: dict = {}
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            raw = yaml.safe_load(p.read_text()) or {}
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a mapping")
            base = p.parent
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        data = _merge(DEFAULTS, raw)
        data = _merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
        cfg = cls(data, base)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        d = self.data
        if d["task"] not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {d['task']!r}")
        if d["backend"].get("kind") not in ("mock", "remote"):
            raise ConfigError("backend.kind must be 'mock' or 'remote'")
        for key, p in d["inputs"].items():
            if p is not None and not self.path(p).exists():
                raise ConfigError(f"input {key!r} path {self.path(p)} does not exist")
        if d["profile_file"] is not None and not self.path(d["profile_file"]).exists():
            raise ConfigError(f"profile file {d['profile_file']} does not exist")
        from .contexts.profiles import get_profile

        get_profile(d["profile"], self.path(d["profile_file"]))
        J, R = d["budgets"].get("J", 1), d["budgets"].get("R", 1)
        if int(J) < 1 or int(R) < 1:
            raise ConfigError("budgets J and R must be positive")

    def hashed_view(self) -> dict:
        view = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        view["inputs"] = {k: file_digest(self.path(p)) for k, p in self.data["inputs"].items() if p is not None}
        if self.data["profile_file"] is not None:
            view["profile_file"] = file_digest(self.path(self.data["profile_file"]))
        return view

    def config_hash(self) -> str:
        return canonical_hash(self.hashed_view())

    def scoring_hash(self) -> str:
        """Hash of the settings that determine generated contexts and cell scores."""
        v = self.hashed_view()
        return canonical_hash({k: v[k] for k in ("backend", "profile", "profile_file", "inputs", "scoring", "seed")}
                              | {"J": v["budgets"].get("J")})


def provenance(cfg: RunConfig) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg["seed"],
        "versions": {"ctxaug": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_report(path: str | Path, body: dict, cfg: RunConfig) -> None:
    """JSON report with provenance; key order and float formatting are canonical."""
    doc = {"provenance": provenance(cfg), **_clean(body)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
