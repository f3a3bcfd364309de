"""Client for an OpenAI-compatible ``/v1/completions`` endpoint.

Generation and scoring share one wire protocol. Scoring sends the filled
text with ``echo=True, max_tokens=0, logprobs=0`` and sums the returned
prompt-token log-probs whose character offsets fall inside the target span.

Responses can be recorded to and replayed from a fixture directory holding
one JSON file per request hash, which keeps tests offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from ..errors import AlignmentError, ConfigError, EmptyGenerationError, TransportError
from .base import Backend, BackendCapabilities, GenerationParams, ScoredSequence

ENV_URL = "CTXAUG_ENDPOINT_URL"
ENV_KEY = "CTXAUG_API_KEY"


@dataclass(frozen=True)
class RemoteConfig:
    model: str
    url: str | None = None
    api_key: str | None = None
    supports_mask: bool = False
    mask_token: str | None = None
    supports_bidirectional_scoring: bool = False
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    fixture_dir: str | None = None
    fixture_mode: str = "off"  # off | record | replay

    def __post_init__(self):
        if not self.model:
            raise ConfigError("remote backend needs a model name")
        if self.fixture_mode not in ("off", "record", "replay"):
            raise ConfigError(f"unknown fixture_mode {self.fixture_mode!r}")
        if self.fixture_mode != "off" and not self.fixture_dir:
            raise ConfigError("fixture_mode requires fixture_dir")
        if self.supports_mask and not self.mask_token:
            raise ConfigError("supports_mask=true requires a non-empty mask_token")

    @classmethod
    def from_mapping(cls, d: dict) -> "RemoteConfig":
        d = dict(d)
        d.setdefault("url", os.environ.get(ENV_URL))
        d.setdefault("api_key", os.environ.get(ENV_KEY))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown remote backend keys: {sorted(unknown)}")
        return cls(**d)


def request_hash(body: dict) -> str:
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:32]


@dataclass
class RemoteBackend(Backend):
    config: RemoteConfig
    session: requests.Session = field(default_factory=requests.Session)
    sleep: object = time.sleep

    def __post_init__(self):
        if self.config.fixture_mode != "replay" and not self.config.url:
            raise ConfigError(f"no endpoint URL configured (set {ENV_URL})")
        self._caps = BackendCapabilities(
            supports_mask=self.config.supports_mask,
            mask_token=self.config.mask_token,
            supports_bidirectional_scoring=self.config.supports_bidirectional_scoring,
            model_identifier=self.config.model,
        )

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    # transport -----------------------------------------------------------------

    def _fixture_path(self, body: dict) -> Path:
        return Path(self.config.fixture_dir) / f"{request_hash(body)}.json"

    def _post(self, body: dict) -> dict:
        cfg = self.config
        if cfg.fixture_mode == "replay":
            path = self._fixture_path(body)
            if not path.exists():
                raise TransportError(f"no recorded response for request {path.stem}")
            return json.loads(path.read_text())
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        url = cfg.url.rstrip("/") + "/v1/completions"
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self.sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(url, json=body, headers=headers, timeout=cfg.timeout)
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = TransportError(f"HTTP {resp.status_code} from {url}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            data = resp.json()
            if cfg.fixture_mode == "record":
                path = self._fixture_path(body)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(data, sort_keys=True))
            return data
        raise TransportError(f"endpoint unreachable after {cfg.max_retries} retries: {last}")

    # backend interface -----------------------------------------------------------

    def generate(self, prompt: str, params: GenerationParams) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = {
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature if params.do_sample else 0.0,
            "top_k": params.top_k,
            "seed": params.seed,
        }
        data = self._post(body)
        try:
            text = data["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
        if not text or not text.strip():
            raise EmptyGenerationError("endpoint returned an empty completion")
        return text.strip()

    def score(self, filled_text: str, target_span: tuple[int, int]) -> ScoredSequence:
        start, end = target_span
        if not (0 <= start < end <= len(filled_text)):
            raise AlignmentError(f"span {target_span} outside text", boundary=start)
        body = {
            "model": self.config.model,
            "prompt": filled_text,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
            "temperature": 0.0,
        }
        data = self._post(body)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens = lp["tokens"]
            offsets = lp["text_offset"]
            values = lp["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"response lacks prompt logprobs: {exc}") from exc
        return align_span(tokens, offsets, values, start, end)


def align_span(tokens, offsets, values, start: int, end: int) -> ScoredSequence:
    """Sum log-probs of the tokens that exactly cover ``[start, end)``.

    A token straddling either boundary means the span cannot be scored in
    isolation, and the offending boundary is reported.
    """
    picked = []
    for tok, off, val in zip(tokens, offsets, values):
        tok_end = off + len(tok)
        if tok_end <= start or off >= end:
            continue
        # leading whitespace belongs to the token but not to the span
        core_off = off + (len(tok) - len(tok.lstrip()))
        if core_off < start < tok_end and off < start:
            raise AlignmentError(f"token {tok!r} straddles span start {start}", boundary=start)
        if off < end < tok_end:
            raise AlignmentError(f"token {tok!r} straddles span end {end}", boundary=end)
        if val is None or not math.isfinite(val):
            raise AlignmentError(f"no log-prob for token {tok!r} at {off}", boundary=off)
        picked.append(val)
    if not picked:
        raise AlignmentError("no tokens cover the target span", boundary=start)
    return ScoredSequence.from_tokens(picked)
