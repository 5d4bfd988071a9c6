"""Perplexity scoring over pluggable backends, with a persistent score cache.

A score is exp(-mean(token log-probs)) of the concatenated input+output text.
Three backends ship: `file` (precomputed scores), `http` (OpenAI-compatible
completions endpoint with echoed logprobs), and `synthetic` (a planted model
with per-cluster base levels plus an additive shift on corrupted examples,
for model-free tests and benchmarks).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import requests

from .corpus import Example
from .errors import (
    BackendUnavailable,
    ContextOverflow,
    EmptyLogProbs,
    MissingScore,
    PartialFailure,
    ProtocolError,
)

API_KEY_ENV = "ICL_FORGE_API_KEY"
RETRY_DELAYS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class TokenLogProbs:
    """Per-token natural-log probabilities for one scored sequence."""

    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]
    source_id: str

    def __post_init__(self):
        if len(self.tokens) != len(self.logprobs) or not self.tokens:
            raise EmptyLogProbs(
                f"{self.source_id!r}: need equal, non-empty token/logprob lists"
            )
        if not all(math.isfinite(lp) for lp in self.logprobs):
            raise ValueError(f"{self.source_id!r}: non-finite logprob")
        if any(lp > 0.0 for lp in self.logprobs):
            raise ValueError(f"{self.source_id!r}: logprobs must be <= 0 (natural log)")


@dataclass(frozen=True)
class PerplexityScore:
    example_id: str
    perplexity: float
    backend_tag: str

    def __post_init__(self):
        if self.perplexity <= 0.0:
            raise ValueError(f"perplexity must be positive, got {self.perplexity}")
        if not self.backend_tag:
            raise ValueError("backend_tag must be non-empty")


def perplexity_from_logprobs(lp: TokenLogProbs) -> PerplexityScore:
    """exp(-(1/n) * sum(logprobs)), computed in log space."""
    mean_ll = sum(lp.logprobs) / len(lp.logprobs)
    return PerplexityScore(lp.source_id, math.exp(-mean_ll), backend_tag="logprobs")


def content_hash(ex: Example) -> str:
    """Stable digest of the scoreable content; editing text invalidates caches."""
    payload = "\x1f".join((ex.task, ex.input_text, ex.output_text))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


class ScorerBackend(Protocol):
    @property
    def tag(self) -> str: ...

    def score(self, ex: Example) -> PerplexityScore: ...


def score_example(backend: ScorerBackend, ex: Example) -> PerplexityScore:
    """Perplexity of the example under the backend's own tokenization."""
    return backend.score(ex)


# --- file backend -------------------------------------------------------------


def load_score_file(path: str | Path) -> dict[str, PerplexityScore]:
    scores: dict[str, PerplexityScore] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            rec = json.loads(raw)
            scores[str(rec["id"])] = PerplexityScore(
                str(rec["id"]), float(rec["perplexity"]), str(rec["backend_tag"])
            )
    return scores


def save_score_file(scores: dict[str, PerplexityScore], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ex_id in sorted(scores):
            s = scores[ex_id]
            fh.write(
                json.dumps(
                    {"id": s.example_id, "perplexity": s.perplexity, "backend_tag": s.backend_tag},
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


class FileScoreBackend:
    """Precomputed scores from a JSONL file; lookup by example id."""

    def __init__(self, path: str | Path):
        self._scores = load_score_file(path)
        tags = {s.backend_tag for s in self._scores.values()}
        self._tag = sorted(tags)[0] if len(tags) == 1 else f"file:{Path(path).name}"

    @property
    def tag(self) -> str:
        return self._tag

    def score(self, ex: Example) -> PerplexityScore:
        if ex.id not in self._scores:
            raise MissingScore([ex.id])
        found = self._scores[ex.id]
        return PerplexityScore(ex.id, found.perplexity, self._tag)


# --- synthetic planted backend --------------------------------------------------


def _stable_gauss(seed: int, ex_id: str) -> float:
    """Deterministic standard normal per (seed, id), independent of call order."""
    digest = hashlib.sha256(f"{seed}:{ex_id}".encode("utf-8")).digest()
    # Box-Muller on two uniform draws from the digest
    u1 = (int.from_bytes(digest[:8], "big") + 1) / (2**64 + 2)
    u2 = int.from_bytes(digest[8:16], "big") / 2**64
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@dataclass(frozen=True)
class SyntheticScorerModel:
    """Planted perplexity model: per-cluster base level + shift on noisy items.

    Scores are deterministic per (example id, seed). Which items count as
    noisy is fixed at construction (snapshot of ground truth), so the model
    can score flag-stripped examples downstream.
    """

    cluster_base: dict[str, float]
    noise_shift: float
    sigma: float
    seed: int
    cluster_of: dict[str, str]
    noisy_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.noise_shift < 0 or self.sigma < 0:
            raise ValueError("noise_shift and sigma must be non-negative")

    @property
    def tag(self) -> str:
        digest = hashlib.sha256(
            json.dumps(
                [sorted(self.cluster_base.items()), self.noise_shift, self.sigma, self.seed],
                sort_keys=True,
            ).encode("utf-8")
        ).hexdigest()[:12]
        return f"synthetic:{self.seed}:{digest}"

    def perplexity_of(self, ex_id: str) -> float:
        if ex_id not in self.cluster_of:
            raise MissingScore([ex_id])
        value = self.cluster_base[self.cluster_of[ex_id]]
        if ex_id in self.noisy_ids:
            value += self.noise_shift
        if self.sigma > 0:
            value += self.sigma * _stable_gauss(self.seed, ex_id)
        return max(value, 1e-6)

    def score(self, ex: Example) -> PerplexityScore:
        return PerplexityScore(ex.id, self.perplexity_of(ex.id), self.tag)

    def to_json(self) -> dict:
        return {
            "cluster_base": self.cluster_base,
            "noise_shift": self.noise_shift,
            "sigma": self.sigma,
            "seed": self.seed,
            "cluster_of": self.cluster_of,
            "noisy_ids": sorted(self.noisy_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticScorerModel":
        return cls(
            cluster_base={str(k): float(v) for k, v in obj["cluster_base"].items()},
            noise_shift=float(obj["noise_shift"]),
            sigma=float(obj["sigma"]),
            seed=int(obj["seed"]),
            cluster_of={str(k): str(v) for k, v in obj["cluster_of"].items()},
            noisy_ids=frozenset(str(i) for i in obj.get("noisy_ids", [])),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticScorerModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


# --- HTTP backend ---------------------------------------------------------------


class HttpScoreBackend:
    """OpenAI-compatible /v1/completions scorer with echoed logprobs.

    Transport failures retry 3 times with exponential backoff; malformed
    responses raise ProtocolError without retry. `ppl_on="output"` averages
    only over tokens at or past the rendered output text (conditional
    perplexity) instead of the whole sequence.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        template,
        *,
        ppl_on: str = "z",
        max_context_chars: int | None = None,
        session: requests.Session | None = None,
        timeout: float = 30.0,
    ):
        if ppl_on not in ("z", "output"):
            raise ValueError(f"ppl_on must be 'z' or 'output', got {ppl_on!r}")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.template = template
        self.ppl_on = ppl_on
        self.max_context_chars = max_context_chars
        self.timeout = timeout
        self._session = session or requests.Session()

    @property
    def tag(self) -> str:
        return f"{self.model}@{self.template.fingerprint()}:{self.ppl_on}"

    def _post(self, payload: dict) -> dict:
        headers = {}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error: Exception | None = None
        for attempt, delay in enumerate((*RETRY_DELAYS, None)):
            try:
                resp = self._session.post(
                    f"{self.base_url}/v1/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.RequestException as e:
                last_error = e
            else:
                if resp.status_code >= 500:
                    last_error = BackendUnavailable(f"server error {resp.status_code}")
                elif resp.status_code >= 400:
                    raise ProtocolError(f"request rejected: {resp.status_code} {resp.text[:200]}")
                else:
                    try:
                        return resp.json()
                    except ValueError as e:
                        raise ProtocolError(f"non-JSON response: {e}") from e
            if delay is not None:
                time.sleep(delay)
        raise BackendUnavailable(f"transport failed after retries: {last_error}")

    def score(self, ex: Example) -> PerplexityScore:
        text = self.template.render_pair(ex.input_text, ex.output_text)
        if self.max_context_chars is not None and len(text) > self.max_context_chars:
            raise ContextOverflow(
                f"{ex.id!r}: {len(text)} chars exceeds context of {self.max_context_chars}"
            )
        body = self._post(
            {
                "model": self.model,
                "prompt": text,
                "max_tokens": 0,
                "echo": True,
                "logprobs": 1,
            }
        )
        try:
            logprobs_block = body["choices"][0]["logprobs"]
            raw_lps = logprobs_block["token_logprobs"]
            raw_tokens = logprobs_block.get("tokens") or [""] * len(raw_lps)
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"{ex.id!r}: response missing echoed logprobs") from e
        offsets = logprobs_block.get("text_offset")
        start = 0
        if self.ppl_on == "output":
            if offsets is None:
                raise ProtocolError(f"{ex.id!r}: ppl_on=output needs text_offset in response")
            prefix_len = len(self.template.render_prefix(ex.input_text))
            start = next(
                (i for i, off in enumerate(offsets) if off >= prefix_len), len(raw_lps)
            )
        kept = [
            (tok, float(lp))
            for tok, lp in list(zip(raw_tokens, raw_lps))[start:]
            if lp is not None  # the first echoed token has no conditional logprob
        ]
        if not kept:
            raise ProtocolError(f"{ex.id!r}: no usable logprobs in response")
        lp = TokenLogProbs(
            tokens=tuple(tok for tok, _ in kept),
            # clamp float noise at the boundary; scores are natural-log
            logprobs=tuple(min(0.0, v) for _, v in kept),
            source_id=ex.id,
        )
        ppl = perplexity_from_logprobs(lp)
        return PerplexityScore(ex.id, ppl.perplexity, self.tag)


# --- cache and batch scoring -----------------------------------------------------


class ScoreCache:
    """Single-file append log of scores keyed by (backend_tag, content hash).

    Duplicate keys are compacted on load (last record wins). Reads are
    lock-free on the in-memory table; writes are serialized.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._table: dict[tuple[str, str], float] = {}
        if self.path.exists():
            self._load_and_compact()

    def _load_and_compact(self) -> None:
        records: dict[tuple[str, str], dict] = {}
        n_lines = 0
        with self.path.open("r", encoding="utf-8") as fh:
            for raw in fh:
                raw = raw.strip()
                if not raw:
                    continue
                n_lines += 1
                rec = json.loads(raw)
                records[(rec["backend_tag"], rec["content_hash"])] = rec
        self._table = {k: float(v["perplexity"]) for k, v in records.items()}
        if n_lines > len(records):
            with self.path.open("w", encoding="utf-8", newline="\n") as fh:
                for key in sorted(records):
                    fh.write(json.dumps(records[key], ensure_ascii=False, sort_keys=True))
                    fh.write("\n")

    def __len__(self) -> int:
        return len(self._table)

    def get(self, backend_tag: str, digest: str) -> float | None:
        return self._table.get((backend_tag, digest))

    def put(self, backend_tag: str, digest: str, example_id: str, perplexity: float) -> None:
        with self._lock:
            self._table[(backend_tag, digest)] = perplexity
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(
                    json.dumps(
                        {
                            "backend_tag": backend_tag,
                            "content_hash": digest,
                            "example_id": example_id,
                            "perplexity": perplexity,
                        },
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                )
                fh.write("\n")


class CountingBackend:
    """Wrapper that counts how many score requests actually reach the backend."""

    def __init__(self, inner: ScorerBackend):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def tag(self) -> str:
        return self.inner.tag

    def score(self, ex: Example) -> PerplexityScore:
        with self._lock:
            self.calls += 1
        return self.inner.score(ex)


def batch_score(
    backend: ScorerBackend,
    examples: list[Example],
    cache: ScoreCache | None = None,
    parallelism: int = 4,
) -> dict[str, PerplexityScore]:
    """Score many examples, skipping cache hits; misses run concurrently.

    Raises PartialFailure listing the ids that could not be scored; scores
    that did succeed are cached first and attached to the exception.
    """
    tag = backend.tag
    results: dict[str, PerplexityScore] = {}
    misses: list[Example] = []
    seen: set[str] = set()
    for ex in examples:
        if ex.id in seen:
            continue
        seen.add(ex.id)
        cached = cache.get(tag, content_hash(ex)) if cache is not None else None
        if cached is not None:
            results[ex.id] = PerplexityScore(ex.id, cached, tag)
        else:
            misses.append(ex)

    failures: list[str] = []
    if misses:
        workers = max(1, int(parallelism))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(ex, pool.submit(backend.score, ex)) for ex in misses]
            for ex, fut in futures:
                try:
                    score = fut.result()
                except (BackendUnavailable, ProtocolError, ContextOverflow, MissingScore):
                    failures.append(ex.id)
                    continue
                results[ex.id] = score
                if cache is not None:
                    cache.put(tag, content_hash(ex), ex.id, score.perplexity)
    if failures:
        raise PartialFailure(failures, results)
    return results
