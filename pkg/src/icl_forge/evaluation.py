"""Prompt assembly, generation, and EM/BLEU metric computation.

Prompts render demonstrations in set order joined by a separator, then the
query up to the output cue. Exact match uses the standard QA normalization
(lowercase, strip punctuation, drop articles, collapse whitespace). BLEU is
corpus-level for reports and smoothed sentence-level per example.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import statistics
import string
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .corpus import Dataset, Example
from .embedspace import NeighborIndex
from .errors import (
    BackendUnavailable,
    ContextOverflow,
    EvalRunFailure,
    NoReferences,
    ProtocolError,
    UnresolvedId,
)
from .lpr import LprConfig, global_rank_filter, lpr_filter
from .scoring import API_KEY_ENV, RETRY_DELAYS, ScoreCache, ScorerBackend, batch_score
from .selectors import (
    DemonstrationSet,
    SelectorConfig,
    select_dpp,
    select_random,
    select_topk,
)

_PLACEHOLDER_RE = re.compile(r"\{(input|output)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Task-specific rendering of demonstrations and the final query."""

    task: str
    demo_format: str = "Question: {input}\nAnswer: {output}"
    query_format: str = "Question: {input}\nAnswer:"
    separator: str = "\n\n"

    def __post_init__(self):
        demo_slots = _PLACEHOLDER_RE.findall(self.demo_format)
        if demo_slots.count("input") != 1 or demo_slots.count("output") != 1:
            raise ValueError("demo_format needs {input} and {output} exactly once each")
        if demo_slots != ["input", "output"]:
            raise ValueError("demo_format must place {input} before {output}")
        query_slots = _PLACEHOLDER_RE.findall(self.query_format)
        if query_slots != ["input"]:
            raise ValueError("query_format needs {input} exactly once and no {output}")

    def render_pair(self, input_text: str, output_text: str) -> str:
        mapping = {"input": input_text, "output": output_text}
        return _PLACEHOLDER_RE.sub(lambda m: mapping[m.group(1)], self.demo_format)

    def render_prefix(self, input_text: str) -> str:
        """Everything of a rendered pair before the output value appears."""
        head = self.demo_format[: self.demo_format.index("{output}")]
        return _PLACEHOLDER_RE.sub(lambda m: {"input": input_text}[m.group(1)], head)

    def render_query(self, input_text: str) -> str:
        return _PLACEHOLDER_RE.sub(lambda m: {"input": input_text}[m.group(1)], self.query_format)

    def fingerprint(self) -> str:
        payload = "\x1f".join((self.task, self.demo_format, self.query_format, self.separator))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplate":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            task=str(obj["task"]),
            demo_format=str(obj["demo_format"]),
            query_format=str(obj["query_format"]),
            separator=str(obj["separator"]),
        )

    def save(self, path: str | Path) -> None:
        obj = {
            "task": self.task,
            "demo_format": self.demo_format,
            "query_format": self.query_format,
            "separator": self.separator,
        }
        Path(path).write_text(
            json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


def assemble_prompt(
    demos: DemonstrationSet, test_input: Example, template: PromptTemplate, pool: Dataset
) -> str:
    """Demonstrations in set order, separator-joined, then the query cue."""
    by_id = pool.by_id()
    parts: list[str] = []
    for demo_id in demos.demo_ids:
        if demo_id not in by_id:
            raise UnresolvedId(demo_id)
        ex = by_id[demo_id]
        parts.append(template.render_pair(ex.input_text, ex.output_text))
    parts.append(template.render_query(test_input.input_text))
    return template.separator.join(parts)


# --- generation backends ------------------------------------------------------


class EchoBackend:
    """Test double: returns a canned string, or the per-call reference when
    constructed in reference mode (URI `echo:reference`)."""

    def __init__(self, text: str = "", reference_mode: bool = False):
        self.text = text
        self.reference_mode = reference_mode
        self.context_window_chars: int | None = None

    def complete(self, prompt: str, max_tokens: int, stop: list[str], reference: str | None = None) -> str:
        if self.reference_mode:
            return reference if reference is not None else ""
        return self.text


class HttpInferenceBackend:
    """Greedy completion against an OpenAI-compatible /v1/completions endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        context_window_chars: int | None = None,
        session: requests.Session | None = None,
        timeout: float = 60.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.context_window_chars = context_window_chars
        self.timeout = timeout
        self._session = session or requests.Session()

    def complete(self, prompt: str, max_tokens: int, stop: list[str], reference: str | None = None) -> str:
        headers = {}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": 0.0,
        }
        if stop:
            payload["stop"] = list(stop)
        last_error: Exception | None = None
        for delay in (*RETRY_DELAYS, None):
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
                        return str(resp.json()["choices"][0]["text"])
                    except (ValueError, KeyError, IndexError, TypeError) as e:
                        raise ProtocolError(f"malformed completion response: {e}") from e
            if delay is not None:
                time.sleep(delay)
        raise BackendUnavailable(f"transport failed after retries: {last_error}")


def parse_inference_backend(uri: str, context_window_chars: int | None = None):
    """`echo:<literal>`, `echo:reference`, or an http(s) base URL with
    `#model` suffix selecting the model name."""
    if uri.startswith("echo:"):
        payload = uri[len("echo:"):]
        if payload == "reference":
            return EchoBackend(reference_mode=True)
        return EchoBackend(text=payload)
    if uri.startswith("http://") or uri.startswith("https://"):
        base, _, model = uri.partition("#")
        if not model:
            raise ValueError("http inference URI must end in '#<model-name>'")
        return HttpInferenceBackend(base, model, context_window_chars=context_window_chars)
    raise ValueError(f"unsupported inference backend URI {uri!r}")


def generate(backend, prompt: str, max_tokens: int, stop: list[str], reference: str | None = None) -> str:
    """Greedy completion truncated at the first stop sequence.

    Overly long prompts fail with ContextOverflow before any network call.
    """
    window = getattr(backend, "context_window_chars", None)
    if window is not None and len(prompt) > window:
        raise ContextOverflow(f"prompt of {len(prompt)} chars exceeds window of {window}")
    text = backend.complete(prompt, max_tokens=max_tokens, stop=list(stop), reference=reference)
    cut = len(text)
    for s in stop:
        if not s:
            continue
        pos = text.find(s)
        if pos != -1:
            cut = min(cut, pos)
    return text[:cut]


# --- metrics --------------------------------------------------------------------

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = text.translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, references: list[str]) -> int:
    """1 iff the normalized prediction equals any normalized reference."""
    if not references:
        raise NoReferences("exact match needs at least one reference")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(ref) for ref in references))


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(prediction: list[str], references: list[list[str]], max_n: int):
    """Per-order matched/total counts plus candidate/reference lengths."""
    matched = [0] * max_n
    total = [0] * max_n
    for n in range(1, max_n + 1):
        cand = _ngram_counts(prediction, n)
        if not cand:
            continue
        best: Counter = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, n).items():
                if count > best[gram]:
                    best[gram] = count
        total[n - 1] = sum(cand.values())
        matched[n - 1] = sum(min(c, best[g]) for g, c in cand.items())
    c = len(prediction)
    # effective reference length: closest to the candidate, ties to shorter
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1] if references else 0
    return matched, total, c, r


def _bleu_from_stats(matched: list[int], total: list[int], c: int, r: int) -> float:
    orders = [i for i, t in enumerate(total) if t > 0]
    if not orders:
        return 0.0
    if matched[0] == 0:
        return 0.0
    # +1 smoothing on counts for orders >= 2 when any of them has no match
    smooth = any(matched[i] == 0 for i in orders if i >= 1)
    log_sum = 0.0
    for i in orders:
        m, t = matched[i], total[i]
        if smooth and i >= 1:
            m, t = m + 1, t + 1
        log_sum += math.log(m / t)
    geo_mean = math.exp(log_sum / len(orders))
    bp = 1.0 if c > r else math.exp(1.0 - r / c) if c > 0 else 0.0
    return geo_mean * bp


def bleu(prediction: list[str], references: list[list[str]], max_n: int = 4) -> float:
    """Smoothed sentence BLEU in [0, 1]."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not references:
        raise NoReferences("BLEU needs at least one reference")
    if not prediction:
        warnings.warn("empty prediction scores 0 BLEU", stacklevel=2)
        return 0.0
    matched, total, c, r = _bleu_stats(prediction, references, max_n)
    return _bleu_from_stats(matched, total, c, r)


def corpus_bleu(pairs: list[tuple[list[str], list[list[str]]]], max_n: int = 4) -> float:
    """BLEU over aggregated n-gram counts of many (prediction, references) pairs."""
    matched = [0] * max_n
    total = [0] * max_n
    c_sum = 0
    r_sum = 0
    for prediction, references in pairs:
        if not references:
            raise NoReferences("BLEU needs at least one reference")
        if not prediction:
            continue
        m, t, c, r = _bleu_stats(prediction, references, max_n)
        matched = [a + b for a, b in zip(matched, m)]
        total = [a + b for a, b in zip(total, t)]
        c_sum += c
        r_sum += r
    return _bleu_from_stats(matched, total, c_sum, r_sum)


def bleu_tokenize(text: str) -> list[str]:
    """Whitespace tokenization after padding punctuation."""
    text = re.sub(r"([^\w\s])", r" \1 ", text)
    return text.split()


# --- evaluation driver --------------------------------------------------------


@dataclass
class EvalConfig:
    pool: Dataset
    test: Dataset
    index: NeighborIndex
    template: PromptTemplate
    selector: SelectorConfig
    scorer_backend: ScorerBackend | None
    inference_backend: object
    metric: str = "em"  # "em" | "bleu"
    lpr: LprConfig | None = None
    global_rank: bool = False
    seeds: tuple[int, ...] = (0,)
    max_tokens: int = 64
    stop: tuple[str, ...] = ("\n",)
    cache: ScoreCache | None = None
    jobs: int = 4
    dataset_name: str = "dataset"
    collect_per_example: bool = False
    max_failure_fraction: float = 0.05

    def __post_init__(self):
        if self.metric not in ("em", "bleu"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.lpr is not None and self.global_rank:
            raise ValueError("choose either the local filter or global ranking, not both")


@dataclass
class EvalReport:
    dataset: str
    selector: str
    lpr_enabled: bool
    noise_spec: dict | None
    metric: str
    mean: float
    std: float
    n_runs: int
    per_example: list[dict] | None = None
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "dataset": self.dataset,
            "selector": self.selector,
            "lpr_enabled": self.lpr_enabled,
            "noise_spec": self.noise_spec,
            "metric": self.metric,
            "mean": round(self.mean, 6),
            "std": round(self.std, 6),
            "n_runs": self.n_runs,
        }
        out.update(self.extras)
        if self.per_example is not None:
            out["per_example"] = self.per_example
        return out


def _select(cfg: EvalConfig, selector: SelectorConfig, ex: Example) -> DemonstrationSet:
    if selector.method == "random":
        return select_random(cfg.pool, selector, test_id=ex.id)
    if selector.method == "topk":
        return select_topk(cfg.pool, cfg.index, ex, selector)
    return select_dpp(cfg.pool, cfg.index, ex, selector)


def evaluate_one(cfg: EvalConfig, selector: SelectorConfig, ex: Example):
    """Select, optionally filter, prompt, generate, and score one test input."""
    demos = _select(cfg, selector, ex)
    if cfg.lpr is not None:
        demos, _records = lpr_filter(
            demos,
            cfg.pool,
            cfg.index,
            cfg.scorer_backend,
            cfg.lpr,
            cache=cfg.cache,
            index_for_reorder=cfg.index,
            parallelism=cfg.jobs,
        )
    elif cfg.global_rank:
        m = min(selector.candidate_pool_size, cfg.index.pool_size)
        hits = cfg.index.query_vector(cfg.index.vector(ex.id), m, exclude={ex.id})
        by_id = cfg.pool.by_id()
        scores = batch_score(
            cfg.scorer_backend,
            [by_id[h[0]] for h in hits],
            cache=cfg.cache,
            parallelism=cfg.jobs,
        )
        demos = global_rank_filter(cfg.pool, ex, scores, selector)
    prompt = assemble_prompt(demos, ex, cfg.template, cfg.pool)
    prediction = generate(
        cfg.inference_backend,
        prompt,
        max_tokens=cfg.max_tokens,
        stop=list(cfg.stop),
        reference=ex.output_text,
    )
    if cfg.metric == "em":
        score = float(exact_match(prediction, [ex.output_text]))
    else:
        score = bleu(bleu_tokenize(prediction), [bleu_tokenize(ex.output_text)])
    return demos, prediction, score


def run_eval(cfg: EvalConfig) -> EvalReport:
    """Full protocol: per seed, evaluate every test example and aggregate.

    EM reports 100 * mean over examples; BLEU reports 100 * corpus BLEU.
    The run fails when more than max_failure_fraction of examples error.
    """
    run_values: list[float] = []
    per_example: list[dict] = []
    n_failures = 0
    n_attempts = 0
    for seed in cfg.seeds:
        selector = SelectorConfig(
            method=cfg.selector.method,
            K=cfg.selector.K,
            candidate_pool_size=cfg.selector.candidate_pool_size,
            seed=seed,
        )
        em_scores: list[float] = []
        bleu_pairs: list[tuple[list[str], list[list[str]]]] = []
        for ex in cfg.test.examples:
            n_attempts += 1
            try:
                demos, prediction, score = evaluate_one(cfg, selector, ex)
            except Exception as e:  # aggregated; the run fails past the threshold
                n_failures += 1
                per_example.append(
                    {"id": ex.id, "seed": seed, "error": f"{type(e).__name__}: {e}"}
                )
                continue
            if cfg.metric == "em":
                em_scores.append(score)
            else:
                bleu_pairs.append(
                    (bleu_tokenize(prediction), [bleu_tokenize(ex.output_text)])
                )
            per_example.append(
                {
                    "id": ex.id,
                    "seed": seed,
                    "prediction": prediction,
                    "score": round(score, 6),
                    "demo_ids": list(demos.demo_ids),
                }
            )
        if cfg.metric == "em":
            run_values.append(100.0 * (statistics.fmean(em_scores) if em_scores else 0.0))
        else:
            run_values.append(100.0 * corpus_bleu(bleu_pairs))

    if n_attempts and n_failures / n_attempts > cfg.max_failure_fraction:
        raise EvalRunFailure(
            f"{n_failures}/{n_attempts} evaluations failed "
            f"(> {cfg.max_failure_fraction:.0%} tolerated)"
        )

    mean = statistics.fmean(run_values)
    std = statistics.pstdev(run_values) if len(run_values) > 1 else 0.0
    noise_summary = cfg.pool.noise_spec.summary() if cfg.pool.noise_spec else None
    return EvalReport(
        dataset=cfg.dataset_name,
        selector=cfg.selector.method,
        lpr_enabled=cfg.lpr is not None,
        noise_spec=noise_summary,
        metric=cfg.metric,
        mean=mean,
        std=std,
        n_runs=len(cfg.seeds),
        per_example=per_example if cfg.collect_per_example else None,
        extras={
            "global_rank": cfg.global_rank,
            "k_demos": cfg.selector.K,
            "seeds": list(cfg.seeds),
            "n_failures": n_failures,
        },
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def save_per_example_sidecar(report: EvalReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in report.per_example or []:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
