"""Command-line pipeline: noise injection, embedding import, scoring,
selection, evaluation, and the local-vs-global scoring benchmark.

Every subcommand is reproducible: all randomness flows from explicit seeds,
and the resolved configuration is echoed into a sidecar next to each output.
Config precedence is flags > config file > defaults.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import evaluation as ev
from .corpus import (
    Dataset,
    NoiseSpec,
    inject_irrelevant_noise,
    import_relevant_noise,
    load_dataset,
    save_dataset,
)
from .embedspace import (
    Bm25NeighborSource,
    EmbeddingMatrix,
    build_index,
    load_embeddings_jsonl,
    load_embeddings_packed,
    save_embeddings_jsonl,
    save_embeddings_packed,
)
from .errors import (
    BackendUnavailable,
    EvalRunFailure,
    IclForgeError,
    PartialFailure,
)
from .lpr import LprConfig, global_rank_filter, lpr_filter
from .scoring import (
    CountingBackend,
    FileScoreBackend,
    HttpScoreBackend,
    ScoreCache,
    SyntheticScorerModel,
    batch_score,
    save_score_file,
)
from .selectors import SelectorConfig, select_dpp, select_random, select_topk

CACHE_DIR_ENV = "ICL_FORGE_CACHE_DIR"

_USAGE_ERRORS = (
    ValueError,
    FileNotFoundError,
    IsADirectoryError,
)


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def _write_sidecar(out_dir: Path, name: str, resolved: dict) -> None:
    _write_json(out_dir / f"{name}.config.json", resolved)


def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {p}")
    return p


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults; None marks an unset flag."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        cfg_file = json.loads(Path(config_path).read_text(encoding="utf-8"))
        unknown = set(cfg_file) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        resolved.update(cfg_file)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _load_embeddings(path: str) -> EmbeddingMatrix:
    p = Path(path)
    if p.suffix == ".f32":
        return load_embeddings_packed(p)
    return load_embeddings_jsonl(p)


def _build_scorer(uri: str, template: ev.PromptTemplate | None, ppl_on: str = "z"):
    if not uri:
        raise UsageError("--scorer is required for this command")
    if uri.startswith("file:"):
        return FileScoreBackend(_require_file(uri[len("file:"):], "--scorer file"))
    if uri.startswith("synthetic:"):
        return SyntheticScorerModel.load(
            _require_file(uri[len("synthetic:"):], "--scorer synthetic")
        )
    if uri.startswith("http://") or uri.startswith("https://"):
        base, _, model = uri.partition("#")
        if not model:
            raise UsageError("http scorer URI must end in '#<model-name>'")
        if template is None:
            raise UsageError("http scorer requires --template")
        return HttpScoreBackend(base, model, template, ppl_on=ppl_on)
    raise UsageError(f"unsupported scorer URI {uri!r}")


def _default_cache(out_dir: Path, explicit: str | None) -> ScoreCache:
    if explicit:
        return ScoreCache(explicit)
    env_dir = os.environ.get(CACHE_DIR_ENV)
    if env_dir:
        Path(env_dir).mkdir(parents=True, exist_ok=True)
        return ScoreCache(Path(env_dir) / "scores.jsonl")
    return ScoreCache(out_dir / "score_cache.jsonl")


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in str(text).split(",") if s != "")
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("at least one seed is required")
    return seeds


# --- inject-noise ---------------------------------------------------------------


def cmd_inject_noise(args) -> int:
    defaults = {
        "pool": None,
        "donor": None,
        "import_file": None,
        "kind": "irrelevant",
        "rate": 0.0,
        "seed": 0,
        "out": None,
    }
    cfg = _resolve(args, defaults)
    if not 0.0 <= float(cfg["rate"]) <= 1.0:
        raise UsageError(f"--rate must be in [0, 1], got {cfg['rate']}")
    pool_path = _require_file(cfg["pool"], "--pool")
    if not cfg["out"]:
        raise UsageError("--out is required")
    out_path = Path(cfg["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)

    pool = load_dataset(pool_path)
    if float(cfg["rate"]) == 0.0:
        # zero-rate runs copy the input verbatim so the output is byte-identical
        out_path.write_bytes(pool_path.read_bytes())
    elif cfg["kind"] == "irrelevant":
        donor = load_dataset(_require_file(cfg["donor"], "--donor"))
        spec = NoiseSpec(
            kind="irrelevant", rate=float(cfg["rate"]), seed=int(cfg["seed"])
        )
        save_dataset(inject_irrelevant_noise(pool, donor, spec), out_path)
    elif cfg["kind"] == "relevant":
        import_path = _require_file(cfg["import_file"], "--import-file")
        spec = NoiseSpec(
            kind="relevant_import",
            rate=float(cfg["rate"]),
            seed=int(cfg["seed"]),
            import_path=str(import_path),
        )
        save_dataset(import_relevant_noise(pool, spec), out_path)
    else:
        raise UsageError(f"--kind must be irrelevant or relevant, got {cfg['kind']!r}")
    _write_sidecar(out_path.parent, out_path.stem, cfg)
    print(f"wrote {out_path}")
    return 0


# --- import-embeddings ------------------------------------------------------------


def _fetch_embeddings_http(base_url: str, model: str, texts: list[str]) -> list[list[float]]:
    import requests

    headers = {}
    api_key = os.environ.get(ev.API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    resp = requests.post(
        f"{base_url.rstrip('/')}/v1/embeddings",
        json={"model": model, "input": texts},
        headers=headers,
        timeout=120,
    )
    if resp.status_code >= 400:
        raise BackendUnavailable(f"embeddings endpoint returned {resp.status_code}")
    data = resp.json()["data"]
    return [[float(v) for v in row["embedding"]] for row in data]


def cmd_import_embeddings(args) -> int:
    defaults = {
        "source": "jsonl",
        "infile": None,
        "out": None,
        "normalize": False,
        "base_url": None,
        "model": None,
        "pool": None,
        "embed_on": "z",
    }
    cfg = _resolve(args, defaults)
    if not cfg["out"]:
        raise UsageError("--out is required")
    out_path = Path(cfg["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)

    if cfg["source"] == "jsonl":
        emb = load_embeddings_jsonl(_require_file(cfg["infile"], "--in"))
    elif cfg["source"] == "packed":
        emb = load_embeddings_packed(_require_file(cfg["infile"], "--in"))
    elif cfg["source"] == "http":
        if not cfg["base_url"] or not cfg["model"]:
            raise UsageError("--base-url and --model are required with --from http")
        pool = load_dataset(_require_file(cfg["pool"], "--pool"))
        if cfg["embed_on"] == "input":
            texts = [ex.input_text for ex in pool.examples]
        else:
            texts = [f"{ex.input_text}\n{ex.output_text}" for ex in pool.examples]
        rows = _fetch_embeddings_http(cfg["base_url"], cfg["model"], texts)
        import numpy as np

        emb = EmbeddingMatrix(tuple(pool.ids()), np.array(rows, dtype=float))
    else:
        raise UsageError(f"--from must be jsonl, packed, or http, got {cfg['source']!r}")

    if cfg["normalize"]:
        emb = emb.normalize()
    if out_path.suffix == ".f32":
        save_embeddings_packed(emb, out_path)
    else:
        save_embeddings_jsonl(emb, out_path)
    _write_sidecar(out_path.parent, out_path.stem, cfg)
    print(f"wrote {out_path} ({len(emb)} vectors, dim {emb.dim})")
    return 0


# --- score -------------------------------------------------------------------------


def cmd_score(args) -> int:
    defaults = {
        "pool": None,
        "scorer": None,
        "template": None,
        "ppl_on": "z",
        "cache": None,
        "jobs": 4,
        "out": None,
    }
    cfg = _resolve(args, defaults)
    pool = load_dataset(_require_file(cfg["pool"], "--pool"))
    if not cfg["out"]:
        raise UsageError("--out is required")
    out_path = Path(cfg["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    template = ev.PromptTemplate.load(cfg["template"]) if cfg["template"] else None
    backend = _build_scorer(cfg["scorer"] or "", template, ppl_on=cfg["ppl_on"])
    cache = _default_cache(out_path.parent, cfg["cache"])
    scores = batch_score(backend, list(pool.examples), cache=cache, parallelism=int(cfg["jobs"]))
    save_score_file(scores, out_path)
    _write_sidecar(out_path.parent, out_path.stem, cfg)
    print(f"wrote {out_path} ({len(scores)} scores)")
    return 0


# --- select ---------------------------------------------------------------------


_SELECT_DEFAULTS = {
    "pool": None,
    "test": None,
    "embeddings": None,
    "input_embeddings": None,
    "embed_on": "z",
    "selector": "topk",
    "k_demos": 8,
    "dpp_pool": 100,
    "seed": 0,
    "lpr": False,
    "lpr_k": 4,
    "lpr_gamma": 0.5,
    "lpr_similarity": "cosine",
    "lpr_rank_base": "zero_based",
    "no_reorder": False,
    "global_rank": False,
    "scorer": None,
    "template": None,
    "ppl_on": "z",
    "cache": None,
    "jobs": 4,
    "out_dir": None,
}


def _selection_setup(cfg: dict):
    pool = load_dataset(_require_file(cfg["pool"], "--pool"))
    test = load_dataset(_require_file(cfg["test"], "--test"), split="test")
    emb_flag = "--input-embeddings" if cfg["embed_on"] == "input" else "--embeddings"
    emb_path = cfg["input_embeddings"] if cfg["embed_on"] == "input" else cfg["embeddings"]
    emb = _load_embeddings(str(_require_file(emb_path, emb_flag)))
    missing = set(pool.ids()) - set(emb.ids)
    if missing:
        raise UsageError(f"embeddings missing for pool ids, e.g. {sorted(missing)[:3]}")
    index = build_index(emb, pool_ids=pool.ids())
    return pool, test, emb, index


def _noise_provenance(pool_path: str) -> dict | None:
    """Pick up the inject-noise sidecar next to the pool file, if any."""
    p = Path(pool_path)
    sidecar = p.parent / f"{p.stem}.config.json"
    if not sidecar.is_file():
        return None
    try:
        obj = json.loads(sidecar.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None
    if "rate" not in obj or "kind" not in obj:
        return None
    return {"kind": obj["kind"], "rate": obj["rate"], "seed": obj.get("seed")}


def _select_for(pool, index, selector_cfg, ex):
    if selector_cfg.method == "random":
        return select_random(pool, selector_cfg, test_id=ex.id)
    if selector_cfg.method == "topk":
        return select_topk(pool, index, ex, selector_cfg)
    return select_dpp(pool, index, ex, selector_cfg)


def cmd_select(args) -> int:
    cfg = _resolve(args, _SELECT_DEFAULTS)
    if not cfg["out_dir"]:
        raise UsageError("--out-dir is required")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    pool, test, emb, index = _selection_setup(cfg)
    selector_cfg = SelectorConfig(
        method=cfg["selector"],
        K=int(cfg["k_demos"]),
        candidate_pool_size=int(cfg["dpp_pool"]),
        seed=int(cfg["seed"]),
    )
    lpr_cfg = None
    backend = None
    cache = None
    if cfg["lpr"] or cfg["global_rank"]:
        template = ev.PromptTemplate.load(cfg["template"]) if cfg["template"] else None
        backend = _build_scorer(cfg["scorer"] or "", template, ppl_on=cfg["ppl_on"])
        cache = _default_cache(out_dir, cfg["cache"])
    if cfg["lpr"]:
        lpr_cfg = LprConfig(
            k=int(cfg["lpr_k"]),
            gamma=float(cfg["lpr_gamma"]),
            rank_base=cfg["lpr_rank_base"],
            similarity=cfg["lpr_similarity"],
            reorder=not cfg["no_reorder"],
        )

    blind_pool = pool.without_noise_flags()
    neighbor_source = index
    if lpr_cfg is not None and lpr_cfg.similarity == "bm25":
        neighbor_source = Bm25NeighborSource(
            {ex.id: f"{ex.input_text}\n{ex.output_text}" for ex in blind_pool.examples}
        )

    selections: list[dict] = []
    audit: list[dict] = []
    for ex in test.examples:
        demos = _select_for(blind_pool, index, selector_cfg, ex)
        if lpr_cfg is not None:
            demos, records = lpr_filter(
                demos,
                blind_pool,
                neighbor_source,
                backend,
                lpr_cfg,
                cache=cache,
                index_for_reorder=index,
                parallelism=int(cfg["jobs"]),
            )
            audit.extend({"test_id": ex.id, **r.to_json()} for r in records)
        elif cfg["global_rank"]:
            m = min(selector_cfg.candidate_pool_size, index.pool_size)
            hits = index.query_vector(index.vector(ex.id), m, exclude={ex.id})
            by_id = blind_pool.by_id()
            scores = batch_score(
                backend,
                [by_id[h[0]] for h in hits],
                cache=cache,
                parallelism=int(cfg["jobs"]),
            )
            demos = global_rank_filter(blind_pool, ex, scores, selector_cfg)
        selections.append(
            {
                "test_id": demos.test_id,
                "demo_ids": list(demos.demo_ids),
                "provenance": demos.provenance,
            }
        )

    sel_path = out_dir / "selections.jsonl"
    with sel_path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in selections:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
    if cfg["lpr"]:
        with (out_dir / "lpr_audit.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
            for rec in audit:
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
                fh.write("\n")
    _write_sidecar(out_dir, "select", cfg)
    print(f"wrote {sel_path} ({len(selections)} selections)")
    return 0


# --- evaluate ---------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    defaults = {
        **_SELECT_DEFAULTS,
        "inference": None,
        "metric": "em",
        "seeds": "0",
        "max_tokens": 64,
        "stop": "\n",
        "per_example": False,
        "dataset_name": None,
    }
    cfg = _resolve(args, defaults)
    if not cfg["out_dir"]:
        raise UsageError("--out-dir is required")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    pool, test, emb, index = _selection_setup(cfg)
    seeds = _parse_seeds(cfg["seeds"])
    selector_cfg = SelectorConfig(
        method=cfg["selector"],
        K=int(cfg["k_demos"]),
        candidate_pool_size=int(cfg["dpp_pool"]),
        seed=seeds[0],
    )
    template = (
        ev.PromptTemplate.load(cfg["template"])
        if cfg["template"]
        else ev.PromptTemplate(task=pool.examples[0].task)
    )
    needs_scores = cfg["lpr"] or cfg["global_rank"]
    backend = (
        _build_scorer(cfg["scorer"] or "", template, ppl_on=cfg["ppl_on"])
        if needs_scores
        else None
    )
    cache = _default_cache(out_dir, cfg["cache"]) if needs_scores else None
    lpr_cfg = (
        LprConfig(
            k=int(cfg["lpr_k"]),
            gamma=float(cfg["lpr_gamma"]),
            rank_base=cfg["lpr_rank_base"],
            similarity=cfg["lpr_similarity"],
            reorder=not cfg["no_reorder"],
        )
        if cfg["lpr"]
        else None
    )
    inference = ev.parse_inference_backend(cfg["inference"] or "")
    stop_raw = str(cfg["stop"]).encode("utf-8").decode("unicode_escape")
    eval_cfg = ev.EvalConfig(
        pool=pool.without_noise_flags(),
        test=test,
        index=index,
        template=template,
        selector=selector_cfg,
        scorer_backend=backend,
        inference_backend=inference,
        metric=cfg["metric"],
        lpr=lpr_cfg,
        global_rank=bool(cfg["global_rank"]),
        seeds=seeds,
        max_tokens=int(cfg["max_tokens"]),
        stop=tuple(s for s in stop_raw.split("|") if s) or ("\n",),
        cache=cache,
        jobs=int(cfg["jobs"]),
        dataset_name=cfg["dataset_name"] or Path(cfg["pool"]).stem,
        collect_per_example=bool(cfg["per_example"]),
    )
    report = ev.run_eval(eval_cfg)
    if report.noise_spec is None:
        report.noise_spec = _noise_provenance(cfg["pool"])
    report_path = out_dir / "report.json"
    sidecar = None
    if cfg["per_example"]:
        sidecar = out_dir / "per_example.jsonl"
        ev.save_per_example_sidecar(report, sidecar)
        report.per_example = None  # sidecar holds the detail; keep report compact
    ev.save_report(report, report_path)
    _write_sidecar(out_dir, "evaluate", cfg)
    label = "+lpr" if cfg["lpr"] else ("+global" if cfg["global_rank"] else "")
    print(f"{report.dataset}  {report.selector}{label}  {report.metric}  "
          f"{report.mean:.2f} ± {report.std:.2f}  (n_runs={report.n_runs})")
    print(f"wrote {report_path}")
    return 0


# --- bench -----------------------------------------------------------------------


def cmd_bench(args) -> int:
    defaults = {
        **_SELECT_DEFAULTS,
        "dpp_pool": 100,
    }
    cfg = _resolve(args, defaults)
    if not cfg["out_dir"]:
        raise UsageError("--out-dir is required")
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    pool, test, emb, index = _selection_setup(cfg)
    blind_pool = pool.without_noise_flags()
    by_id = blind_pool.by_id()
    template = ev.PromptTemplate.load(cfg["template"]) if cfg["template"] else None
    selector_cfg = SelectorConfig(
        method="topk",
        K=int(cfg["k_demos"]),
        candidate_pool_size=int(cfg["dpp_pool"]),
        seed=int(cfg["seed"]),
    )
    lpr_cfg = LprConfig(
        k=int(cfg["lpr_k"]), gamma=float(cfg["lpr_gamma"]), reorder=not cfg["no_reorder"]
    )

    local_backend = CountingBackend(_build_scorer(cfg["scorer"] or "", template, cfg["ppl_on"]))
    local_cache = ScoreCache(out_dir / "bench_cache_local.jsonl")
    t0 = time.perf_counter()
    for ex in test.examples:
        demos = select_topk(blind_pool, index, ex, selector_cfg)
        lpr_filter(
            demos,
            blind_pool,
            index,
            local_backend,
            lpr_cfg,
            cache=local_cache,
            index_for_reorder=index,
            parallelism=int(cfg["jobs"]),
        )
    local_seconds = time.perf_counter() - t0

    global_backend = CountingBackend(_build_scorer(cfg["scorer"] or "", template, cfg["ppl_on"]))
    global_cache = ScoreCache(out_dir / "bench_cache_global.jsonl")
    m = min(selector_cfg.candidate_pool_size, index.pool_size)
    global_requests = 0
    t0 = time.perf_counter()
    for ex in test.examples:
        hits = index.query_vector(index.vector(ex.id), m, exclude={ex.id})
        global_requests += len(hits)
        scores = batch_score(
            global_backend,
            [by_id[h[0]] for h in hits],
            cache=global_cache,
            parallelism=int(cfg["jobs"]),
        )
        global_rank_filter(blind_pool, ex, scores, selector_cfg)
    global_seconds = time.perf_counter() - t0

    n_test = len(test)
    report = {
        "n_test": n_test,
        "k_demos": selector_cfg.K,
        "lpr_k": lpr_cfg.k,
        "global_candidates": m,
        "local": {
            "unique_scores": local_backend.calls,
            "bound": (lpr_cfg.k + 1) * selector_cfg.K * n_test,
        },
        "global": {
            "unique_scores": global_backend.calls,
            "requests": global_requests,
        },
        "wall_seconds": {
            "local": round(local_seconds, 4),
            "global": round(global_seconds, 4),
        },
    }
    _write_json(out_dir / "bench_report.json", report)
    _write_sidecar(out_dir, "bench", cfg)
    print(
        f"local unique scores: {local_backend.calls}  "
        f"global unique scores: {global_backend.calls}  "
        f"global raw requests: {global_requests}"
    )
    print(f"wrote {out_dir / 'bench_report.json'}")
    return 0


# --- report ---------------------------------------------------------------------


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        rows.append(
            (
                obj.get("dataset", "?"),
                obj.get("selector", "?")
                + ("+lpr" if obj.get("lpr_enabled") else "")
                + ("+global" if obj.get("global_rank") else ""),
                obj.get("metric", "?"),
                f"{obj.get('mean', float('nan')):.2f} ± {obj.get('std', float('nan')):.2f}",
                str(obj.get("n_runs", "?")),
            )
        )
    headers = ("dataset", "method", "metric", "score", "runs")
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in rows:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icl-forge",
        description="Noise-robust demonstration selection for in-context learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--jobs", type=int, help="parallelism bound for scoring calls")

    p = sub.add_parser("inject-noise", help="corrupt a pool's outputs at a given rate")
    add_common(p)
    p.add_argument("--pool")
    p.add_argument("--donor", help="donor pool for irrelevant noise (different task)")
    p.add_argument("--import-file", dest="import_file", help="relevant-noise corruption file")
    p.add_argument("--kind", choices=["irrelevant", "relevant"])
    p.add_argument("--rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("import-embeddings", help="convert or fetch embedding files")
    add_common(p)
    p.add_argument("--from", dest="source", choices=["jsonl", "packed", "http"])
    p.add_argument("--in", dest="infile")
    p.add_argument("--out")
    p.add_argument("--normalize", action="store_const", const=True)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--pool")
    p.add_argument("--embed-on", dest="embed_on", choices=["z", "input"])
    p.set_defaults(func=cmd_import_embeddings)

    p = sub.add_parser("score", help="score a pool with a perplexity backend")
    add_common(p)
    p.add_argument("--pool")
    p.add_argument("--scorer", help="file:..., synthetic:..., or http://host#model")
    p.add_argument("--template")
    p.add_argument("--ppl-on", dest="ppl_on", choices=["z", "output"])
    p.add_argument("--cache")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    def add_selection_flags(p):
        p.add_argument("--pool")
        p.add_argument("--test")
        p.add_argument("--embeddings")
        p.add_argument("--input-embeddings", dest="input_embeddings")
        p.add_argument("--embed-on", dest="embed_on", choices=["z", "input"])
        p.add_argument("--selector", choices=["random", "topk", "dpp"])
        p.add_argument("--k-demos", dest="k_demos", type=int)
        p.add_argument("--dpp-pool", dest="dpp_pool", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lpr", action="store_const", const=True)
        p.add_argument("--lpr-k", dest="lpr_k", type=int)
        p.add_argument("--lpr-gamma", dest="lpr_gamma", type=float)
        p.add_argument("--lpr-similarity", dest="lpr_similarity", choices=["cosine", "bm25"])
        p.add_argument(
            "--lpr-rank-base", dest="lpr_rank_base", choices=["zero_based", "one_based"]
        )
        p.add_argument("--no-reorder", dest="no_reorder", action="store_const", const=True)
        p.add_argument("--global-rank", dest="global_rank", action="store_const", const=True)
        p.add_argument("--scorer")
        p.add_argument("--template")
        p.add_argument("--ppl-on", dest="ppl_on", choices=["z", "output"])
        p.add_argument("--cache")
        p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("select", help="build demonstration sets for each test input")
    add_common(p)
    add_selection_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="run the full selection + generation protocol")
    add_common(p)
    add_selection_flags(p)
    p.add_argument("--inference", help="echo:<text>, echo:reference, or http://host#model")
    p.add_argument("--metric", choices=["em", "bleu"])
    p.add_argument("--seeds", help="comma-separated run seeds, e.g. 1,2,3")
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--stop", help="stop sequences joined by '|'")
    p.add_argument("--per-example", dest="per_example", action="store_const", const=True)
    p.add_argument("--dataset-name", dest="dataset_name")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="compare scoring-call counts: local vs global")
    add_common(p)
    add_selection_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="print a table from evaluation report files")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (EvalRunFailure, PartialFailure, BackendUnavailable) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    except IclForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # unexpected: runtime failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
