"""Embedding storage, cosine/BM25 similarity, and exact kNN retrieval.

The index does an exact scan over unit-normalized vectors; pools stay small
enough (tens of thousands) that correctness beats approximate structures.
A brute-force scan with an independent code path serves as the test oracle.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyMatrix,
    NotEnoughNeighbors,
    UnfittedParams,
    UnknownId,
    ZeroVector,
)

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense row-major vectors keyed by example id."""

    ids: tuple[str, ...]
    vectors: np.ndarray  # (N, dim) float64
    normalized: bool = False

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vecs)
        if vecs.ndim != 2:
            raise DimensionMismatch(f"vectors must be 2-D, got shape {vecs.shape}")
        if vecs.shape[0] != len(self.ids):
            raise DimensionMismatch(
                f"{len(self.ids)} ids but {vecs.shape[0]} vector rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        if not np.isfinite(vecs).all():
            raise ValueError("embedding matrix contains NaN/Inf entries")
        if self.normalized:
            norms = np.linalg.norm(vecs, axis=1)
            if not np.allclose(norms, 1.0, atol=NORM_TOLERANCE):
                raise ValueError("matrix flagged normalized but rows are not unit length")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def row_of(self) -> dict[str, int]:
        return {ex_id: i for i, ex_id in enumerate(self.ids)}

    def vector(self, ex_id: str) -> np.ndarray:
        try:
            return self.vectors[self.row_of()[ex_id]]
        except KeyError:
            raise UnknownId(ex_id) from None

    def normalize(self) -> "EmbeddingMatrix":
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            bad = [self.ids[i] for i in np.nonzero(norms == 0)[0][:5]]
            raise ZeroVector(f"zero-norm embedding rows, e.g. {bad}")
        return EmbeddingMatrix(self.ids, self.vectors / norms[:, None], normalized=True)

    def subset(self, keep_ids) -> "EmbeddingMatrix":
        keep = set(keep_ids)
        rows = [i for i, ex_id in enumerate(self.ids) if ex_id in keep]
        missing = keep - set(self.ids)
        if missing:
            raise UnknownId(sorted(missing)[0])
        return EmbeddingMatrix(
            tuple(self.ids[i] for i in rows), self.vectors[rows], self.normalized
        )


def load_embeddings_jsonl(path: str | Path) -> EmbeddingMatrix:
    """Read `{"id": ..., "vector": [...]}` lines; all vectors must share a dim."""
    ids: list[str] = []
    rows: list[list[float]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            rec = json.loads(raw)
            ids.append(str(rec["id"]))
            rows.append([float(v) for v in rec["vector"]])
    if not rows:
        raise EmptyMatrix(f"no embeddings in {path}")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed vector dimensions {sorted(dims)} in {path}")
    return EmbeddingMatrix(tuple(ids), np.array(rows, dtype=np.float64))


def save_embeddings_jsonl(emb: EmbeddingMatrix, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ex_id, row in zip(emb.ids, emb.vectors):
            fh.write(json.dumps({"id": ex_id, "vector": [float(v) for v in row]}))
            fh.write("\n")


def load_embeddings_packed(f32_path: str | Path, manifest_path: str | Path | None = None) -> EmbeddingMatrix:
    """Read little-endian float32 rows plus a `{"dim", "ids"}` manifest."""
    f32_path = Path(f32_path)
    if manifest_path is None:
        manifest_path = f32_path.with_suffix(".manifest.json")
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    dim = int(manifest["dim"])
    ids = [str(i) for i in manifest["ids"]]
    raw = f32_path.read_bytes()
    expected = len(ids) * dim * 4
    if len(raw) != expected:
        raise DimensionMismatch(
            f"{f32_path}: expected {expected} bytes for {len(ids)}x{dim}, got {len(raw)}"
        )
    flat = struct.unpack(f"<{len(ids) * dim}f", raw)
    vecs = np.array(flat, dtype=np.float64).reshape(len(ids), dim)
    return EmbeddingMatrix(tuple(ids), vecs)


def save_embeddings_packed(emb: EmbeddingMatrix, f32_path: str | Path, manifest_path: str | Path | None = None) -> None:
    f32_path = Path(f32_path)
    if manifest_path is None:
        manifest_path = f32_path.with_suffix(".manifest.json")
    flat = emb.vectors.astype("<f4").tobytes()
    f32_path.write_bytes(flat)
    manifest = {"dim": emb.dim, "ids": list(emb.ids)}
    Path(manifest_path).write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity undefined for a zero vector")
    return float(min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb))))


@dataclass(frozen=True)
class NeighborCluster:
    """A candidate plus its k nearest pool neighbors, closest first."""

    candidate_id: str
    neighbor_ids: tuple[str, ...]
    similarities: tuple[float, ...]

    def __post_init__(self):
        if self.candidate_id in self.neighbor_ids:
            raise ValueError("candidate cannot be its own neighbor")
        if len(self.neighbor_ids) != len(self.similarities):
            raise ValueError("one similarity per neighbor required")
        sims = self.similarities
        if any(s2 > s1 + 1e-12 for s1, s2 in zip(sims, sims[1:])):
            raise ValueError("similarities must be non-increasing")

    def member_ids(self) -> tuple[str, ...]:
        return (self.candidate_id, *self.neighbor_ids)


class NeighborIndex:
    """Exact cosine kNN over a fixed embedding matrix.

    The matrix may contain more ids than the retrievable pool (e.g. test
    inputs); queries only ever return pool members. Immutable after build,
    so concurrent queries are safe.
    """

    def __init__(self, emb: EmbeddingMatrix, pool_ids=None):
        if len(emb) == 0:
            raise EmptyMatrix("cannot index an empty embedding matrix")
        self._emb = emb.normalize() if not emb.normalized else emb
        self._row_of = self._emb.row_of()
        if pool_ids is None:
            pool_ids = self._emb.ids
        pool_ids = list(pool_ids)
        missing = [i for i in pool_ids if i not in self._row_of]
        if missing:
            raise UnknownId(missing[0])
        # pool rows ordered by ascending id so stable sorts break ties by id
        self._pool_ids = sorted(pool_ids)
        self._pool_rows = np.array([self._row_of[i] for i in self._pool_ids])
        self._pool_matrix = self._emb.vectors[self._pool_rows]

    @property
    def matrix(self) -> EmbeddingMatrix:
        """The normalized matrix backing this index (pool plus query ids)."""
        return self._emb

    @property
    def pool_ids(self) -> list[str]:
        return list(self._pool_ids)

    @property
    def pool_size(self) -> int:
        return len(self._pool_ids)

    def has_id(self, ex_id: str) -> bool:
        return ex_id in self._row_of

    def vector(self, ex_id: str) -> np.ndarray:
        if ex_id not in self._row_of:
            raise UnknownId(ex_id)
        return self._emb.vectors[self._row_of[ex_id]]

    def query_vector(self, vec: np.ndarray, k: int, exclude=()) -> list[tuple[str, float]]:
        """Top-k pool items by cosine similarity; ties broken by ascending id."""
        vec = np.asarray(vec, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ZeroVector("cannot query with a zero vector")
        sims = self._pool_matrix @ (vec / norm)
        np.clip(sims, -1.0, 1.0, out=sims)
        excluded = set(exclude)
        pool_set = set(self._pool_ids)
        available = len(self._pool_ids) - len(excluded & pool_set)
        if k < 1:
            raise ValueError("k must be >= 1")
        if available < k:
            raise NotEnoughNeighbors(
                f"need {k} neighbors but only {available} pool items are available"
            )
        # stable argsort over -sims keeps the ascending-id pool order on ties
        order = np.argsort(-sims, kind="stable")
        out: list[tuple[str, float]] = []
        for idx in order:
            ex_id = self._pool_ids[int(idx)]
            if ex_id in excluded:
                continue
            out.append((ex_id, float(sims[int(idx)])))
            if len(out) == k:
                break
        return out

    def neighbors(self, candidate_id: str, k: int) -> NeighborCluster:
        """NeighborSource protocol: same result as knn_query on this index."""
        return knn_query(self, candidate_id, k)


def build_index(emb: EmbeddingMatrix, pool_ids=None) -> NeighborIndex:
    """Validate and wrap the matrix in an exact-scan index."""
    return NeighborIndex(emb, pool_ids=pool_ids)


def knn_query(index: NeighborIndex, candidate_id: str, k: int) -> NeighborCluster:
    """The k pool items most similar to the candidate, excluding itself."""
    vec = index.vector(candidate_id)
    hits = index.query_vector(vec, k, exclude={candidate_id})
    return NeighborCluster(
        candidate_id,
        tuple(h[0] for h in hits),
        tuple(h[1] for h in hits),
    )


def brute_force_knn(emb: EmbeddingMatrix, candidate_id: str, k: int, pool_ids=None) -> NeighborCluster:
    """Oracle twin of knn_query: per-pair cosine over a full scan."""
    if len(emb) == 0:
        raise EmptyMatrix("empty embedding matrix")
    row_of = emb.row_of()
    if candidate_id not in row_of:
        raise UnknownId(candidate_id)
    pool = sorted(pool_ids) if pool_ids is not None else sorted(emb.ids)
    query = emb.vectors[row_of[candidate_id]]
    scored: list[tuple[float, str]] = []
    for ex_id in pool:
        if ex_id == candidate_id:
            continue
        scored.append((cosine_similarity(query, emb.vectors[row_of[ex_id]]), ex_id))
    if len(scored) < k:
        raise NotEnoughNeighbors(f"need {k} neighbors but pool holds {len(scored)}")
    scored.sort(key=lambda t: (-t[0], t[1]))
    top = scored[:k]
    return NeighborCluster(candidate_id, tuple(t[1] for t in top), tuple(t[0] for t in top))


# --- BM25 -------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    """Corpus statistics plus the k1/b saturation constants.

    IDF is Robertson-Sparck-Jones with +0.5 smoothing, clamped at zero so
    very common terms cannot push scores negative.
    """

    k1: float = 1.2
    b: float = 0.75
    doc_freqs: dict[str, int] = field(default_factory=dict)
    avg_doc_len: float = 0.0
    corpus_size: int = 0

    def validate(self) -> None:
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ValueError(f"invalid BM25 constants k1={self.k1} b={self.b}")
        if self.corpus_size <= 0 or self.avg_doc_len <= 0:
            raise UnfittedParams("BM25 params must be fitted on a corpus first")

    def idf(self, term: str) -> float:
        df = self.doc_freqs.get(term, 0)
        raw = math.log((self.corpus_size - df + 0.5) / (df + 0.5))
        return max(0.0, raw)


def fit_bm25(corpus_tokens: list[list[str]], k1: float = 1.2, b: float = 0.75) -> Bm25Params:
    """Collect document frequencies and average length over a tokenized corpus."""
    if not corpus_tokens:
        raise UnfittedParams("cannot fit BM25 on an empty corpus")
    doc_freqs: Counter[str] = Counter()
    for doc in corpus_tokens:
        doc_freqs.update(set(doc))
    avg_len = sum(len(d) for d in corpus_tokens) / len(corpus_tokens)
    return Bm25Params(
        k1=k1,
        b=b,
        doc_freqs=dict(doc_freqs),
        avg_doc_len=avg_len,
        corpus_size=len(corpus_tokens),
    )


def bm25_score(query_tokens: list[str], doc_tokens: list[str], params: Bm25Params) -> float:
    """Sum of IDF-weighted, k1/b-saturated term-frequency contributions."""
    params.validate()
    if not query_tokens or not doc_tokens:
        return 0.0
    tf = Counter(doc_tokens)
    norm = params.k1 * (1.0 - params.b + params.b * len(doc_tokens) / params.avg_doc_len)
    score = 0.0
    for term in query_tokens:
        f = tf.get(term, 0)
        if f == 0:
            continue
        score += params.idf(term) * (f * (params.k1 + 1.0)) / (f + norm)
    return score


class Bm25NeighborSource:
    """Drop-in neighbor source using BM25 over example texts instead of cosine.

    Raw BM25 scores are unbounded; they are squashed to s/(1+s) so the
    cluster's similarity field stays within [0, 1] (ranking is unchanged).
    """

    def __init__(self, texts_by_id: dict[str, str], k1: float = 1.2, b: float = 0.75):
        self._ids = sorted(texts_by_id)
        self._tokens = {i: tokenize(texts_by_id[i]) for i in self._ids}
        self._params = fit_bm25([self._tokens[i] for i in self._ids], k1=k1, b=b)

    @property
    def pool_size(self) -> int:
        return len(self._ids)

    def neighbors(self, candidate_id: str, k: int) -> NeighborCluster:
        if candidate_id not in self._tokens:
            raise UnknownId(candidate_id)
        if len(self._ids) - 1 < k:
            raise NotEnoughNeighbors(f"need {k} neighbors but pool holds {len(self._ids) - 1}")
        query = self._tokens[candidate_id]
        scored = [
            (bm25_score(query, self._tokens[ex_id], self._params), ex_id)
            for ex_id in self._ids
            if ex_id != candidate_id
        ]
        scored.sort(key=lambda t: (-t[0], t[1]))
        top = scored[:k]
        return NeighborCluster(
            candidate_id,
            tuple(t[1] for t in top),
            tuple(t[0] / (1.0 + t[0]) for t in top),
        )
