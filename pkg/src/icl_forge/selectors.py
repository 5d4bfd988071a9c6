"""Baseline demonstration-set construction: random, similarity top-K, and DPP.

The DPP path pre-filters a candidate set by similarity to the test input,
builds a Gram kernel over unit embeddings, and runs greedy MAP inference
with incremental Cholesky-style log-determinant gains.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, Example
from .embedspace import NeighborIndex
from .errors import KernelNotPsd, MissingEmbedding, NumericalBreakdown, PoolTooSmall, UnknownId

JITTER = 1e-8
_EIG_TOLERANCE = -1e-10
_PIVOT_FLOOR = 1e-12


@dataclass(frozen=True)
class SelectorConfig:
    method: str = "topk"  # "random" | "topk" | "dpp"
    K: int = 8
    candidate_pool_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("random", "topk", "dpp"):
            raise ValueError(f"unknown selector {self.method!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.candidate_pool_size < self.K:
            raise ValueError("candidate_pool_size must be >= K")


@dataclass(frozen=True)
class DemonstrationSet:
    """The ordered context for one test input."""

    test_id: str
    demo_ids: tuple[str, ...]
    provenance: str = "raw"  # "raw" | "lpr_filtered" | "global_filtered"

    def __post_init__(self):
        if len(set(self.demo_ids)) != len(self.demo_ids):
            raise ValueError("demonstration ids must be distinct")
        if self.test_id and self.test_id in self.demo_ids:
            raise ValueError("test input cannot appear among its own demonstrations")


def select_random(pool: Dataset, cfg: SelectorConfig, test_id: str = "") -> DemonstrationSet:
    """K distinct pool ids, uniform without replacement, seeded per test input."""
    ids = sorted(pool.ids())
    if test_id:
        ids = [i for i in ids if i != test_id]
    if len(ids) < cfg.K:
        raise PoolTooSmall(f"need {cfg.K} demonstrations but pool holds {len(ids)}")
    rng = random.Random(f"{cfg.seed}|{test_id}")
    return DemonstrationSet(test_id, tuple(rng.sample(ids, cfg.K)), provenance="raw")


def select_topk(
    pool: Dataset, index: NeighborIndex, test_input: Example, cfg: SelectorConfig
) -> DemonstrationSet:
    """The K pool items most similar to the test input; ties by ascending id."""
    if len(pool) < cfg.K:
        raise PoolTooSmall(f"need {cfg.K} demonstrations but pool holds {len(pool)}")
    try:
        query = index.vector(test_input.id)
    except UnknownId:
        raise MissingEmbedding(test_input.id) from None
    hits = index.query_vector(query, cfg.K, exclude={test_input.id})
    return DemonstrationSet(test_input.id, tuple(h[0] for h in hits), provenance="raw")


@dataclass(frozen=True)
class DppKernel:
    """Symmetric PSD similarity kernel over a candidate list."""

    item_ids: tuple[str, ...]
    L: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        L = np.asarray(self.L, dtype=np.float64)
        object.__setattr__(self, "L", L)
        if L.shape != (len(self.item_ids), len(self.item_ids)):
            raise ValueError(f"kernel shape {L.shape} does not match {len(self.item_ids)} items")
        if not np.allclose(L, L.T, atol=1e-9):
            raise KernelNotPsd("kernel is not symmetric")
        if np.any(np.diag(L) < 0):
            raise KernelNotPsd("kernel has negative diagonal entries")


def build_dpp_kernel(emb, candidate_ids, quality: dict[str, float] | None = None) -> DppKernel:
    """L = diag(q) . Gram(unit embeddings) . diag(q); jitter added only if needed.

    Candidates are ordered by ascending id so that all downstream argmax
    tie-breaks resolve to the smallest id.
    """
    ordered = sorted(candidate_ids)
    row_of = emb.row_of()
    missing = [i for i in ordered if i not in row_of]
    if missing:
        raise MissingEmbedding(missing[0])
    vectors = emb.vectors[[row_of[i] for i in ordered]]
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise MissingEmbedding(ordered[int(np.argmin(norms))])
    unit = vectors / norms
    gram = unit @ unit.T
    q = np.ones(len(ordered))
    if quality is not None:
        q = np.array([float(quality.get(i, 1.0)) for i in ordered])
    L = (q[:, None] * gram) * q[None, :]
    L = (L + L.T) / 2.0
    jitter = 0.0
    min_eig = float(np.linalg.eigvalsh(L).min())
    if min_eig < _EIG_TOLERANCE:
        L = L + JITTER * np.eye(len(ordered))
        jitter = JITTER
        if float(np.linalg.eigvalsh(L).min()) < _EIG_TOLERANCE:
            raise KernelNotPsd(f"kernel not PSD even after {JITTER} jitter (min eig {min_eig})")
    return DppKernel(tuple(ordered), L, jitter=jitter)


def greedy_map_logdet(kernel: DppKernel, K: int, return_gains: bool = False):
    """Greedy MAP for a DPP: repeatedly add the item with the largest
    log-det gain, tracked by incremental Cholesky updates.

    Returns ids in selection order; with return_gains=True also the log-det
    gain of each step. Raises NumericalBreakdown if forced onto a
    non-positive pivot before K items are chosen.
    """
    M = len(kernel.item_ids)
    if K > M:
        raise PoolTooSmall(f"cannot pick {K} items from a kernel of {M}")
    L = kernel.L
    cis = np.zeros((K, M))
    di2s = np.array(np.diag(L), dtype=np.float64)
    selected: list[int] = []
    gains: list[float] = []
    remaining = np.ones(M, dtype=bool)
    while len(selected) < K:
        masked = np.where(remaining, di2s, -np.inf)
        j = int(np.argmax(masked))  # first max = smallest id, items are id-sorted
        if masked[j] <= _PIVOT_FLOOR:
            raise NumericalBreakdown(
                f"non-positive log-det pivot at step {len(selected) + 1} "
                f"(best remaining gain {masked[j]:.3e})"
            )
        gains.append(math.log(di2s[j]))
        step = len(selected)
        dj = math.sqrt(di2s[j])
        eis = (L[j, :] - cis[:step, j] @ cis[:step, :]) / dj
        cis[step, :] = eis
        di2s = di2s - eis**2
        remaining[j] = False
        selected.append(j)
    ids = [kernel.item_ids[j] for j in selected]
    if return_gains:
        return ids, gains
    return ids


def select_dpp(
    pool: Dataset, index: NeighborIndex, test_input: Example, cfg: SelectorConfig
) -> DemonstrationSet:
    """Greedy MAP over a kernel of the top-M candidates nearest the test input."""
    if len(pool) < cfg.K:
        raise PoolTooSmall(f"need {cfg.K} demonstrations but pool holds {len(pool)}")
    try:
        query = index.vector(test_input.id)
    except UnknownId:
        raise MissingEmbedding(test_input.id) from None
    available = len([i for i in index.pool_ids if i != test_input.id])
    m = max(cfg.K, min(cfg.candidate_pool_size, available))
    hits = index.query_vector(query, m, exclude={test_input.id})
    candidate_ids = [h[0] for h in hits]
    kernel = build_dpp_kernel(index.matrix, candidate_ids)
    chosen = greedy_map_logdet(kernel, cfg.K)
    return DemonstrationSet(test_input.id, tuple(chosen), provenance="raw")
