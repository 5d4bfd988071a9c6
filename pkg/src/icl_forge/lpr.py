"""Local perplexity ranking: flag candidates that score high within their
nearest-neighbor cluster and substitute clean neighbors.

Semantically close examples share a base perplexity level, so ranking a
candidate against its own neighbors isolates the part of its score caused by
a mismatched output. A candidate whose within-cluster rank fraction meets the
threshold is replaced by its nearest unflagged neighbor. A global-ranking
baseline (lowest perplexity out of a large candidate set) and a label-majority
variant for classification pools live here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .corpus import Dataset, Example
from .embedspace import NeighborCluster, NeighborIndex, cosine_similarity
from .errors import (
    MissingEmbedding,
    MissingLabel,
    MissingScore,
    PartialFailure,
    UnknownId,
)
from .scoring import PerplexityScore, ScoreCache, ScorerBackend, batch_score
from .selectors import DemonstrationSet, SelectorConfig


@dataclass(frozen=True)
class LprConfig:
    k: int = 4  # neighbors per cluster
    gamma: float = 0.5  # rank-fraction threshold for flagging
    rank_base: str = "zero_based"  # or "one_based"
    similarity: str = "cosine"  # or "bm25"
    reorder: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.rank_base not in ("zero_based", "one_based"):
            raise ValueError(f"unknown rank_base {self.rank_base!r}")
        if self.similarity not in ("cosine", "bm25"):
            raise ValueError(f"unknown similarity {self.similarity!r}")


@dataclass(frozen=True)
class RankList:
    """Perplexity ranking of a candidate together with its k neighbors.

    sorted_ids orders the cluster by ascending perplexity with ties broken
    by ascending id. loc holds competition ranks: the number of members with
    strictly smaller perplexity, so fully tied members all sit at the rank of
    the first tied position and a flat cluster flags nobody.
    """

    cluster_ids: tuple[str, ...]
    sorted_ids: tuple[str, ...]
    loc: dict[str, int]

    def __post_init__(self):
        if sorted(self.cluster_ids) != sorted(self.sorted_ids):
            raise ValueError("sorted_ids must be a permutation of cluster_ids")


@dataclass(frozen=True)
class SubstitutionRecord:
    original_id: str
    replacement_id: str | None
    flag: bool
    rank_fraction: float
    note: str | None = None

    def to_json(self) -> dict:
        rec = {
            "original_id": self.original_id,
            "replacement_id": self.replacement_id,
            "flag": self.flag,
            "rank_fraction": round(self.rank_fraction, 6),
        }
        if self.note:
            rec["note"] = self.note
        return rec


def local_rank(
    candidate_id: str,
    cluster: NeighborCluster,
    scores: Mapping[str, PerplexityScore],
) -> RankList:
    """Rank the candidate and its neighbors by ascending perplexity."""
    members = cluster.member_ids()
    missing = [m for m in members if m not in scores]
    if missing:
        raise MissingScore(missing)
    ordered = sorted(members, key=lambda m: (scores[m].perplexity, m))
    loc = {
        m: sum(1 for other in members if scores[other].perplexity < scores[m].perplexity)
        for m in members
    }
    return RankList(tuple(members), tuple(ordered), loc)


def rank_fraction(rank: RankList, member_id: str, cfg: LprConfig) -> float:
    size = len(rank.cluster_ids)
    position = rank.loc[member_id]
    if cfg.rank_base == "one_based":
        position += 1
    return position / size


def flag_candidate(rank: RankList, candidate_id: str, cfg: LprConfig) -> bool:
    """True when the candidate's rank fraction within its cluster meets gamma."""
    if candidate_id not in rank.loc:
        raise MissingScore([candidate_id])
    return rank_fraction(rank, candidate_id, cfg) >= cfg.gamma


def substitute(
    candidate_id: str,
    cluster: NeighborCluster,
    flags: Mapping[str, bool],
    taken: set[str] | None = None,
    rank_frac: float = 0.0,
) -> SubstitutionRecord:
    """Pick the nearest unflagged neighbor not already in use; else keep.

    Neighbors are tried in ascending-distance order. `taken` holds ids already
    present in the demonstration set under construction so two flagged
    candidates never converge on the same substitute.
    """
    if not flags.get(candidate_id, False):
        return SubstitutionRecord(candidate_id, None, flag=False, rank_fraction=rank_frac)
    taken = taken if taken is not None else set()
    for neighbor in cluster.neighbor_ids:
        if flags.get(neighbor, True):
            continue
        if neighbor in taken:
            continue
        return SubstitutionRecord(candidate_id, neighbor, flag=True, rank_fraction=rank_frac)
    return SubstitutionRecord(
        candidate_id, None, flag=True, rank_fraction=rank_frac, note="no clean neighbor available"
    )


def _flag_members(
    member_ids,
    member_clusters: Mapping[str, NeighborCluster],
    scores: Mapping[str, PerplexityScore],
    cfg: LprConfig,
    flag_memo: dict[str, tuple[bool, float]],
) -> None:
    """Flag each member against its own cluster, memoized per run."""
    for member in member_ids:
        if member in flag_memo:
            continue
        rank = local_rank(member, member_clusters[member], scores)
        flag_memo[member] = (
            flag_candidate(rank, member, cfg),
            rank_fraction(rank, member, cfg),
        )


def lpr_filter(
    raw: DemonstrationSet,
    pool: Dataset,
    neighbor_source,
    scores_backend: ScorerBackend,
    cfg: LprConfig,
    *,
    cache: ScoreCache | None = None,
    test_vector: np.ndarray | None = None,
    index_for_reorder: NeighborIndex | None = None,
    parallelism: int = 4,
) -> tuple[DemonstrationSet, list[SubstitutionRecord]]:
    """Run the full filter over one selected demonstration set.

    For every candidate: fetch its neighbor cluster, score the cluster (and
    each neighbor's own cluster, since flags are per-example), flag by rank
    fraction, and substitute flagged candidates with their nearest unflagged
    neighbor. Scoring is deduplicated through the cache. With cfg.reorder the
    surviving set is ordered by ascending similarity to the test input, which
    requires its embedding.
    """
    by_id = pool.by_id()
    k = cfg.k

    # one cluster per candidate, then one per cluster member for their flags
    clusters: dict[str, NeighborCluster] = {}
    score_ids: set[str] = set()
    member_cluster_ids: set[str] = set()
    for cand in raw.demo_ids:
        cluster = neighbor_source.neighbors(cand, k)
        clusters[cand] = cluster
        member_cluster_ids.update(cluster.member_ids())
    member_clusters: dict[str, NeighborCluster] = dict(clusters)
    for member in sorted(member_cluster_ids):
        if member not in member_clusters:
            member_clusters[member] = neighbor_source.neighbors(member, k)
    for cluster in member_clusters.values():
        score_ids.update(cluster.member_ids())

    def resolve(ex_id: str) -> Example:
        try:
            return by_id[ex_id]
        except KeyError:
            raise MissingScore([ex_id]) from None

    failed: set[str] = set()
    try:
        scores = batch_score(
            scores_backend,
            [resolve(i) for i in sorted(score_ids)],
            cache=cache,
            parallelism=parallelism,
        )
    except PartialFailure as e:
        scores = dict(e.scores)
        failed = set(e.failed_ids)

    flag_memo: dict[str, tuple[bool, float]] = {}
    records: list[SubstitutionRecord] = []
    final_ids = list(raw.demo_ids)
    taken = set(final_ids)
    for pos, cand in enumerate(raw.demo_ids):
        cluster = clusters[cand]
        needed = set(cluster.member_ids())
        for member in cluster.member_ids():
            needed.update(member_clusters[member].member_ids())
        if needed & failed:
            records.append(
                SubstitutionRecord(cand, None, flag=False, rank_fraction=0.0, note="scoring failed")
            )
            continue
        _flag_members(cluster.member_ids(), member_clusters, scores, cfg, flag_memo)
        flags = {m: flag_memo[m][0] for m in cluster.member_ids()}
        record = substitute(
            cand, cluster, flags, taken=taken, rank_frac=flag_memo[cand][1]
        )
        records.append(record)
        if record.replacement_id is not None:
            taken.discard(cand)
            taken.add(record.replacement_id)
            final_ids[pos] = record.replacement_id

    if cfg.reorder:
        vec_source = index_for_reorder
        if vec_source is None and hasattr(neighbor_source, "vector"):
            vec_source = neighbor_source
        if vec_source is None:
            raise MissingEmbedding(raw.test_id or "<test input>")
        if test_vector is None:
            try:
                test_vector = vec_source.vector(raw.test_id)
            except UnknownId:
                raise MissingEmbedding(raw.test_id) from None
        final_ids = _order_by_similarity(final_ids, test_vector, vec_source)

    filtered = DemonstrationSet(raw.test_id, tuple(final_ids), provenance="lpr_filtered")
    return filtered, records


def _order_by_similarity(ids: list[str], test_vector: np.ndarray, index) -> list[str]:
    sims = {i: cosine_similarity(index.vector(i), test_vector) for i in ids}
    return sorted(ids, key=lambda i: sims[i])  # stable: equal sims keep order


def reorder_by_similarity(demos: DemonstrationSet, test_input: Example, emb) -> DemonstrationSet:
    """Stable sort of the set by ascending similarity to the test input,
    putting the most similar demonstration adjacent to the query."""
    row_of = emb.row_of()
    for needed in (test_input.id, *demos.demo_ids):
        if needed not in row_of:
            raise MissingEmbedding(needed)
    test_vector = emb.vectors[row_of[test_input.id]]
    sims = {
        i: cosine_similarity(emb.vectors[row_of[i]], test_vector) for i in demos.demo_ids
    }
    ordered = sorted(demos.demo_ids, key=lambda i: sims[i])
    return DemonstrationSet(demos.test_id, tuple(ordered), provenance=demos.provenance)


def global_rank_filter(
    pool: Dataset,
    test_input: Example,
    scores: Mapping[str, PerplexityScore],
    cfg: SelectorConfig,
) -> DemonstrationSet:
    """Baseline: keep the K cheapest-perplexity items of a pre-filtered
    candidate set (the keys of `scores`); ties broken by ascending id."""
    candidates = [i for i in scores if i != test_input.id]
    if len(candidates) < cfg.K:
        raise MissingScore(
            [f"<need {cfg.K} scored candidates, have {len(candidates)}>"]
        )
    ordered = sorted(candidates, key=lambda i: (scores[i].perplexity, i))
    return DemonstrationSet(
        test_input.id, tuple(ordered[: cfg.K]), provenance="global_filtered"
    )


def label_agreement_filter(
    raw: DemonstrationSet,
    neighbor_source,
    labels: Mapping[str, str],
    cfg: LprConfig,
) -> tuple[DemonstrationSet, list[SubstitutionRecord]]:
    """Classification variant: flag a candidate whose label disagrees with the
    unique majority label of its k neighbors (ties flag nothing); substitute
    like the perplexity path, where clean means majority-agreeing."""

    def member_flag(member: str, memo: dict[str, bool]) -> bool:
        if member in memo:
            return memo[member]
        if member not in labels:
            raise MissingLabel(member)
        cluster = neighbor_source.neighbors(member, cfg.k)
        counts: dict[str, int] = {}
        for n in cluster.neighbor_ids:
            if n not in labels:
                raise MissingLabel(n)
            counts[labels[n]] = counts.get(labels[n], 0) + 1
        top = max(counts.values())
        majority = [lab for lab, c in counts.items() if c == top]
        flagged = len(majority) == 1 and majority[0] != labels[member]
        memo[member] = flagged
        return flagged

    memo: dict[str, bool] = {}
    records: list[SubstitutionRecord] = []
    final_ids = list(raw.demo_ids)
    taken = set(final_ids)
    for pos, cand in enumerate(raw.demo_ids):
        cluster = neighbor_source.neighbors(cand, cfg.k)
        flags = {m: member_flag(m, memo) for m in cluster.member_ids()}
        record = substitute(cand, cluster, flags, taken=taken)
        records.append(record)
        if record.replacement_id is not None:
            taken.discard(cand)
            taken.add(record.replacement_id)
            final_ids[pos] = record.replacement_id
    return (
        DemonstrationSet(raw.test_id, tuple(final_ids), provenance="lpr_filtered"),
        records,
    )
