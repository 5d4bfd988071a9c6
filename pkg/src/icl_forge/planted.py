"""Synthetic clustered corpora with a planted perplexity model.

Items live in tight Gaussian clusters on the unit sphere, so nearest
neighbors stay within a cluster. Each cluster gets its own base perplexity;
corrupted items score the base plus a fixed shift (plus per-item noise).
This gives a fully model-free world where the right answers are known,
used by the test suite, the benchmark command, and the demo scripts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, Example, NoiseSpec, round_half_up
from .embedspace import EmbeddingMatrix
from .scoring import SyntheticScorerModel


@dataclass(frozen=True)
class PlantedCorpus:
    pool: Dataset
    test: Dataset
    emb: EmbeddingMatrix  # pool plus test ids
    cluster_of: dict[str, str]
    scorer: SyntheticScorerModel
    noisy_ids: frozenset[str]

    @property
    def noise_rate(self) -> float:
        return len(self.noisy_ids) / len(self.pool)


def make_planted_corpus(
    n_clusters: int = 20,
    per_cluster: int = 50,
    dim: int = 16,
    base_range: tuple[float, float] = (5.0, 15.0),
    bases: list[float] | None = None,
    noise_shift: float = 3.0,
    sigma: float = 0.5,
    noise_rate: float = 0.4,
    n_test: int = 10,
    seed: int = 0,
    center_scale: float = 10.0,
    spread: float = 0.5,
) -> PlantedCorpus:
    """Build a pool of n_clusters x per_cluster items plus test queries.

    `bases` overrides the per-cluster draw from base_range. Embeddings are
    independent of the injected corruption, mirroring input-side similarity.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, dim)) * center_scale
    cluster_names = [f"c{ci:02d}" for ci in range(n_clusters)]
    if bases is None:
        drawn = rng.uniform(base_range[0], base_range[1], size=n_clusters)
        cluster_base = {cluster_names[i]: float(drawn[i]) for i in range(n_clusters)}
    else:
        if len(bases) != n_clusters:
            raise ValueError(f"need {n_clusters} bases, got {len(bases)}")
        cluster_base = {cluster_names[i]: float(bases[i]) for i in range(n_clusters)}

    ids: list[str] = []
    vectors: list[np.ndarray] = []
    cluster_of: dict[str, str] = {}
    pool_examples: list[Example] = []
    for ci in range(n_clusters):
        for j in range(per_cluster):
            ex_id = f"c{ci:02d}x{j:03d}"
            ids.append(ex_id)
            vectors.append(centers[ci] + rng.normal(size=dim) * spread)
            cluster_of[ex_id] = cluster_names[ci]
            pool_examples.append(
                Example(
                    id=ex_id,
                    task="planted",
                    input_text=f"query {ci}-{j}",
                    output_text=f"answer {ci}-{j}",
                )
            )

    n_pool = n_clusters * per_cluster
    n_noisy = round_half_up(noise_rate * n_pool)
    noisy = frozenset(rng.choice(sorted(cluster_of), size=n_noisy, replace=False).tolist())
    flagged = []
    for ex in pool_examples:
        is_noisy = ex.id in noisy
        out = f"wrong {ex.id}" if is_noisy else ex.output_text
        flagged.append(
            Example(ex.id, ex.task, ex.input_text, out, is_noisy=is_noisy)
        )
    spec = NoiseSpec(kind="irrelevant", rate=noise_rate, seed=seed, donor_task="planted-donor")
    pool = Dataset(tuple(flagged), split="pool", noise_spec=spec if n_noisy else None)

    test_examples: list[Example] = []
    for t in range(n_test):
        ci = t % n_clusters
        ex_id = f"t{t:03d}"
        ids.append(ex_id)
        vectors.append(centers[ci] + rng.normal(size=dim) * spread)
        cluster_of[ex_id] = cluster_names[ci]
        test_examples.append(
            Example(
                id=ex_id,
                task="planted",
                input_text=f"test query {t}",
                output_text=f"test answer {t}",
            )
        )
    test = Dataset(tuple(test_examples), split="test")

    emb = EmbeddingMatrix(tuple(ids), np.array(vectors)).normalize()
    scorer = SyntheticScorerModel(
        cluster_base=cluster_base,
        noise_shift=noise_shift,
        sigma=sigma,
        seed=seed,
        cluster_of=cluster_of,
        noisy_ids=noisy,
    )
    return PlantedCorpus(pool, test, emb, cluster_of, scorer, noisy)
