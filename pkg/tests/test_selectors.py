import math

import numpy as np
import pytest

from icl_forge.embedspace import EmbeddingMatrix, build_index, cosine_similarity
from icl_forge.errors import MissingEmbedding, NumericalBreakdown, PoolTooSmall
from icl_forge.selectors import (
    DppKernel,
    SelectorConfig,
    build_dpp_kernel,
    greedy_map_logdet,
    select_dpp,
    select_random,
    select_topk,
)

from conftest import make_dataset, make_example, random_embeddings


def naive_greedy_map(L: np.ndarray, ids, K: int):
    """Step-wise exhaustive argmax of the log-det gain; the test oracle."""
    chosen: list[int] = []
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    gains = []
    for _ in range(K):
        best, best_gain = None, -math.inf
        for i in order:
            if i in chosen:
                continue
            trial = chosen + [i]
            sign, logdet = np.linalg.slogdet(L[np.ix_(trial, trial)])
            if sign <= 0:
                continue
            if chosen:
                _, base = np.linalg.slogdet(L[np.ix_(chosen, chosen)])
                gain = logdet - base
            else:
                gain = logdet
            if gain > best_gain + 1e-12:
                best, best_gain = i, gain
        if best is None:
            raise NumericalBreakdown("oracle ran out of positive-gain items")
        chosen.append(best)
        gains.append(best_gain)
    return [ids[i] for i in chosen], gains


def random_psd_kernel(m: int, seed: int, rank: int | None = None):
    rng = np.random.default_rng(seed)
    rank = rank or m
    A = rng.normal(size=(m, rank))
    L = A @ A.T / rank + 0.1 * np.eye(m)
    ids = tuple(f"i{j:02d}" for j in range(m))
    return DppKernel(ids, L)


class TestSelectRandom:
    def test_whole_pool_is_seeded_shuffle(self):
        pool = make_dataset(6)
        cfg = SelectorConfig(method="random", K=6, candidate_pool_size=6, seed=3)
        out = select_random(pool, cfg)
        assert sorted(out.demo_ids) == pool.ids()

    def test_same_seed_identical(self):
        pool = make_dataset(30)
        cfg = SelectorConfig(method="random", K=5, candidate_pool_size=10, seed=9)
        assert select_random(pool, cfg, "t").demo_ids == select_random(pool, cfg, "t").demo_ids

    def test_distinct_and_excludes_test_id(self):
        pool = make_dataset(10)
        cfg = SelectorConfig(method="random", K=9, candidate_pool_size=9, seed=0)
        out = select_random(pool, cfg, test_id="q00003")
        assert len(set(out.demo_ids)) == 9
        assert "q00003" not in out.demo_ids

    def test_pool_too_small(self):
        with pytest.raises(PoolTooSmall):
            select_random(make_dataset(3), SelectorConfig(method="random", K=4, candidate_pool_size=4, seed=0))

    def test_empirical_uniformity(self):
        # 1e5 seeded draws of K=1 from 10 ids: each within 3 sigma of 1e4
        pool = make_dataset(10)
        counts = {i: 0 for i in pool.ids()}
        n = 100_000
        for s in range(n):
            cfg = SelectorConfig(method="random", K=1, candidate_pool_size=1, seed=s)
            counts[select_random(pool, cfg).demo_ids[0]] += 1
        sigma = math.sqrt(n * 0.1 * 0.9)
        for ex_id, c in counts.items():
            assert abs(c - n / 10) <= 3 * sigma, (ex_id, c)


class TestSelectTopk:
    def pool_with_embeddings(self, n=20, dim=8, seed=0):
        pool = make_dataset(n)
        ids = pool.ids() + ["test-q"]
        emb = random_embeddings(ids, dim, seed=seed)
        return pool, emb

    def test_exact_duplicate_ranks_first(self):
        pool = make_dataset(5)
        rows = np.vstack([np.eye(5), np.eye(5)[2:3]])  # test input equals q00002
        emb = EmbeddingMatrix(tuple(pool.ids() + ["test-q"]), rows)
        index = build_index(emb, pool_ids=pool.ids())
        test_ex = make_example("test-q")
        out = select_topk(pool, index, test_ex, SelectorConfig(K=2, candidate_pool_size=2, seed=0))
        assert out.demo_ids[0] == "q00002"

    def test_returns_k_items(self):
        pool, emb = self.pool_with_embeddings()
        index = build_index(emb, pool_ids=pool.ids())
        out = select_topk(pool, index, make_example("test-q"), SelectorConfig(K=8, candidate_pool_size=8, seed=0))
        assert len(out.demo_ids) == 8

    def test_missing_embedding(self):
        pool, emb = self.pool_with_embeddings()
        index = build_index(emb, pool_ids=pool.ids())
        with pytest.raises(MissingEmbedding):
            select_topk(pool, index, make_example("not-embedded"), SelectorConfig(K=2, candidate_pool_size=2, seed=0))

    def test_agreement_with_brute_force_scan(self):
        pool = make_dataset(500)
        queries = [f"t{i}" for i in range(20)]
        emb = random_embeddings(pool.ids() + queries, 16, seed=4)
        index = build_index(emb, pool_ids=pool.ids())
        cfg = SelectorConfig(K=8, candidate_pool_size=8, seed=0)
        row_of = emb.row_of()
        for q in queries:
            got = select_topk(pool, index, make_example(q), cfg).demo_ids
            sims = [
                (-cosine_similarity(emb.vectors[row_of[p]], emb.vectors[row_of[q]]), p)
                for p in pool.ids()
            ]
            sims.sort()
            assert list(got) == [p for _, p in sims[:8]]

    def test_permutation_invariance(self):
        pool = make_dataset(50)
        emb = random_embeddings(pool.ids() + ["t"], 8, seed=5)
        index = build_index(emb, pool_ids=pool.ids())
        shuffled = make_dataset(50)
        shuffled = type(pool)(tuple(reversed(shuffled.examples)), split="pool")
        cfg = SelectorConfig(K=5, candidate_pool_size=5, seed=0)
        a = select_topk(pool, index, make_example("t"), cfg).demo_ids
        b = select_topk(shuffled, index, make_example("t"), cfg).demo_ids
        assert a == b


class TestDppKernel:
    def test_orthonormal_gives_identity(self):
        emb = EmbeddingMatrix(("a", "b", "c"), np.eye(3))
        kernel = build_dpp_kernel(emb, ["a", "b", "c"])
        assert np.allclose(kernel.L, np.eye(3), atol=1e-12)
        assert kernel.jitter == 0.0

    def test_duplicates_kill_diversity(self):
        rows = np.array([[1.0, 0.0], [1.0, 0.0]])
        emb = EmbeddingMatrix(("a", "b"), rows)
        kernel = build_dpp_kernel(emb, ["a", "b"])
        assert np.allclose(kernel.L, np.ones((2, 2)), atol=1e-9)
        assert abs(np.linalg.det(kernel.L)) < 1e-9

    def test_matches_direct_gram(self):
        rng = np.random.default_rng(11)
        rows = rng.normal(size=(4, 6))
        emb = EmbeddingMatrix(("a", "b", "c", "d"), rows)
        kernel = build_dpp_kernel(emb, ["a", "b", "c", "d"])
        unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        assert np.allclose(kernel.L, unit @ unit.T, atol=1e-12)

    def test_quality_weights(self):
        emb = EmbeddingMatrix(("a", "b"), np.eye(2))
        kernel = build_dpp_kernel(emb, ["a", "b"], quality={"a": 2.0, "b": 3.0})
        assert np.allclose(np.diag(kernel.L), [4.0, 9.0])

    def test_missing_embedding(self):
        emb = EmbeddingMatrix(("a",), np.eye(1))
        with pytest.raises(MissingEmbedding):
            build_dpp_kernel(emb, ["a", "zz"])


class TestGreedyMap:
    def test_k1_is_diagonal_argmax(self):
        kernel = DppKernel(("a", "b", "c"), np.diag([2.0, 5.0, 1.0]))
        assert greedy_map_logdet(kernel, 1) == ["b"]

    def test_independent_gains_pick_by_magnitude(self):
        kernel = DppKernel(("x", "y", "z"), np.diag([3.0, 2.0, 1.0]))
        assert greedy_map_logdet(kernel, 2) == ["x", "y"]

    def test_identity_kernel_breaks_ties_by_id(self):
        ids = ("m3", "m1", "m4", "m2")
        kernel = build_dpp_kernel(EmbeddingMatrix(ids, np.eye(4)), list(ids))
        assert greedy_map_logdet(kernel, 3) == ["m1", "m2", "m3"]

    def test_duplicate_pair_never_selected_together(self):
        rows = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        emb = EmbeddingMatrix(("dup1", "dup2", "other1", "other2"), rows)
        kernel = build_dpp_kernel(emb, ["dup1", "dup2", "other1", "other2"])
        chosen = greedy_map_logdet(kernel, 3)
        assert not {"dup1", "dup2"} <= set(chosen)

    def test_forced_rank_deficiency_breaks_down(self):
        rows = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        emb = EmbeddingMatrix(("a", "b", "c"), rows)
        kernel = build_dpp_kernel(emb, ["a", "b", "c"])
        with pytest.raises(NumericalBreakdown):
            greedy_map_logdet(kernel, 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_recomputation(self, seed):
        kernel = random_psd_kernel(8, seed)
        got, gains = greedy_map_logdet(kernel, 4, return_gains=True)
        want, want_gains = naive_greedy_map(kernel.L, list(kernel.item_ids), 4)
        assert got == want
        assert gains == pytest.approx(want_gains, abs=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_gains_non_increasing(self, seed):
        kernel = random_psd_kernel(10, seed + 50)
        _, gains = greedy_map_logdet(kernel, 6, return_gains=True)
        assert all(b <= a + 1e-9 for a, b in zip(gains, gains[1:]))


class TestSelectDpp:
    def test_trajectory_equals_oracle(self):
        pool = make_dataset(10)
        emb = random_embeddings(pool.ids() + ["t"], 6, seed=21)
        index = build_index(emb, pool_ids=pool.ids())
        cfg = SelectorConfig(method="dpp", K=3, candidate_pool_size=10, seed=0)
        got = select_dpp(pool, index, make_example("t"), cfg)
        kernel = build_dpp_kernel(index.matrix, pool.ids())
        want, _ = naive_greedy_map(kernel.L, list(kernel.item_ids), 3)
        assert list(got.demo_ids) == want

    def test_never_returns_test_id(self):
        pool = make_dataset(12)
        emb = random_embeddings(pool.ids() + ["t"], 6, seed=22)
        index = build_index(emb, pool_ids=pool.ids())
        cfg = SelectorConfig(method="dpp", K=4, candidate_pool_size=8, seed=0)
        out = select_dpp(pool, index, make_example("t"), cfg)
        assert "t" not in out.demo_ids
        assert len(set(out.demo_ids)) == 4
