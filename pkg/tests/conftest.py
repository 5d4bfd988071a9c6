import numpy as np
import pytest

from icl_forge.corpus import Dataset, Example
from icl_forge.embedspace import EmbeddingMatrix


def make_example(ex_id: str, task: str = "qa", inp: str | None = None, out: str | None = None, **kw) -> Example:
    return Example(
        id=ex_id,
        task=task,
        input_text=inp if inp is not None else f"question {ex_id}",
        output_text=out if out is not None else f"answer {ex_id}",
        **kw,
    )


def make_dataset(n: int, task: str = "qa", prefix: str = "q", split: str = "pool") -> Dataset:
    return Dataset(tuple(make_example(f"{prefix}{i:05d}", task=task) for i in range(n)), split=split)


def random_embeddings(ids, dim: int, seed: int = 0) -> EmbeddingMatrix:
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(tuple(ids), rng.normal(size=(len(ids), dim)))


@pytest.fixture
def tiny_pool():
    return make_dataset(12)
