"""Annotated example pools: JSONL ingestion, validation, splitting, noise simulation.

A pool is a set of (input, output) pairs with stable string ids. Noise
simulation either swaps outputs in from a donor pool of a different task
(irrelevant noise) or imports externally generated wrong-but-related outputs
from a file (relevant noise). Ground-truth noise flags are carried for
evaluation only; selection code never reads them.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    DonorTooSmall,
    DuplicateId,
    EmptyDataset,
    EmptyField,
    MissingCorruption,
    ParseError,
    SameTask,
)

JSONL_FIELDS = ("id", "task", "input", "output", "is_noisy", "meta")


@dataclass(frozen=True)
class Example:
    """One annotated input-output pair."""

    id: str
    task: str
    input_text: str
    output_text: str
    is_noisy: bool | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.id:
            raise EmptyField("example id must be non-empty")
        if not self.input_text:
            raise EmptyField(f"example {self.id!r}: input must be non-empty")
        if not self.output_text:
            raise EmptyField(f"example {self.id!r}: output must be non-empty")


@dataclass(frozen=True)
class NoiseSpec:
    """How to corrupt a pool: kind, fraction of examples, and the RNG seed."""

    kind: str  # "irrelevant" | "relevant_import"
    rate: float
    seed: int
    donor_task: str | None = None
    import_path: str | None = None

    def validate(self) -> None:
        if self.kind not in ("irrelevant", "relevant_import"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must be in [0, 1], got {self.rate}")
        if self.kind == "relevant_import" and not self.import_path:
            raise ValueError("relevant_import noise requires import_path")

    def summary(self) -> dict:
        out = {"kind": self.kind, "rate": self.rate, "seed": self.seed}
        if self.donor_task:
            out["donor_task"] = self.donor_task
        if self.import_path:
            out["import_path"] = str(self.import_path)
        return out


@dataclass(frozen=True)
class Dataset:
    """A validated list of examples plus its role (candidate pool or test split)."""

    examples: tuple[Example, ...]
    split: str = "pool"
    noise_spec: NoiseSpec | None = None

    def __post_init__(self):
        seen: set[str] = set()
        for ex in self.examples:
            ex.validate()
            if ex.id in seen:
                raise DuplicateId(ex.id)
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}

    def tasks(self) -> set[str]:
        return {ex.task for ex in self.examples}

    def noisy_count(self) -> int:
        return sum(1 for ex in self.examples if ex.is_noisy)

    def without_noise_flags(self) -> "Dataset":
        """Strip ground-truth flags so downstream selection cannot read them."""
        return Dataset(
            tuple(replace(ex, is_noisy=None) for ex in self.examples),
            split=self.split,
            noise_spec=self.noise_spec,
        )


def round_half_up(x: float) -> int:
    """round() with halves going up; a small nudge absorbs float error at .5."""
    return int(math.floor(x + 0.5 + 1e-9))


def _example_to_record(ex: Example) -> dict:
    rec = {"id": ex.id, "task": ex.task, "input": ex.input_text, "output": ex.output_text}
    if ex.is_noisy is not None:
        rec["is_noisy"] = ex.is_noisy
    if ex.meta:
        rec["meta"] = ex.meta
    return rec


def _record_to_example(rec: dict, path: str, line: int) -> Example:
    for key in ("id", "task", "input", "output"):
        if key not in rec:
            raise ParseError(f"missing field {key!r}", path=path, line=line)
    unknown = set(rec) - set(JSONL_FIELDS)
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", path=path, line=line)
    meta = rec.get("meta") or {}
    if not isinstance(meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
    ):
        raise ParseError("meta must be a string-to-string object", path=path, line=line)
    return Example(
        id=str(rec["id"]),
        task=str(rec["task"]),
        input_text=str(rec["input"]),
        output_text=str(rec["output"]),
        is_noisy=rec.get("is_noisy"),
        meta=dict(meta),
    )


def load_dataset(path: str | Path, format: str = "jsonl", split: str = "pool") -> Dataset:
    """Read a dataset from disk; only JSONL is supported.

    Raises ParseError with the offending line number on malformed records,
    DuplicateId on repeated ids, EmptyField on blank input/output.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    path = Path(path)
    examples: list[Example] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", path=str(path), line=lineno) from e
            if not isinstance(rec, dict):
                raise ParseError("record must be a JSON object", path=str(path), line=lineno)
            examples.append(_record_to_example(rec, str(path), lineno))
    return Dataset(tuple(examples), split=split)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write canonical JSONL: fixed key order, UTF-8, LF line endings."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset.examples:
            fh.write(json.dumps(_example_to_record(ex), ensure_ascii=False))
            fh.write("\n")


def inject_irrelevant_noise(pool: Dataset, donor: Dataset, spec: NoiseSpec) -> Dataset:
    """Replace a seeded sample of outputs with outputs drawn from a donor pool.

    Exactly round_half_up(rate * N) examples are corrupted. Donor outputs are
    drawn without replacement until the donor is exhausted, then with
    replacement. Inputs, ids, and tasks are never modified; every example in
    the result carries an explicit is_noisy flag.
    """
    spec.validate()
    if spec.kind != "irrelevant":
        raise ValueError(f"expected irrelevant noise spec, got {spec.kind!r}")
    donor_examples = sorted(donor.examples, key=lambda e: e.id)
    if spec.donor_task is not None:
        donor_examples = [e for e in donor_examples if e.task == spec.donor_task]
    if donor.tasks() & pool.tasks():
        raise SameTask(
            f"donor shares task(s) {sorted(donor.tasks() & pool.tasks())} with the pool"
        )
    donor_outputs = [e.output_text for e in donor_examples]
    if not donor_outputs:
        raise DonorTooSmall("donor pool has no usable outputs")

    n_noisy = round_half_up(spec.rate * len(pool))
    rng = random.Random(spec.seed)
    target_ids = set(rng.sample(sorted(pool.ids()), n_noisy))

    replacements = rng.sample(donor_outputs, min(n_noisy, len(donor_outputs)))
    if n_noisy > len(donor_outputs):
        replacements += rng.choices(donor_outputs, k=n_noisy - len(donor_outputs))

    corrupted: list[Example] = []
    it = iter(replacements)
    for ex in pool.examples:
        if ex.id in target_ids:
            corrupted.append(replace(ex, output_text=next(it), is_noisy=True))
        else:
            corrupted.append(replace(ex, is_noisy=False))
    return Dataset(tuple(corrupted), split=pool.split, noise_spec=spec)


def load_corruption_file(path: str | Path) -> dict[str, str]:
    """Read a relevant-noise import file: one {"id", "corrupted_output"} per line."""
    path = Path(path)
    table: dict[str, str] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", path=str(path), line=lineno) from e
            if "id" not in rec or "corrupted_output" not in rec:
                raise ParseError(
                    "record needs 'id' and 'corrupted_output'", path=str(path), line=lineno
                )
            table[str(rec["id"])] = str(rec["corrupted_output"])
    return table


def import_relevant_noise(pool: Dataset, spec: NoiseSpec) -> Dataset:
    """Replace a seeded sample of outputs with externally generated corruptions.

    The import file maps example id to the corrupted output. A sampled id
    missing from the file raises MissingCorruption naming that id.
    """
    spec.validate()
    if spec.kind != "relevant_import":
        raise ValueError(f"expected relevant_import noise spec, got {spec.kind!r}")
    table = load_corruption_file(spec.import_path)

    n_noisy = round_half_up(spec.rate * len(pool))
    rng = random.Random(spec.seed)
    target_ids = set(rng.sample(sorted(pool.ids()), n_noisy))
    for ex_id in sorted(target_ids):
        if ex_id not in table:
            raise MissingCorruption(ex_id)

    corrupted: list[Example] = []
    for ex in pool.examples:
        if ex.id in target_ids:
            corrupted.append(replace(ex, output_text=table[ex.id], is_noisy=True))
        else:
            corrupted.append(replace(ex, is_noisy=False))
    return Dataset(tuple(corrupted), split=pool.split, noise_spec=spec)


def split_pool(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministically split into disjoint (pool, test) datasets."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ids = sorted(dataset.ids())
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_test = round_half_up(test_fraction * len(ids))
    test_ids = set(ids[:n_test])
    by_id = dataset.by_id()
    pool_examples = tuple(ex for ex in dataset.examples if ex.id not in test_ids)
    test_examples = tuple(by_id[i] for i in ids[:n_test])
    return (
        Dataset(pool_examples, split="pool", noise_spec=dataset.noise_spec),
        Dataset(test_examples, split="test"),
    )
