"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class IclForgeError(Exception):
    """Base class for all library errors."""


# --- corpus ---------------------------------------------------------------

class ParseError(IclForgeError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class DuplicateId(IclForgeError):
    def __init__(self, example_id: str):
        super().__init__(f"duplicate example id {example_id!r}")
        self.example_id = example_id


class EmptyField(IclForgeError):
    pass


class DonorTooSmall(IclForgeError):
    pass


class SameTask(IclForgeError):
    pass


class MissingCorruption(IclForgeError):
    def __init__(self, example_id: str):
        super().__init__(f"no corrupted output provided for sampled id {example_id!r}")
        self.example_id = example_id


class EmptyDataset(IclForgeError):
    pass


# --- embedding space ------------------------------------------------------

class DimensionMismatch(IclForgeError):
    pass


class ZeroVector(IclForgeError):
    pass


class EmptyMatrix(IclForgeError):
    pass


class UnknownId(IclForgeError):
    def __init__(self, example_id: str):
        super().__init__(f"id {example_id!r} not present in the index")
        self.example_id = example_id


class NotEnoughNeighbors(IclForgeError):
    pass


class UnfittedParams(IclForgeError):
    pass


# --- scoring ----------------------------------------------------------------

class EmptyLogProbs(IclForgeError):
    pass


class BackendUnavailable(IclForgeError):
    """Transport-level failure; retriable."""


class ProtocolError(IclForgeError):
    """Malformed or incomplete backend response; not retriable."""


class ContextOverflow(IclForgeError):
    pass


class PartialFailure(IclForgeError):
    """Some ids could not be scored after bounded retries.

    Carries the ids that failed and the scores that did succeed so callers
    can decide whether to continue with a partial result.
    """

    def __init__(self, failed_ids: list[str], scores: dict | None = None):
        super().__init__(f"failed to score {len(failed_ids)} id(s): {sorted(failed_ids)}")
        self.failed_ids = list(failed_ids)
        self.scores = scores or {}


class MissingScore(IclForgeError):
    def __init__(self, missing_ids: list[str]):
        super().__init__(f"missing perplexity scores for: {sorted(missing_ids)}")
        self.missing_ids = list(missing_ids)


# --- selectors / lpr --------------------------------------------------------

class PoolTooSmall(IclForgeError):
    pass


class MissingEmbedding(IclForgeError):
    def __init__(self, example_id: str):
        super().__init__(f"no embedding available for id {example_id!r}")
        self.example_id = example_id


class KernelNotPsd(IclForgeError):
    pass


class NumericalBreakdown(IclForgeError):
    pass


class MissingLabel(IclForgeError):
    def __init__(self, example_id: str):
        super().__init__(f"no class label available for id {example_id!r}")
        self.example_id = example_id


# --- evaluation -------------------------------------------------------------

class UnresolvedId(IclForgeError):
    def __init__(self, example_id: str):
        super().__init__(f"demonstration id {example_id!r} cannot be resolved in the pool")
        self.example_id = example_id


class NoReferences(IclForgeError):
    pass


class EvalRunFailure(IclForgeError):
    """Raised when more than the tolerated fraction of test examples error out."""
