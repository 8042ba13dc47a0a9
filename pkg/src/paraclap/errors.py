"""Typed errors shared across the toolkit.

Every failure mode that callers are expected to handle gets its own class;
generic programming mistakes (wrong argument types and the like) stay
ordinary ValueError/TypeError.
"""

from __future__ import annotations


class ParaclapError(Exception):
    """Base class for all toolkit errors."""


# --- numeric kernels ---------------------------------------------------------


class ZeroNormRow(ParaclapError):
    """A row that must be normalized has (near-)zero L2 norm."""

    def __init__(self, row: int, norm: float = 0.0):
        self.row = row
        self.norm = norm
        super().__init__(f"row {row} has L2 norm {norm!r}, cannot normalize")


class DimMismatch(ParaclapError):
    """Two matrices that must share a dimension do not."""


class NonPositiveTau(ParaclapError):
    """Temperature must be strictly positive."""

    def __init__(self, tau: float):
        self.tau = tau
        super().__init__(f"temperature must be > 0, got {tau!r}")


# --- model / file formats ----------------------------------------------------


class InvalidDim(ParaclapError):
    """A layer or head dimension is not a positive integer."""


class IoError(ParaclapError):
    """Underlying OS-level read/write failure, wrapped for callers."""


class FormatError(ParaclapError):
    """A binary or JSON artifact on disk is structurally invalid."""

    def __init__(self, reason: str, offset: int | None = None):
        self.reason = reason
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"format error{where}: {reason}")


class VersionMismatch(ParaclapError):
    """An artifact was written by an incompatible format version."""


# --- datasets ----------------------------------------------------------------


class ParseError(ParaclapError):
    """A manifest line failed to parse or validate."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"manifest line {line}: {reason}")


class DuplicateId(ParaclapError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"duplicate item id {item_id!r}")


class DanglingRef(ParaclapError):
    """An item references a feature file or row that does not exist."""

    def __init__(self, item_id: str, detail: str):
        self.item_id = item_id
        self.detail = detail
        super().__init__(f"item {item_id!r}: dangling reference ({detail})")


class ShapeMismatch(ParaclapError):
    def __init__(self, file: str, detail: str):
        self.file = file
        self.detail = detail
        super().__init__(f"embedding file {file!r}: {detail}")


class MissingVariant(ParaclapError):
    def __init__(self, item_id: str, name: str):
        self.item_id = item_id
        self.name = name
        super().__init__(f"item {item_id!r} lacks required variant {name!r}")


class InvalidConfig(ParaclapError):
    """A generator or run configuration violates its invariants."""


# --- training ----------------------------------------------------------------


class ConfigError(ParaclapError):
    """A training config file or value is invalid."""


class NonFiniteLoss(ParaclapError):
    """Loss or gradient became NaN/Inf during optimization."""

    def __init__(self, step: int, snapshot: dict):
        self.step = step
        self.snapshot = snapshot
        super().__init__(f"non-finite loss at step {step}: {snapshot}")


# --- retrieval metrics -------------------------------------------------------


class EmptyRelevance(ParaclapError):
    def __init__(self, query: int):
        self.query = query
        super().__init__(f"query {query} has an empty relevant set")


# --- paraphrase pipeline -----------------------------------------------------


class EndpointError(ParaclapError):
    """The chat endpoint returned a non-retryable failure."""

    def __init__(self, status: int, detail: str = ""):
        self.status = status
        self.detail = detail
        super().__init__(f"chat endpoint failed with status {status}: {detail}")


class MalformedResponse(ParaclapError):
    """The model kept returning output we could not use, retries exhausted."""

    def __init__(self, retries: int, detail: str = ""):
        self.retries = retries
        self.detail = detail
        super().__init__(f"malformed response after {retries} retries: {detail}")


class UnparseableVerdict(ParaclapError):
    """A correction response carried none of the expected markers."""

    def __init__(self, raw: str):
        self.raw = raw
        super().__init__(f"could not parse correction verdict from: {raw[:200]!r}")


# --- annotation service ------------------------------------------------------


class ValidationError(ParaclapError):
    """Request body failed validation."""


class UnknownSession(ParaclapError):
    def __init__(self, session_id: str):
        self.session_id = session_id
        super().__init__(f"unknown session {session_id!r}")


class UnknownItem(ParaclapError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"unknown item {item_id!r}")


class DuplicateResponse(ParaclapError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"item {item_id!r} already has a response")


class OutOfRange(ParaclapError):
    """A response payload is outside the domain its mode allows."""
