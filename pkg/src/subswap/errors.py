"""Exception hierarchy with stable CLI exit codes.

Every failure surfaced by the library derives from :class:`SubswapError` and
carries a machine-readable ``label`` plus the exit code its class maps to:

* 2: invalid user-supplied values (config files, flags, argument domains)
* 3: filesystem and serialization failures
* 4: broken contracts between components (shapes, capabilities, banks)
* 5: numerical failures (non-finite values, diverging optimization)
"""

from __future__ import annotations


class SubswapError(Exception):
    """Base class for all library errors."""

    exit_code = 1
    label = "error"


class ConfigError(SubswapError):
    """A user-supplied value is invalid."""

    exit_code = 2
    label = "config"


class DomainError(ConfigError):
    """An argument is outside its documented domain."""

    label = "domain"


class SpanError(ConfigError):
    """A subject span is empty or out of bounds."""

    label = "span"


class LengthError(ConfigError):
    """A token substitution overflows the fixed prompt length."""

    label = "length"


class ScheduleError(ConfigError):
    """A noise schedule violates its monotonicity or range constraints."""

    label = "schedule"


class EmptyInputError(ConfigError):
    """An operation received an empty collection it cannot act on."""

    label = "empty-input"


class StorageError(SubswapError):
    """A filesystem or serialization operation failed."""

    exit_code = 3
    label = "io"


class CorruptionError(StorageError):
    """Stored artifacts are truncated or internally inconsistent."""

    label = "corruption"


class FormatVersionError(StorageError):
    """Stored artifacts use an unsupported format version."""

    label = "format-version"


class ContractError(SubswapError):
    """A precondition between components was violated."""

    exit_code = 4
    label = "contract"


class ShapeError(ContractError):
    """Tensor shapes are incompatible."""

    label = "shape"


class CapabilityError(ContractError):
    """The selected backend lacks a required capability."""

    label = "capability"


class BankIncompleteError(ContractError):
    """A required attention record is missing from the bank."""

    label = "bank-incomplete"


class DuplicateCaptureError(ContractError):
    """An attention record was captured twice under one key."""

    label = "duplicate-capture"


class IncompatibleResolutionError(ContractError):
    """Source and target attention operate at different resolutions."""

    label = "incompatible-resolution"


class PromptLengthError(ContractError):
    """Source and target tokenized prompt lengths differ."""

    label = "prompt-length"


class ArchitectureMismatchError(ContractError):
    """A bank was captured on a different architecture than the backend."""

    label = "architecture-mismatch"


class InstrumentationError(ContractError):
    """Attention hooks did not fire as declared by the backend."""

    label = "instrumentation"


class VocabularyError(ContractError):
    """A token id is outside the text encoder's vocabulary."""

    label = "vocabulary"


class NumericError(SubswapError):
    """A numerical invariant failed."""

    exit_code = 5
    label = "numeric"


class NonFiniteError(NumericError):
    """An input or result contains NaN or infinity."""

    label = "non-finite"


class DivergenceError(NumericError):
    """An optimization loss exceeded its divergence guard."""

    label = "optimization-diverged"
