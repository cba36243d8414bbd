"""Error types shared across the package.

Everything derives from ValueError so callers can catch broadly; the
subclasses exist so tests can assert the failure mode precisely.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(ValueError):
    """A config value violates its documented constraints."""


class VocabError(ValueError):
    """A token id or label falls outside the vocabulary."""


class RecordError(ValueError):
    """A data record is malformed or fails validation."""


class ContractError(ValueError):
    """A runtime precondition (lengths, supports, numeric ranges) was violated."""
