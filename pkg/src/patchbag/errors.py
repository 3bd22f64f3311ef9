"""Exception types shared across the package.

The CLI maps these onto stable exit codes: configuration problems exit 2,
plain I/O failures exit 3, and numeric or data-integrity failures exit 4.
"""


class PatchbagError(Exception):
    """Base class for all package errors."""


class DimensionError(PatchbagError):
    """Operand shapes are incompatible. The message names both shapes."""


class EmptyBagError(PatchbagError):
    """A bag with zero patches was passed where at least one is required."""


class ConfigError(PatchbagError):
    """Invalid configuration value; message names the offending field."""


class SchemaMismatchError(ConfigError):
    """Two tag schemas (or labels vs a schema) disagree."""


class ContractError(PatchbagError):
    """A caller broke an API precondition (non-scalar loss, missing grad, ...)."""


class NumericError(PatchbagError):
    """Non-finite values where finite ones are required."""


class ParseError(PatchbagError):
    """A manifest or image file is malformed; message names file and field."""


class IntegrityError(PatchbagError):
    """Stored binary data does not match its manifest (truncation, bad size)."""


class DegenerateHistogramError(PatchbagError):
    """Histogram has no mass, so no threshold can be computed."""


class InsufficientForegroundError(PatchbagError):
    """Too few valid foreground windows to sample the requested patches."""

    def __init__(self, found: int, needed: int):
        self.found = found
        self.needed = needed
        super().__init__(
            f"only {found} valid foreground window(s), need {needed}"
        )


class SizeError(PatchbagError):
    """An image or patch has the wrong pixel dimensions."""
