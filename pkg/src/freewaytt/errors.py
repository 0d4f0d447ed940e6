"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line error message.
"""


class FreewayTTError(Exception):
    category = "error"


class FormatError(FreewayTTError):
    """Input file does not parse as the expected format."""

    category = "format"


class ValidationError(FreewayTTError):
    """Input parsed but violates a domain invariant."""

    category = "validation"


class ModelVersionError(FreewayTTError):
    category = "version"


class CorruptModelError(FreewayTTError):
    category = "corrupt"
