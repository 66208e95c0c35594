"""Exception hierarchy shared across the toolkit.

Validation-style failures (bad config, bad shapes, corrupt files) all derive
from NeulayError so the CLI can map them to exit status 2.
"""


class NeulayError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(NeulayError):
    """Array dimensions do not match what the operation requires."""


class ParameterError(NeulayError):
    """An argument value is out of its valid range."""


class ConfigurationError(NeulayError):
    """A configuration is internally inconsistent or unsatisfiable."""


class ConsistencyError(NeulayError):
    """Inputs that must come from the same source do not."""


class FormatError(NeulayError):
    """A serialized artifact has a bad magic, version, or is truncated."""


class ValidationError(NeulayError):
    """Loaded or computed data violates a declared invariant."""


class UnavailableFeatureError(NeulayError):
    """The requested feature kind is not present in the attention block."""


class MissingArtifactError(NeulayError):
    """A prerequisite artifact does not exist; message names the producer."""
