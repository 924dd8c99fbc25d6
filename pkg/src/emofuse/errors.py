"""Exception types shared across the package."""


class EmofuseError(Exception):
    """Base class for all package errors."""


class FormatError(EmofuseError):
    """Malformed file: bad magic, truncated payload, unparseable row."""


class UnsupportedError(EmofuseError):
    """Well-formed input that we deliberately do not handle."""


class EmptyInputError(EmofuseError):
    """Operation requires a nonempty input."""


class TooShortError(EmofuseError):
    """Signal or sequence shorter than the operation's minimum."""


class LabelError(EmofuseError):
    """Raw label outside the mapping table."""


class ShapeError(EmofuseError):
    """Tensor/matrix shape mismatch."""


class ParameterError(EmofuseError):
    """Invalid configuration or argument value."""


class NumericError(EmofuseError):
    """NaN/Inf encountered where finite values are required."""


class ContractError(EmofuseError):
    """Caller violated an operation contract (e.g. non-scalar loss)."""


class StateError(EmofuseError):
    """Object not in the required state (e.g. no checkpoint loaded)."""


class ConfigError(EmofuseError):
    """Incompatible configuration, e.g. checkpoint/model mismatch."""
