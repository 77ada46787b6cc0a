"""Exception hierarchy shared by every graphmamba module."""


class GraphMambaError(Exception):
    """Base class for all library errors."""


class DimensionError(GraphMambaError, ValueError):
    """Tensor or array extents are incompatible."""


class ArgumentError(GraphMambaError, ValueError):
    """A scalar argument is outside its valid range."""


class NonFiniteError(GraphMambaError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class CubeFormatError(GraphMambaError):
    """The HSIC file has a bad magic number, version or header field."""


class TruncatedFileError(CubeFormatError):
    """The file ends inside the header or in the middle of an element."""


class SizeMismatchError(CubeFormatError):
    """The payload element count disagrees with the header."""


class CheckpointError(GraphMambaError):
    """A checkpoint container is malformed or incompatible."""


class SplitError(GraphMambaError, ValueError):
    """A stratified split cannot be drawn."""


class ConfigError(GraphMambaError, ValueError):
    """A run configuration is invalid or contains unknown keys."""
