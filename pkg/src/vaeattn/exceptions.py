"""Exception hierarchy shared across the package.

The CLI maps the three top-level families onto process exit codes.
"""


class VaeAttnError(Exception):
    """Base class for all package errors."""


class ConfigError(VaeAttnError, ValueError):
    """Invalid or unknown configuration."""


class DataError(VaeAttnError):
    """A dataset could not be generated, read or paired."""


class FormatError(DataError, ValueError):
    """A file does not follow its declared byte layout."""


class PairingError(DataError):
    """An abnormal test image has no ground-truth mask."""


class DegenerateRenderError(DataError, ValueError):
    """A shape renders to zero pixels at the requested resolution."""


class CheckpointFormatError(FormatError):
    """Checkpoint magic, version or table is invalid."""


class DivergenceError(VaeAttnError, ArithmeticError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last parameters that produced a finite loss.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DisconnectedTapError(VaeAttnError, RuntimeError):
    """The requested tap does not feed the scalar being differentiated."""


class UnsupportedConfigurationError(VaeAttnError, RuntimeError):
    """A second-order gradient path required by the loss is unavailable."""
