"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 2 (argparse),
InputError / checkpoint errors exit 3, NumericFaultError exit 4.
"""


class MacweightsError(Exception):
    """Base class for all package errors."""


class ShapeError(MacweightsError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(MacweightsError):
    """Invalid model / schedule / attack configuration."""


class InputError(MacweightsError):
    """Bad user-supplied data (token ids, CSV schema, CLI arguments)."""


class NumericFaultError(MacweightsError):
    """NaN/Inf surfaced during a forward pass or training step."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class DetectionError(MacweightsError):
    """Massive-weight probe could not identify a layer (e.g. all-zero states)."""


class CheckpointError(MacweightsError):
    """Base class for checkpoint parsing/serialization failures."""


class HeaderParseError(CheckpointError):
    """Weight-file header truncated or not valid JSON."""


class UnknownDtypeError(CheckpointError):
    """Tensor declares a dtype the loader does not support."""


class OverlappingOffsetsError(CheckpointError):
    """Two tensors claim overlapping byte ranges, or a range exceeds the file."""


class MissingTensorError(CheckpointError):
    """A tensor required by the architecture schema is absent."""


class ShapeMismatchError(CheckpointError):
    """Declared tensor shape disagrees with the config or the byte span."""
