"""Exception hierarchy shared by every vmfnet module.

Each category carries the process exit code the CLI reports for it.
"""


class VMFNetError(Exception):
    exit_code = 5


class InvalidInputError(VMFNetError, ValueError):
    """Non-finite tensors, empty subjects and similar bad arguments."""

    exit_code = 3


class ShapeError(VMFNetError, ValueError):
    exit_code = 3


class DegenerateKernelError(VMFNetError, ValueError):
    """A kernel row collapsed to (near) zero norm and cannot be projected."""


class InvalidLabelError(VMFNetError, ValueError):
    exit_code = 3


class ConfigError(VMFNetError, ValueError):
    exit_code = 3


class DatasetError(VMFNetError):
    exit_code = 4


class CorruptDatasetError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class CheckpointError(VMFNetError):
    exit_code = 4
