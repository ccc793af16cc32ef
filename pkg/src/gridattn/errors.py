"""Error types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
CheckpointMismatchError -> 4.
"""


class ConfigError(Exception):
    """Invalid or unknown configuration key/value."""


class DataError(Exception):
    """Corpus or dataset problem (bad index, group leakage, ...)."""


class EmptyTissueError(DataError):
    """Image contains no non-background pixels."""


class CheckpointMismatchError(Exception):
    """Checkpoint is structurally incompatible with the requested run."""
