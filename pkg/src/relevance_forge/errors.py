"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit codes without a lookup table.
"""


class ForgeError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(ForgeError, ValueError):
    exit_code = 2
    category = "config"


class SpecError(ConfigError):
    """An invalid model, phantom, or algorithm specification."""

    category = "spec"


class MissingInputError(ForgeError, FileNotFoundError):
    exit_code = 3
    category = "missing-input"


class FormatError(ForgeError, ValueError):
    exit_code = 4
    category = "format"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class TruncationError(FormatError):
    category = "format"


class TrainingError(ForgeError, RuntimeError):
    exit_code = 5
    category = "divergence"

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class DegenerateMapError(ForgeError, ValueError):
    exit_code = 6
    category = "degenerate-map"


class DimensionError(ForgeError, ValueError):
    category = "dimension"


class MetricError(ForgeError, ValueError):
    category = "metric"


class UsageError(ForgeError, RuntimeError):
    category = "usage"


class NonFiniteError(TrainingError):
    """A tensor operation produced NaN or Inf."""


class RankRangeError(ForgeError, IndexError):
    category = "range"
