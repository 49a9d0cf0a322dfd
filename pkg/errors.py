"""
errors.py — Exception hierarchy for the Domain Shift Eraser simulator.

Every error carries the process exit code the CLI reports for it.
"""

from config import EXIT_CONFIG_ERROR, EXIT_DATA_ERROR, EXIT_RUNTIME_ERROR


class SimulatorError(Exception):
    """Base class for every error raised by the simulator."""

    exit_code: int = EXIT_RUNTIME_ERROR


# ── Configuration ───────────────────────────────────────────────────────────

class ConfigError(SimulatorError):
    exit_code = EXIT_CONFIG_ERROR


class ArchitectureError(ConfigError):
    """Broken channel chain, duplicate parameter names, bad pooling."""


class InvalidExpansionError(ArchitectureError):
    """Expansion G outside [1, T]."""


# ── Data ────────────────────────────────────────────────────────────────────

class DataError(SimulatorError):
    exit_code = EXIT_DATA_ERROR


class DataFormatError(DataError):
    """Malformed manifest or payload; message names the file and array."""


class LabelError(DataError):
    """Class index outside [0, num_classes)."""


class EmptyDatasetError(DataError):
    pass


class UnknownDomainError(DataError):
    pass


class SchemaVersionError(DataError):
    pass


class OutputExistsError(DataError):
    """Refusal to write into a non-empty directory without --force."""


# ── Runtime ─────────────────────────────────────────────────────────────────

class SimulatorRuntimeError(SimulatorError):
    exit_code = EXIT_RUNTIME_ERROR


class DimensionError(SimulatorRuntimeError):
    pass


class DegenerateBatchError(SimulatorRuntimeError):
    """Batch of fewer than two samples in train-mode batch norm."""


class TapeError(SimulatorRuntimeError):
    pass


class StaleTapeError(TapeError):
    """backward() called twice on the same recording."""


class NonFiniteError(SimulatorRuntimeError):
    pass


class EmptyLayerError(SimulatorRuntimeError):
    pass


class AggregationError(SimulatorRuntimeError):
    pass


class NoClientsError(AggregationError):
    pass


class AlignmentError(AggregationError):
    """Client state dicts disagree on names or shapes."""


class NotApplicableError(SimulatorRuntimeError):
    """Operation requested for a method or model that cannot support it."""
