"""Exception hierarchy shared by all fedcluster modules.

The CLI maps these onto stable exit codes: ConfigurationError and
IngestionError -> 2, DivergenceError -> 3, plain I/O errors -> 1.
"""


class FedClusterError(Exception):
    pass


class ConfigurationError(FedClusterError):
    """Invalid or inconsistent configuration; message names the offending field."""


class IngestionError(FedClusterError):
    """Malformed input file (bad magic, truncation, count mismatch)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedTaskError(FedClusterError):
    """Operation requires an analytic task family that was not supplied."""


class DivergenceError(FedClusterError):
    """Non-finite parameters or loss encountered during training."""

    def __init__(self, round_j, cycle_k, device_id, step_t):
        super().__init__(
            f"non-finite parameters at round={round_j} cycle={cycle_k} "
            f"device={device_id} step={step_t}"
        )
        self.round_j = round_j
        self.cycle_k = cycle_k
        self.device_id = device_id
        self.step_t = step_t


class InvariantViolation(FedClusterError):
    """Internal consistency check failed; indicates a bug, not bad user input."""
