"""
Exception hierarchy for mil_action.

Library code raises these; the study runner and the CLI decide how a failure
is reported (log, skip the run, exit status).
"""


class MilActionError(Exception):
    """Base class for every error raised by mil_action."""


class ConfigError(MilActionError, ValueError):
    """Invalid configuration or experiment spec."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class GeometryError(MilActionError, ValueError):
    """Invalid box, tubelet or tube."""


class NoTemporalOverlapError(GeometryError):
    """Two tubelets share no frame."""


class MILError(MilActionError, ValueError):
    """Invalid bag or prediction input to the MIL core."""


class ModelError(MilActionError, ValueError):
    """Shape mismatch, empty dataset or unreadable checkpoint."""


class SynthError(MilActionError, ValueError):
    """Infeasible synthetic world configuration or bag window."""


class EvalError(MilActionError, ValueError):
    """Inconsistent evaluation input."""


class DatasetFormatError(MilActionError):
    """Unreadable or incompatible dataset container."""
