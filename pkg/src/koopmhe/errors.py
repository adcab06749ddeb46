"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures with 3, and file/format problems with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, missing key, or malformed config file."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (divergence, singularity, non-convergence)."""


class TrainingDivergedError(NumericalError):
    """Loss or gradients became non-finite during training."""


class SimulationDivergedError(NumericalError):
    """Integrated state left the validity envelope; message names the step."""


class SolverError(NumericalError):
    """Convex solve failed outright (infeasibility or numerical breakdown)."""


class ModelFileError(IOError):
    """Model file is unreadable: bad magic, version mismatch, or CRC failure."""
