"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/domain problems exit 2,
missing prerequisite artifacts exit 3, corrupt or mismatched artifacts exit 4.
"""


class ConfigurationError(ValueError):
    """A config value is outside its allowed range or inconsistent."""


class DomainError(ValueError):
    """An input value is outside the operation's domain."""


class ContractError(ValueError):
    """Two inputs violate a mutual contract (shape/kind mismatch, frozen-state violation)."""


class PreconditionError(RuntimeError):
    """A required prior artifact (dataset, earlier-stage checkpoint) is missing."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or was produced by an incompatible config."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; a diagnostic snapshot has been written."""
