"""Exception hierarchy shared by all modules."""


class StepGrainError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(StepGrainError, ValueError):
    pass


class UnknownTask(StepGrainError, KeyError):
    pass


class UnknownToken(StepGrainError, KeyError):
    pass


class EpisodeFinished(StepGrainError, RuntimeError):
    pass


class BudgetExceeded(StepGrainError, RuntimeError):
    pass


class DimensionMismatch(StepGrainError, ValueError):
    pass


class FinalStepNotApplicable(StepGrainError, ValueError):
    pass


class IndexOutOfRange(StepGrainError, IndexError):
    pass


class NonTerminalTrajectory(StepGrainError, ValueError):
    pass


class LengthMismatch(StepGrainError, ValueError):
    pass


class SchemaError(StepGrainError, ValueError):
    """An annotation record or response violates the judge schema.

    ``line`` is set when the offending record came from a JSONL file.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyRewards(StepGrainError, ValueError):
    pass


class MissingOldLogprobs(StepGrainError, ValueError):
    pass


class NonSingleStepBatch(StepGrainError, ValueError):
    pass


class UnpairedTasks(StepGrainError, ValueError):
    pass


class NoIntermediateSteps(StepGrainError, ValueError):
    pass
