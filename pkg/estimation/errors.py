class DualEstimationError(Exception):
    """Base class for every error raised by the estimation toolkit."""


class InvalidInputError(DualEstimationError, ValueError):
    pass


class SimulationDivergedError(DualEstimationError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Simulation produced a non-finite state at step {step}")


class SingularInnovationError(DualEstimationError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(
            f"Innovation covariance is not positive definite at step {step}"
        )


class FilterDivergedError(DualEstimationError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Filter state became non-finite at step {step}")


class NonFiniteGradientError(DualEstimationError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"Non-finite gradient rejected at iteration {iteration}")


class TrainingDivergedError(DualEstimationError):
    """Raised when the objective stops being finite; carries the last finite model."""

    def __init__(self, iteration: int, last_model, checkpoint=None):
        self.iteration = iteration
        self.last_model = last_model
        self.checkpoint = checkpoint
        message = f"Training diverged at iteration {iteration}"
        if checkpoint is not None:
            message += f" (last finite model saved to {checkpoint})"
        super().__init__(message)


class UndefinedCorrelationError(DualEstimationError):
    pass


class EmptyCampaignError(DualEstimationError):
    pass
