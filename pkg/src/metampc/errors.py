"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad dimensions, malformed specs, missing fields."""


class TrainingError(RuntimeError):
    """Optimization failed: non-finite gradients or diverging loss."""


class RolloutError(RuntimeError):
    """A model rollout produced a non-finite state."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class PlanningError(RuntimeError):
    """No candidate action sequence produced a finite return."""
