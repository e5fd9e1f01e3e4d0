"""Exception types shared across the toolkit."""


class AdvFusionError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(AdvFusionError):
    """A component was wired together inconsistently (bad shapes, unknown ids, ...)."""


class UnsupportedModelError(ConfigurationError):
    """The model does not expose what an op needs (e.g. no conv layer for attention maps)."""


class MissingArtifactError(ConfigurationError):
    """A pipeline stage requires an artifact that an earlier stage has not produced."""


class TrainingFailure(AdvFusionError):
    """Training finished without reaching the required quality bar.

    Carries the final value of the monitored metric so callers can report it.
    """

    def __init__(self, message: str, final_metric: float):
        super().__init__(message)
        self.final_metric = float(final_metric)


class RobustFeatureRejected(AdvFusionError):
    """An extracted latent failed the robustness threshold.

    ``achieved_score`` is the score measured at rejection time, ``threshold``
    the bar it had to clear.
    """

    def __init__(self, message: str, achieved_score: float, threshold: float):
        super().__init__(message)
        self.achieved_score = float(achieved_score)
        self.threshold = float(threshold)


class ConfigValidationError(AdvFusionError):
    """A config file failed validation.

    ``violations`` is a list of ``(json_pointer, message)`` pairs, one per
    offending field.
    """

    def __init__(self, violations: list[tuple[str, str]]):
        lines = [f"{pointer or '/'}: {message}" for pointer, message in violations]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))
        self.violations = violations


class MetricUnavailable(AdvFusionError):
    """A metric backend is not installed or not configured."""
