"""Exception types shared across the package."""

from __future__ import annotations


class LongEditError(Exception):
    """Base class for all errors raised by longedit."""


class ConfigError(LongEditError):
    """Raised when an edit configuration violates one or more invariants.

    ``issues`` holds every violation found, as ``(field, message)`` pairs.
    """

    def __init__(self, issues):
        self.issues = list(issues)
        lines = "; ".join(f"{field}: {msg}" for field, msg in self.issues)
        super().__init__(f"invalid configuration: {lines}")


class VideoIOError(LongEditError):
    pass


class ShapeError(LongEditError, ValueError):
    pass


class ScheduleError(LongEditError, ValueError):
    pass


class BackboneError(LongEditError):
    """A backbone call failed; carries the timestep it failed at."""

    def __init__(self, message: str, timestep: int | None = None):
        self.timestep = timestep
        suffix = f" (timestep {timestep})" if timestep is not None else ""
        super().__init__(message + suffix)


class ControlError(LongEditError):
    pass


class AttentionError(LongEditError):
    pass


class MaskError(LongEditError):
    pass


class InterpolationError(LongEditError):
    pass


class InterpolationBudgetError(InterpolationError):
    """A frame would pass through interpolation smoothing a third time."""


class MetricsError(LongEditError):
    pass


class PipelineError(LongEditError):
    """A pipeline stage failed. Location fields are ``None`` when not applicable."""

    def __init__(self, message: str, *, stage: str, window: int | None = None,
                 frame: int | None = None, step: int | None = None):
        self.stage = stage
        self.window = window
        self.frame = frame
        self.step = step
        where = ", ".join(
            f"{k}={v}" for k, v in (("window", window), ("frame", frame), ("step", step))
            if v is not None
        )
        super().__init__(f"[{stage}{': ' + where if where else ''}] {message}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "window": self.window,
            "frame": self.frame,
            "step": self.step,
            "message": str(self),
        }
