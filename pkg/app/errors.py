from __future__ import annotations

from typing import Any


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


class AdmissionError(ValueError):
    """Input rejected before any construction work starts."""


class StackFormatError(ValueError):
    """A serialized plan / modification stack could not be read."""


class DomainExitError(RuntimeError):
    def __init__(self, exit_time: float, point: Any) -> None:
        super().__init__(f"trajectory left the domain box at t={exit_time:.6g}")
        self.exit_time = float(exit_time)
        self.point = point


class BracketError(RuntimeError):
    """A root was not bracketed by the requested window."""


class SectionError(RuntimeError):
    """A level-set section could not be traced to the requested extent."""


class CollocationError(RuntimeError):
    pass


class ConstructionError(RuntimeError):
    def __init__(self, stage: str, message: str, **diagnostics: Any) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.diagnostics = diagnostics


class CoverShrinkError(ConstructionError):
    def __init__(self, center: float, **diagnostics: Any) -> None:
        super().__init__(
            "step2",
            f"cannot shrink the neighborhood of cover center q={center:.6g} into the slope -1 region",
            center=center,
            **diagnostics,
        )


class EpsilonSearchError(ConstructionError):
    def __init__(self, min_gap: float, **diagnostics: Any) -> None:
        super().__init__(
            "step3",
            f"no eps in (0, 1/2) with tau < tau2 near the box exit (min gap {min_gap:.3g})",
            min_gap=min_gap,
            **diagnostics,
        )
