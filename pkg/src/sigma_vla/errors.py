"""Exception hierarchy shared by all subsystems."""

from __future__ import annotations


class SigmaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SigmaError, ValueError):
    pass


class ConfigurationError(SigmaError, ValueError):
    pass


class ContractError(SigmaError, ValueError):
    """A caller violated an operation precondition."""


class InputError(SigmaError, ValueError):
    pass


class VocabularyError(SigmaError, KeyError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__(f"out-of-vocabulary word(s): {', '.join(self.words)}")

    def __str__(self) -> str:
        return self.args[0]


class IntegrityError(SigmaError):
    """On-disk artifact is corrupt or inconsistent with its manifest."""


class TransientReadError(SigmaError, OSError):
    """A read failed in a way that may succeed on retry."""


class PermanentReadError(SigmaError, OSError):
    pass


class LoadError(SigmaError):
    pass


class TrainingDivergedError(SigmaError, FloatingPointError):
    def __init__(self, step: int, component: str, value: float):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component}={value} at step {step}")


class ComparabilityError(SigmaError):
    pass
