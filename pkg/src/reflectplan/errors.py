"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class ReflectPlanError(Exception):
    """Base class for all errors raised by reflectplan."""


# --- supply graph -------------------------------------------------------


class NetworkError(ReflectPlanError, ValueError):
    pass


class DuplicateNode(NetworkError):
    pass


class DanglingEdge(NetworkError):
    pass


class EmptyNetwork(DanglingEdge):
    """Raised for a spec with no nodes (a degenerate dangling case)."""


class WeightOutOfRange(NetworkError):
    pass


class UnknownNode(NetworkError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


# --- dynamics -----------------------------------------------------------


class NegativeQuantity(ReflectPlanError, ValueError):
    pass


class ParamOutOfRange(ReflectPlanError, ValueError):
    pass


class UnknownTarget(ReflectPlanError, ValueError):
    pass


class EpisodeTerminated(ReflectPlanError, RuntimeError):
    pass


# --- world model --------------------------------------------------------


class DimensionMismatch(ReflectPlanError, ValueError):
    pass


class UnfittedModel(ReflectPlanError, RuntimeError):
    pass


class InsufficientData(ReflectPlanError, ValueError):
    pass


# --- agent --------------------------------------------------------------


class EmptyTemplateLibrary(ReflectPlanError, ValueError):
    pass


class AdapterUnavailable(ReflectPlanError, RuntimeError):
    pass


class UnknownTemplate(ReflectPlanError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class IndexOutOfBuffer(ReflectPlanError, IndexError):
    pass


# --- reflect loop -------------------------------------------------------


class LengthMismatch(ReflectPlanError, ValueError):
    pass


class DegenerateWeights(ReflectPlanError, ValueError):
    pass


class ScoreOutOfRange(ReflectPlanError, ValueError):
    pass


class EmptyBatch(ReflectPlanError, ValueError):
    pass


class NonTrainableBackend(ReflectPlanError, TypeError):
    pass


# --- metrics ------------------------------------------------------------


class IncompleteLog(ReflectPlanError, ValueError):
    pass


class DegenerateDemand(ReflectPlanError, ValueError):
    pass


class ZeroBaseline(ReflectPlanError, ZeroDivisionError):
    pass


class InsufficientSamples(ReflectPlanError, ValueError):
    pass


class ZeroVariance(ReflectPlanError, ValueError):
    pass


# --- harness ------------------------------------------------------------


class ConfigError(ReflectPlanError, ValueError):
    pass


class CorruptLog(ReflectPlanError, ValueError):
    def __init__(self, path, line: int, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")
