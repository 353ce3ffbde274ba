#!/usr/bin/env python3
"""
Error types for fevolve
Every error knows the module that raised it so the CLI can report
module-qualified messages.
"""

from typing import Optional


class FevolveError(Exception):
    """Base class for all fevolve errors"""

    module = "fevolve"

    def qualified(self) -> str:
        return f"{self.module}: {type(self).__name__}: {self}"


class DimensionMismatch(FevolveError):
    module = "mesh_basis"


class CertificateFailure(FevolveError):
    module = "fevolve"


# mesh_basis
class NonConformingSpacing(FevolveError):
    module = "mesh_basis"


class DimensionUnsupported(FevolveError):
    module = "mesh_basis"


class FactorizationFailed(FevolveError):
    module = "mesh_basis"


class InsufficientSamples(FevolveError):
    module = "mesh_basis"


# operator_factory
class NonSPDTensor(FevolveError):
    module = "operator_factory"


class ActionFailure(FevolveError):
    module = "operator_factory"

    def __init__(self, message: str, column: Optional[int] = None):
        super().__init__(message)
        self.column = column


class NoConvergence(FevolveError):
    module = "operator_factory"

    def __init__(self, message: str, best_estimate: float = float("nan")):
        super().__init__(message)
        self.best_estimate = best_estimate


# spectral
class NotSymmetric(FevolveError):
    module = "spectral"


class EigensolveFailure(FevolveError):
    module = "spectral"


class InconsistentFamily(FevolveError):
    module = "spectral"


# contraction
class DivergenceDetected(FevolveError):
    module = "contraction"


class InvalidRatio(FevolveError):
    module = "contraction"


# elliptic
class SingularOperator(FevolveError):
    module = "elliptic"


class ContractionConditionViolated(FevolveError):
    module = "elliptic"


class InvalidConstants(FevolveError):
    module = "elliptic"


class BallEscape(FevolveError):
    """An iterate or trajectory node left the closed ball of radius r"""

    module = "elliptic"

    def __init__(self, message: str, index: int = -1, norm: float = float("nan")):
        super().__init__(message)
        self.index = index
        self.norm = norm


# evolution
class MissingConstants(FevolveError):
    module = "evolution"


class DegenerateProblem(FevolveError):
    module = "evolution"


class WindowExceedsDelta(FevolveError):
    module = "evolution"


class IndexOutOfWindow(FevolveError):
    module = "evolution"


class NotContractive(FevolveError):
    module = "evolution"


class SeriesOverflow(FevolveError):
    module = "evolution"


# problems / cli
class UnknownPreset(FevolveError):
    module = "problems"


class ConfigParse(FevolveError):
    module = "cli"
