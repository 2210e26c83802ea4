"""Exception hierarchy.

Every error raised by the library derives from :class:`MvhtError`. The two
intermediate classes split bad input (:class:`ValidationError`, CLI exit
code 2) from numerical breakdown (:class:`NumericalError`, exit code 3).
"""

from __future__ import annotations


class MvhtError(Exception):
    pass


class ValidationError(MvhtError, ValueError):
    pass


class NumericalError(MvhtError, ArithmeticError):
    pass


# geometry
class DepthDegenerate(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class DegenerateBaseline(NumericalError):
    pass


class DegenerateRay(NumericalError):
    pass


# triangulation
class InsufficientViews(ValidationError):
    pass


class AllZeroConfidence(ValidationError):
    pass


class SingularSystem(NumericalError):
    pass


class DimensionMismatch(ValidationError):
    pass


# anatomy
class UnsupportedHop(ValidationError):
    pass


class DegenerateHips(NumericalError):
    pass


class InsufficientSamples(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


# mvf
class NonFinite(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


# plausibility
class NoParentBone(ValidationError):
    pass


class ZeroLengthBone(NumericalError):
    pass


class TooFewSamples(ValidationError):
    pass


class MissingJointModel(ValidationError, KeyError):
    pass


class CountMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass
