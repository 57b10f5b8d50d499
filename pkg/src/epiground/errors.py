"""Exception hierarchy shared by every epiground module."""

from __future__ import annotations


class EpigroundError(Exception):
    """Base class; the CLI maps these to exit status 1."""


# world
class ParseError(EpigroundError, ValueError):
    pass


class DanglingReference(EpigroundError, ValueError):
    pass


class IllegalAction(EpigroundError):
    pass


class UnknownEntity(EpigroundError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MissingMapping(EpigroundError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


# mcts
class DomainError(EpigroundError, ValueError):
    pass


class NothingToExpand(EpigroundError):
    pass


# corpus
class ReplayError(EpigroundError):
    pass


class CannotInflate(EpigroundError):
    pass


class EmptyDataset(EpigroundError, ValueError):
    pass


class UnpairableTask(EpigroundError, ValueError):
    pass


# policy / train / w2s
class UnknownToken(EpigroundError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class VocabMismatch(EpigroundError, ValueError):
    pass


class NonPositiveBeta(EpigroundError, ValueError):
    pass


class DivergenceDetected(EpigroundError, FloatingPointError):
    pass


class DimensionMismatch(EpigroundError, ValueError):
    pass


class InvalidDistribution(EpigroundError, ValueError):
    pass


# probe / evalx
class ShapeMismatch(EpigroundError, ValueError):
    pass


class InsufficientData(EpigroundError, ValueError):
    pass


class EmptySequence(EpigroundError, ValueError):
    pass


class LengthMismatch(EpigroundError, ValueError):
    pass


# cli
class UnknownSubcommand(EpigroundError):
    pass


class ConfigError(EpigroundError, ValueError):
    pass
