"""Exception hierarchy shared by every module.

The CLI maps :class:`ContractError` (and subclasses) to exit code 2 and
:class:`DataError` (and subclasses) to exit code 3.
"""


class RegionEditError(Exception):
    """Base class for all package errors."""


class ContractError(RegionEditError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError, ValueError):
    """Operand shapes do not agree."""


class GraphError(ContractError):
    """Misuse of the autodiff graph (e.g. a second backward pass)."""


class NonFiniteError(ContractError, FloatingPointError):
    """A forward operation produced NaN or Inf."""


class DegenerateInputError(ContractError, ValueError):
    """A zero-norm vector reached a cosine or normalization."""


class DegenerateDirectionError(DegenerateInputError):
    """The image or text delta of the directional loss is zero."""


class InvalidSigmaError(ContractError, ValueError):
    """The DDIM noise scale exceeds what the schedule allows."""


class DependencyError(ContractError):
    """A pipeline stage was started before the stage it depends on."""


class ConfigError(ContractError):
    """Unknown or malformed configuration key."""


class DataError(RegionEditError):
    """Input data cannot be interpreted."""


class InfeasibleEditError(DataError):
    """The requested edit cannot be applied to the scene."""


class UnresolvedTargetError(DataError):
    """The instruction names an object that is not in the caption."""


class VocabularyError(DataError, KeyError):
    """A word outside the closed vocabulary."""

    def __str__(self):
        return Exception.__str__(self)


class GrammarError(DataError, ValueError):
    """Text does not parse under the instruction grammar."""


class FormatError(DataError, ValueError):
    """A file on disk is malformed (image, checkpoint, index)."""
