"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class LatentFactorError(Exception):
    exit_code = 1


class ArgumentError(LatentFactorError, ValueError):
    """Bad argument: rank out of range, shape mismatch, missing option."""

    exit_code = 2


class InputError(LatentFactorError, ValueError):
    """Numerically invalid input such as NaN entries or an asymmetric covariance."""

    exit_code = 2


class ConfigError(LatentFactorError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(LatentFactorError):
    """Malformed tensor archive (manifest or payload)."""

    exit_code = 3


class NumericError(LatentFactorError, ArithmeticError):
    """Singular pre-conditioner or other numerical breakdown."""

    exit_code = 4


class DegenerateInputError(NumericError):
    """No invertible pivot block could be found for a block-identity junction."""


class PlanError(LatentFactorError):
    """A compression plan is infeasible or inconsistent with the model."""

    exit_code = 4
