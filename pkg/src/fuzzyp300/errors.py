"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the command line can
print one parseable line per failure.
"""


class FuzzyP300Error(Exception):
    code = "error"


class DimensionError(FuzzyP300Error, ValueError):
    code = "dimension"


class ConfigurationError(FuzzyP300Error, ValueError):
    code = "config"


class RangeError(FuzzyP300Error, ValueError):
    code = "range"


class StateError(FuzzyP300Error, RuntimeError):
    code = "state"


class NumericalError(FuzzyP300Error, ArithmeticError):
    code = "numerical"


class StratificationError(ConfigurationError):
    code = "stratification"


class ParseError(FuzzyP300Error, ValueError):
    """Malformed EPO1 or checkpoint payload; ``offset`` is the byte position."""

    code = "parse"

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(ParseError):
    code = "parse.magic"


class TruncatedError(ParseError):
    code = "parse.truncated"


class LengthMismatchError(ParseError):
    code = "parse.length"
