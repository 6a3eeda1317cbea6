"""Exception hierarchy shared across the package.

Invalid arguments raise plain ``ValueError``.  Problems with input data derive
from :class:`DataError`; numeric failures derive from :class:`NumericError`.
The CLI maps these onto distinct exit codes.
"""


class DataError(Exception):
    """Malformed or inconsistent input data."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class PinyinParseError(DataError, ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class MissingReadingError(DataError, KeyError):
    """A character has no entry in the pinyin table."""

    def __init__(self, char: str):
        self.char = char
        self.codepoint = ord(char) if len(char) == 1 else None
        super().__init__(char)

    def __str__(self) -> str:
        if self.codepoint is None:
            return f"no pinyin reading for {self.char!r}"
        return f"no pinyin reading for {self.char!r} (U+{self.codepoint:04X})"


class AbbreviationParseError(DataError, ValueError):
    """Raw text did not contain a well-formed ``{letters}`` span."""


class NoCandidateError(DataError):
    """Hard filtering left no feasible token at some span position."""

    def __init__(self, span: tuple[int, int], position: int, letter: str):
        self.span = span
        self.position = position
        self.letter = letter
        super().__init__(
            f"no candidate character with initial {letter!r} at position {position} of span {span}"
        )


class ShortfallError(DataError):
    """Not enough eligible sentences to build a test set under the constraints."""

    def __init__(self, requested: int, achievable: int):
        self.requested = requested
        self.achievable = achievable
        super().__init__(
            f"only {achievable} of {requested} records can be built under the given constraints"
        )


class CheckpointError(DataError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unparseable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class TrainingDivergedError(NumericError):
    """Loss became non-finite; ``last_good_state`` holds the last finite-epoch weights."""

    def __init__(self, epoch: int, last_good_state, history):
        self.epoch = epoch
        self.last_good_state = last_good_state
        self.history = history
        super().__init__(f"loss became non-finite in epoch {epoch}")
