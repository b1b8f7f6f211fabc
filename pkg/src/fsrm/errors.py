"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateBlockError(ValueError):
    """An oscillator block has (near-)zero norm and cannot be normalized."""


class NumericError(ArithmeticError):
    """A non-finite value was produced where finite arithmetic is required."""


class TapeError(RuntimeError):
    """The computation tape was used in an invalid way (e.g. replayed twice)."""


class VocabularyError(ValueError):
    """A token id falls outside the model vocabulary."""


class MalformedSequenceError(ValueError):
    """A bracket sequence violates the stack discipline."""

    def __init__(self, message, position):
        super().__init__(f"{message} (position {position})")
        self.position = position


class DatasetParseError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, message, line_number):
        super().__init__(f"{message} (line {line_number})")
        self.line_number = line_number


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class DegenerateBatchError(ValueError):
    """Every position in the batch is masked out."""
