"""Exception types shared across the toolkit."""


class CanarexError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(CanarexError, ValueError):
    """An operation received values outside its domain (NaN/Inf, empty input, ...)."""


class InvalidTemperatureError(InvalidInputError):
    """Softmax temperature must be strictly positive."""


class ContractViolationError(CanarexError):
    """An internal contract was broken: shape mismatch, label out of range,
    or an optimizer registry touching frozen model parameters."""


class ConfigError(CanarexError, ValueError):
    """Invalid configuration value or unknown scheme/option."""


class CorpusFormatError(CanarexError, ValueError):
    """Corpus file failed to parse; message carries the offending line number."""


class EmptyCorpusError(CorpusFormatError):
    """Corpus file contained no examples."""


class UnknownTokenError(CanarexError, KeyError):
    """Token not present in the vocabulary and no UNK fallback configured."""


class CheckpointError(CanarexError, IOError):
    """Checkpoint file is malformed, truncated, or version-incompatible."""


class TrainingDivergedError(CanarexError, RuntimeError):
    """Training loss became non-finite; message reports the last finite epoch."""


class AttackDivergedError(CanarexError, RuntimeError):
    """Attack loss became non-finite; message reports the failing epoch."""
