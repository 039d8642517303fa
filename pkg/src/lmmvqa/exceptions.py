"""Exception hierarchy shared by every stage of the pipeline."""


class LMMVQAError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(LMMVQAError):
    pass


class EmptyVideo(LMMVQAError):
    pass


class ShapeError(LMMVQAError, ValueError):
    pass


class BackendError(LMMVQAError):
    pass


class DuplicateBackend(LMMVQAError, KeyError):
    pass


class UnknownBackend(LMMVQAError, KeyError):
    pass


class GrammarExhausted(LMMVQAError):
    pass


class TooFewSamples(LMMVQAError, ValueError):
    pass


class TokenizeError(LMMVQAError, ValueError):
    pass


class WidthMismatch(LMMVQAError, ValueError):
    pass


class ParseError(LMMVQAError, ValueError):
    pass


class DivergenceError(LMMVQAError, FloatingPointError):
    pass


class ConfigError(LMMVQAError, ValueError):
    pass


class MissingTask(LMMVQAError, ValueError):
    pass


class DegenerateInput(LMMVQAError, ValueError):
    pass


class ManifestMissing(LMMVQAError):
    pass


class CheckpointMissing(LMMVQAError):
    pass


class MissingCache(LMMVQAError):
    pass
