"""Exception hierarchy shared across the pipeline stages."""


class CommunityPollError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(CommunityPollError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class PreconditionError(DomainError):
    pass


class ConfigError(CommunityPollError):
    pass


class FetchError(CommunityPollError):
    """Census data could not be obtained from the API or the cache."""


class SchemaError(CommunityPollError):
    """A census payload is missing a variable or is otherwise malformed."""

    def __init__(self, message, code=None):
        super().__init__(message)
        self.code = code


class SynthesisError(CommunityPollError):
    def __init__(self, message, reports=()):
        super().__init__(message)
        self.reports = list(reports)


class RenderError(CommunityPollError):
    def __init__(self, message, placeholder=None):
        super().__init__(message)
        self.placeholder = placeholder


class AnswerError(CommunityPollError, ValueError):
    """An agent's answer to a question could not be normalized."""

    def __init__(self, message, question_id=None):
        super().__init__(message)
        self.question_id = question_id


class InvalidAnswerError(AnswerError):
    pass


class OverSelectionError(AnswerError):
    pass


class MissingAnswerError(AnswerError):
    pass


class ParseError(CommunityPollError):
    pass


class UnknownKeyError(ParseError):
    pass


class ProviderError(CommunityPollError):
    pass


class RunError(CommunityPollError):
    def __init__(self, message, partial=()):
        super().__init__(message)
        self.partial = list(partial)


class StageOrderError(CommunityPollError):
    pass
