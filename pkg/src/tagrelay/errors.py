"""Exception hierarchy shared by all tagrelay modules."""


class TagRelayError(Exception):
    """Base class for every error raised by this package."""


class InvalidTimeError(TagRelayError, ValueError):
    """A timestamp lies before the pairing time it is measured from."""


class InvalidEpochError(TagRelayError, ValueError):
    pass


class CodecError(TagRelayError, ValueError):
    """Byte input has the wrong length or shape."""


class MalformedAdvertisementError(CodecError):
    pass


class WrongKeyError(TagRelayError):
    """Report authentication failed under the supplied private key."""


class ValidationError(TagRelayError, ValueError):
    pass


class NotFoundError(TagRelayError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class ProtocolError(TagRelayError):
    """A wire message was malformed or asked for something impossible."""


class ScenarioError(ValidationError):
    """Scenario failed validation; ``problems`` lists (location, message) pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.problems))
