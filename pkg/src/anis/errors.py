"""Exception hierarchy shared by every layer of the runtime."""


class AnisError(Exception):
    """Base class. ``cause`` is the short machine-readable error name."""

    @property
    def cause(self) -> str:
        return type(self).__name__

    def to_json(self) -> dict:
        return {"error": str(self), "cause": self.cause}


# service model
class DuplicateId(AnisError):
    pass


class MalformedDescriptor(AnisError):
    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


class UnknownService(AnisError):
    pass


class ServiceStopped(AnisError):
    pass


class UnknownMethod(AnisError):
    pass


class ArityMismatch(AnisError):
    pass


class UnboundBinding(AnisError):
    pass


class MalformedSnapshot(AnisError):
    pass


class ExecutionError(AnisError):
    """A body referenced a variable or argument that does not exist."""


# matching / combining
class ArityIncompatible(AnisError):
    pass


class InfeasibleMatch(AnisError):
    pass


class Unweavable(AnisError):
    pass


class EmptyComposite(AnisError):
    pass


class UnknownMember(AnisError):
    pass


# remoting
class UnknownRemote(AnisError):
    pass


class NoLink(AnisError):
    pass


class UnknownLink(AnisError):
    pass


class LinkDown(AnisError):
    pass


class ReplayInterrupted(AnisError):
    def __init__(self, msg: str, sent: list[int] | None = None):
        self.sent = sent or []
        super().__init__(msg)


class MalformedFrame(AnisError):
    pass


# integserv
class NoApplicableRule(AnisError):
    pass


class IntegrationException(AnisError):
    """Raised by ``integrate``; ``cause`` names the underlying failure."""

    def __init__(self, cause: str, msg: str = ""):
        self._cause = cause
        super().__init__(msg or cause)

    @property
    def cause(self) -> str:
        return self._cause


class UnIntegrationException(AnisError):
    """Raised by ``unintegrate``; ``cause`` is ``InUse`` or ``NotAvailable``."""

    def __init__(self, cause: str, msg: str = ""):
        self._cause = cause
        super().__init__(msg or cause)

    @property
    def cause(self) -> str:
        return self._cause


class ParseError(AnisError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


# errors a skeleton may carry back in a RESULT frame
REMOTE_ERRORS = {
    cls.__name__: cls
    for cls in (
        UnknownService,
        ServiceStopped,
        UnknownMethod,
        ArityMismatch,
        UnboundBinding,
        ExecutionError,
        LinkDown,
        NoLink,
    )
}
