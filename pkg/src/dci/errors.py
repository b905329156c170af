"""Error classes shared by every module.

Each error carries a stable string ``code``. Codes travel over the wire in
failed replies and are turned back into the matching class on the caller
side, so ``except NotFound`` works the same for local and remote calls.
"""

from __future__ import annotations

_REGISTRY: dict[str, type[DciError]] = {}


class DciError(Exception):
    code = "Error"

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "code" not in cls.__dict__:
            cls.code = cls.__name__
        _REGISTRY[cls.code] = cls

    def __str__(self) -> str:
        return f"{self.code}: {self.detail}" if self.detail else self.code

    def data(self) -> dict[str, str]:
        """Structured fields beyond ``detail`` that should survive the wire."""
        return {}


class RemoteError(DciError):
    """A remote failure whose code has no local class."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(detail)
        self.code = code


def error_from_code(code: str, detail: str = "", data: dict[str, str] | None = None) -> DciError:
    cls = _REGISTRY.get(code)
    if cls is None or cls is RemoteError:
        return RemoteError(code, detail)
    if data:
        try:
            return cls(detail, **data)
        except TypeError:
            pass
    return cls(detail)


# generic
class NotFound(DciError): ...
class DuplicateId(DciError): ...
class InUse(DciError): ...
class BadRequest(DciError): ...
class InternalError(DciError): ...
class InvalidState(DciError): ...
class InjectedFault(DciError): ...

# archive
class InvalidManifest(DciError): ...
class ChecksumMismatch(DciError): ...
class IdConflict(DciError): ...
class IoFailure(DciError): ...
class FetchFailure(DciError): ...
class MalformedArchive(DciError): ...

# node agent
class NoSuchServer(NotFound): ...
class NoSuchContainer(NotFound): ...
class ArchiveNotInstalled(DciError): ...
class UnknownAttribute(DciError): ...
class TypeMismatch(DciError): ...
class AlreadyConfigured(DciError): ...
class PortKindMismatch(DciError): ...
class AlreadyConnected(DciError): ...
class UnresolvableTarget(DciError): ...
class NotConnected(DciError): ...
class UnknownCookie(DciError): ...
class NotActive(DciError): ...
class NoSuchPort(NotFound): ...
class RelayUnconnected(DciError): ...

# domain
class DuplicateNode(DciError): ...
class UnknownNode(NotFound): ...
class AlreadyBound(DciError): ...
class NotBound(NotFound): ...

# assembly
class UnsatisfiablePlacement(DciError): ...
class PlacementFailure(DciError): ...
class ValidationFailure(DciError): ...
class UnknownAssembly(NotFound): ...
class UnknownModel(NotFound): ...


class NodeCallFailure(DciError):
    def __init__(self, detail: str = "", step: str = "", entity: str = "", cause: str = ""):
        super().__init__(detail)
        self.step = step
        self.entity = entity
        self.cause = cause

    def data(self) -> dict[str, str]:
        return {"step": self.step, "entity": self.entity, "cause": self.cause}


# transport
class FrameTooLarge(DciError): ...
class MalformedJson(DciError): ...
class Truncated(DciError): ...
class Timeout(DciError): ...
class ConnectionClosed(DciError): ...
class UnknownOp(DciError): ...
