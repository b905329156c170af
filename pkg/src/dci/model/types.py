"""Value types shared by every module.

All types are frozen dataclasses. Sequences are stored as tuples and maps as
plain dicts; nothing mutates them after construction.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

IDENTIFIER_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.:\-]*$")
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


def is_identifier(value: object) -> bool:
    return isinstance(value, str) and bool(IDENTIFIER_RE.match(value))


def _freeze(obj: Any, *names: str) -> None:
    for name in names:
        object.__setattr__(obj, name, tuple(getattr(obj, name)))


def _freeze_map(obj: Any, *names: str) -> None:
    for name in names:
        object.__setattr__(obj, name, dict(getattr(obj, name)))


class PortKind(str, Enum):
    FACET = "facet"
    RECEPTACLE_SIMPLEX = "receptacle_simplex"
    RECEPTACLE_MULTIPLEX = "receptacle_multiplex"
    EVENT_SOURCE = "event_source"
    EVENT_SINK = "event_sink"

    @property
    def is_receptacle(self) -> bool:
        return self in (PortKind.RECEPTACLE_SIMPLEX, PortKind.RECEPTACLE_MULTIPLEX)

    @property
    def is_origin(self) -> bool:
        """Kinds that may appear on the ``from`` side of a connection."""
        return self.is_receptacle or self is PortKind.EVENT_SOURCE

    @property
    def is_target(self) -> bool:
        return self in (PortKind.FACET, PortKind.EVENT_SINK)


class ValueType(str, Enum):
    STRING = "string"
    INT = "int"
    FLOAT = "float"
    BOOL = "bool"


class Behavior(str, Enum):
    NULL = "null"
    ECHO = "echo"
    COUNTER = "counter"
    RELAY = "relay"


class EntityKind(str, Enum):
    NODE = "node"
    SERVER = "server"
    CONTAINER = "container"
    HOME = "home"
    INSTANCE = "instance"
    ASSEMBLY = "assembly"


class RegistrationTarget(str, Enum):
    HOME = "home"
    INSTANCE = "instance"


class Step(str, Enum):
    INSTALL_ARCHIVE = "install_archive"
    CREATE_ASSEMBLY = "create_assembly"
    CREATE_SERVER = "create_server"
    CREATE_CONTAINER = "create_container"
    INSTALL_HOME = "install_home"
    CONFIGURE_HOME = "configure_home"
    CREATE_INSTANCE = "create_instance"
    CONFIGURE_INSTANCE = "configure_instance"
    CONNECT = "connect"
    CONFIGURATION_COMPLETE = "configuration_complete"
    REGISTER = "register"
    TEARDOWN_STEP = "teardown_step"
    ROLLBACK_STEP = "rollback_step"


_TYPE_ORDER = {t: i for i, t in enumerate(ValueType)}


@dataclass(frozen=True)
class AttrValue:
    """A typed scalar attribute value.

    Values compare by type tag first, then by payload, so ``Int(1)`` and
    ``Float(1.0)`` are different values.
    """

    type: ValueType
    value: Union[str, int, float, bool]

    def __post_init__(self):
        t = ValueType(self.type)
        object.__setattr__(self, "type", t)
        v = self.value
        if t is ValueType.STRING:
            ok = isinstance(v, str)
        elif t is ValueType.INT:
            ok = isinstance(v, int) and not isinstance(v, bool) and INT64_MIN <= v <= INT64_MAX
        elif t is ValueType.FLOAT:
            ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
            if ok:
                object.__setattr__(self, "value", float(v))
        else:
            ok = isinstance(v, bool)
        if not ok:
            raise ValueError(f"{v!r} is not a valid {t.value} attribute value")

    def sort_key(self) -> tuple:
        return (_TYPE_ORDER[self.type], self.value)

    def __lt__(self, other: AttrValue) -> bool:
        if not isinstance(other, AttrValue):
            return NotImplemented
        return self.sort_key() < other.sort_key()

    def __json__(self) -> dict:
        return {"type": self.type.value, "value": self.value}

    @classmethod
    def __from_json__(cls, data: Any) -> AttrValue:
        if not isinstance(data, dict) or set(data) != {"type", "value"}:
            raise ValueError(f"bad attribute value {data!r}")
        return cls(ValueType(data["type"]), data["value"])


def Str(v: str) -> AttrValue:
    return AttrValue(ValueType.STRING, v)


def Int(v: int) -> AttrValue:
    return AttrValue(ValueType.INT, v)


def Float(v: float) -> AttrValue:
    return AttrValue(ValueType.FLOAT, v)


def Bool(v: bool) -> AttrValue:
    return AttrValue(ValueType.BOOL, v)


@dataclass(frozen=True)
class PortDecl:
    name: str
    kind: PortKind
    interface_type: str


@dataclass(frozen=True)
class AttributeDecl:
    name: str
    value_type: ValueType
    default: AttrValue | None = None


@dataclass(frozen=True)
class ArchiveManifest:
    component_type: str
    home_type: str
    ports: tuple[PortDecl, ...] = ()
    home_attributes: tuple[AttributeDecl, ...] = ()
    instance_attributes: tuple[AttributeDecl, ...] = ()
    behavior: Behavior = Behavior.NULL

    def __post_init__(self):
        _freeze(self, "ports", "home_attributes", "instance_attributes")

    def port(self, name: str) -> PortDecl | None:
        for p in self.ports:
            if p.name == name:
                return p
        return None

    def home_attribute(self, name: str) -> AttributeDecl | None:
        return next((a for a in self.home_attributes if a.name == name), None)

    def instance_attribute(self, name: str) -> AttributeDecl | None:
        return next((a for a in self.instance_attributes if a.name == name), None)


@dataclass(frozen=True)
class ComponentArchive:
    manifest: ArchiveManifest
    payload: bytes
    checksum: str


@dataclass(frozen=True)
class EntityRef:
    kind: EntityKind
    id: str
    node_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", EntityKind(self.kind))
        if not self.id:
            raise ValueError("entity id must be non-empty")
        if self.kind is not EntityKind.ASSEMBLY and not self.node_id:
            raise ValueError(f"{self.kind.value} reference needs a node id")


@dataclass(frozen=True)
class PortAddress:
    """Where a port lives: node, instance id, port name."""

    node_id: str
    instance_id: str
    port: str


@dataclass(frozen=True)
class PlacementSpec:
    server_group: str
    container_group: str
    node: str | None = None
    constraints: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _freeze_map(self, "constraints")


@dataclass(frozen=True)
class InstanceSpec:
    """One component instance of an assembly.

    ``find_home`` names a home in the domain's home finder; when set, the
    instance is created through that existing home instead of a new one.
    """

    instance_id: str
    archive_ref: str
    placement: PlacementSpec
    home_attr_values: dict[str, AttrValue] = field(default_factory=dict)
    instance_attr_values: dict[str, AttrValue] = field(default_factory=dict)
    find_home: str | None = None

    def __post_init__(self):
        _freeze_map(self, "home_attr_values", "instance_attr_values")


@dataclass(frozen=True)
class ConnectionSpec:
    from_instance: str
    from_port: str
    to_instance: str
    to_port: str

    def __str__(self) -> str:
        return f"{self.from_instance}.{self.from_port}->{self.to_instance}.{self.to_port}"


@dataclass(frozen=True)
class RegistrationSpec:
    target: RegistrationTarget
    instance_id: str
    binding_name: str


@dataclass(frozen=True)
class AssemblyDescriptor:
    name: str
    instances: tuple[InstanceSpec, ...] = ()
    connections: tuple[ConnectionSpec, ...] = ()
    registrations: tuple[RegistrationSpec, ...] = ()

    def __post_init__(self):
        _freeze(self, "instances", "connections", "registrations")

    def instance(self, instance_id: str) -> InstanceSpec | None:
        return next((i for i in self.instances if i.instance_id == instance_id), None)


@dataclass(frozen=True)
class NodeMetaInfo:
    node_id: str
    os: str = ""
    arch: str = ""
    cpu_count: int = 1
    mem_bytes: int = 0
    properties: dict[str, str] = field(default_factory=dict)
    installed_archives: tuple[str, ...] = ()
    instance_load: int = 0

    def __post_init__(self):
        _freeze_map(self, "properties")
        object.__setattr__(self, "installed_archives", tuple(sorted(self.installed_archives)))
        if self.cpu_count < 1 or self.mem_bytes < 0 or self.instance_load < 0:
            raise ValueError("invalid node meta-info counters")


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    step: Step
    node_id: str = ""
    subject: EntityRef | None = None
    connection: ConnectionSpec | None = None
    detail: str = ""


@dataclass(frozen=True)
class DeploymentTrace:
    events: tuple[TraceEvent, ...] = ()

    def __post_init__(self):
        _freeze(self, "events")

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def steps(self) -> list[Step]:
        return [e.step for e in self.events]


@dataclass(frozen=True)
class ValidationError:
    code: str
    path: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code} at {self.path}: {self.detail}"
