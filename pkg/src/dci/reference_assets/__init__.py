"""Reference components, the reference assembly and test fixtures.

Three component types are shipped:

* ``echo``: facet ``in`` returns its payload; sink ``events`` records ticks.
* ``relay``: facet ``in`` forwards through simplex receptacle ``out``;
  source ``ticks`` publishes events.
* ``counter``: facet ``in`` returns an incrementing count; sink ``events``;
  multiplex receptacle ``peers``.

The reference assembly places one echo, two relays and one counter on three
nodes and wires a relay chain ending at the echo plus one source feeding two
sinks on different nodes.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from dci.archive import pack
from dci.model import (
    ArchiveManifest,
    AssemblyDescriptor,
    AttributeDecl,
    Behavior,
    Bool,
    ComponentArchive,
    ConnectionSpec,
    Float,
    InstanceSpec,
    Int,
    PlacementSpec,
    PortDecl,
    PortKind,
    RegistrationSpec,
    RegistrationTarget,
    Str,
    ValueType,
)

SERVICE = "Service"
TICK = "Tick"

ECHO = ArchiveManifest(
    component_type="Echo",
    home_type="EchoHome",
    ports=(
        PortDecl("in", PortKind.FACET, SERVICE),
        PortDecl("events", PortKind.EVENT_SINK, TICK),
    ),
    home_attributes=(AttributeDecl("greeting", ValueType.STRING, Str("hello")),),
    instance_attributes=(
        AttributeDecl("prefix", ValueType.STRING, Str("")),
        AttributeDecl("verbose", ValueType.BOOL, Bool(False)),
    ),
    behavior=Behavior.ECHO,
)

RELAY = ArchiveManifest(
    component_type="Relay",
    home_type="RelayHome",
    ports=(
        PortDecl("in", PortKind.FACET, SERVICE),
        PortDecl("out", PortKind.RECEPTACLE_SIMPLEX, SERVICE),
        PortDecl("ticks", PortKind.EVENT_SOURCE, TICK),
    ),
    home_attributes=(AttributeDecl("hops", ValueType.INT, Int(0)),),
    instance_attributes=(AttributeDecl("label", ValueType.STRING, Str("relay")),),
    behavior=Behavior.RELAY,
)

COUNTER = ArchiveManifest(
    component_type="Counter",
    home_type="CounterHome",
    ports=(
        PortDecl("in", PortKind.FACET, SERVICE),
        PortDecl("events", PortKind.EVENT_SINK, TICK),
        PortDecl("peers", PortKind.RECEPTACLE_MULTIPLEX, SERVICE),
    ),
    home_attributes=(AttributeDecl("start", ValueType.INT, Int(0)),),
    instance_attributes=(
        AttributeDecl("step", ValueType.INT, Int(1)),
        AttributeDecl("scale", ValueType.FLOAT, Float(1.0)),
    ),
    behavior=Behavior.COUNTER,
)

MANIFESTS: dict[str, ArchiveManifest] = {"echo": ECHO, "relay": RELAY, "counter": COUNTER}

# node properties used by the reference assembly and the random generator
NODE_TABLE: dict[str, dict[str, str]] = {
    "n1": {"zone": "us", "role": "front"},
    "n2": {"zone": "us", "role": "relay"},
    "n3": {"zone": "eu", "role": "store"},
    "n4": {"zone": "eu", "role": "relay"},
}


def reference_nodes() -> dict[str, dict[str, str]]:
    return {n: dict(NODE_TABLE[n]) for n in ("n1", "n2", "n3")}


def reference_archives() -> dict[str, ComponentArchive]:
    return {ref: pack(m, f"{ref} component payload\n".encode()) for ref, m in MANIFESTS.items()}


def reference_descriptor(name: str = "reference") -> AssemblyDescriptor:
    return AssemblyDescriptor(
        name=name,
        instances=(
            InstanceSpec(
                "echo", "echo", PlacementSpec("apps", "main", node="n1"),
                home_attr_values={"greeting": Str("bonjour")},
                instance_attr_values={"prefix": Str(">")},
            ),
            InstanceSpec(
                "relay1", "relay", PlacementSpec("relays", "main", constraints={"role": "relay"}),
                home_attr_values={"hops": Int(1)},
                instance_attr_values={"label": Str("first")},
            ),
            InstanceSpec(
                "relay2", "relay", PlacementSpec("relays", "main", constraints={"role": "relay"}),
                instance_attr_values={"label": Str("second")},
            ),
            InstanceSpec(
                "counter", "counter", PlacementSpec("apps", "main", constraints={"zone": "eu"}),
                instance_attr_values={"step": Int(2)},
            ),
        ),
        connections=(
            ConnectionSpec("counter", "peers", "relay1", "in"),
            ConnectionSpec("relay1", "out", "relay2", "in"),
            ConnectionSpec("relay2", "out", "echo", "in"),
            ConnectionSpec("relay1", "ticks", "echo", "events"),
            ConnectionSpec("relay1", "ticks", "counter", "events"),
        ),
        registrations=(
            RegistrationSpec(RegistrationTarget.HOME, "echo", "reference/echo-home"),
            RegistrationSpec(RegistrationTarget.INSTANCE, "relay1", "reference/entry"),
        ),
    )


def fixtures_dir() -> Path:
    return Path(str(resources.files("dci.reference_assets") / "fixtures"))


__all__ = [
    "COUNTER",
    "ECHO",
    "MANIFESTS",
    "NODE_TABLE",
    "RELAY",
    "fixtures_dir",
    "reference_archives",
    "reference_descriptor",
    "reference_nodes",
]
