"""Hypothesis strategies for model values."""

from __future__ import annotations

from hypothesis import strategies as st

from dci.model import (
    ArchiveManifest,
    AssemblyDescriptor,
    AttributeDecl,
    AttrValue,
    Behavior,
    ConnectionSpec,
    DeploymentTrace,
    EntityKind,
    EntityRef,
    InstanceSpec,
    NodeMetaInfo,
    PlacementSpec,
    PortAddress,
    PortDecl,
    PortKind,
    RegistrationSpec,
    RegistrationTarget,
    Step,
    TraceEvent,
    ValueType,
)

ident = st.from_regex(r"\A[A-Za-z0-9_][A-Za-z0-9_.:\-]{0,11}\Z")
text = st.text(max_size=12)

attr_values = st.one_of(
    st.builds(AttrValue, st.just(ValueType.STRING), text),
    st.builds(AttrValue, st.just(ValueType.INT), st.integers(-(2**63), 2**63 - 1)),
    st.builds(AttrValue, st.just(ValueType.FLOAT), st.floats(allow_nan=False, allow_infinity=False)),
    st.builds(AttrValue, st.just(ValueType.BOOL), st.booleans()),
)


@st.composite
def attribute_decls(draw):
    vt = draw(st.sampled_from(ValueType))
    default = draw(st.none() | attr_values.filter(lambda v: v.type is vt))
    return AttributeDecl(draw(ident), vt, default)


port_decls = st.builds(PortDecl, ident, st.sampled_from(PortKind), ident)
manifests = st.builds(
    ArchiveManifest,
    ident,
    ident,
    st.lists(port_decls, max_size=4).map(tuple),
    st.lists(attribute_decls(), max_size=3).map(tuple),
    st.lists(attribute_decls(), max_size=3).map(tuple),
    st.sampled_from(Behavior),
)


@st.composite
def entity_refs(draw):
    kind = draw(st.sampled_from(EntityKind))
    node = "" if kind is EntityKind.ASSEMBLY else draw(ident)
    return EntityRef(kind, draw(ident), node)


placements = st.builds(
    PlacementSpec, ident, ident, st.none() | ident, st.dictionaries(ident, text, max_size=2)
)
instance_specs = st.builds(
    InstanceSpec,
    ident,
    ident,
    placements,
    st.dictionaries(ident, attr_values, max_size=2),
    st.dictionaries(ident, attr_values, max_size=2),
    st.none() | ident,
)
connection_specs = st.builds(ConnectionSpec, ident, ident, ident, ident)
registration_specs = st.builds(RegistrationSpec, st.sampled_from(RegistrationTarget), ident, ident)
descriptors = st.builds(
    AssemblyDescriptor,
    ident,
    st.lists(instance_specs, max_size=3).map(tuple),
    st.lists(connection_specs, max_size=3).map(tuple),
    st.lists(registration_specs, max_size=2).map(tuple),
)
node_metas = st.builds(
    NodeMetaInfo,
    ident,
    text,
    text,
    st.integers(1, 256),
    st.integers(0, 2**40),
    st.dictionaries(ident, text, max_size=3),
    st.lists(ident, max_size=3).map(tuple),
    st.integers(0, 50),
)
port_addresses = st.builds(PortAddress, ident, ident, ident)


@st.composite
def traces(draw):
    n = draw(st.integers(0, 5))
    events = []
    for i in range(n):
        events.append(TraceEvent(
            i + 1,
            draw(st.sampled_from(Step)),
            draw(ident),
            draw(st.none() | entity_refs()),
            draw(st.none() | connection_specs),
            draw(text),
        ))
    return DeploymentTrace(tuple(events))
