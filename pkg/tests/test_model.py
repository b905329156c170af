from __future__ import annotations

import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from strategies import (
    attr_values,
    descriptors,
    entity_refs,
    manifests,
    node_metas,
    port_addresses,
    traces,
)

from dci.model import (
    ArchiveManifest,
    AssemblyDescriptor,
    AttributeDecl,
    AttrValue,
    Bool,
    CodecError,
    ConnectionSpec,
    DeploymentTrace,
    EntityKind,
    EntityRef,
    Float,
    InstanceSpec,
    Int,
    NodeMetaInfo,
    PlacementSpec,
    PortDecl,
    PortKind,
    RegistrationSpec,
    RegistrationTarget,
    Str,
    ValueType,
    canonical_json,
    check_port_compat,
    decode,
    encode,
    validate_descriptor,
    validate_manifest,
)
from dci.reference_assets import MANIFESTS, reference_descriptor
from dci.reference_assets.generator import node_set, random_descriptor


class TestAttrValue:
    def test_tag_then_value_ordering(self):
        assert Str("z") < Int(-5) < Float(0.0) < Bool(False)
        assert Int(1) < Int(2)
        assert Int(1) != Float(1.0)

    @pytest.mark.parametrize("bad", [
        (ValueType.INT, True), (ValueType.INT, 2**63), (ValueType.INT, "1"),
        (ValueType.FLOAT, float("nan")), (ValueType.FLOAT, float("inf")),
        (ValueType.BOOL, 1), (ValueType.STRING, 3),
    ])
    def test_rejects_payload_not_matching_tag(self, bad):
        with pytest.raises(ValueError):
            AttrValue(*bad)

    def test_int_payload_allowed_for_float(self):
        assert Float(3) == AttrValue(ValueType.FLOAT, 3.0)

    def test_wire_form(self):
        assert json.loads(canonical_json(Int(5))) == {"type": "int", "value": 5}


class TestEntityRef:
    def test_assembly_ref_has_no_node(self):
        assert EntityRef(EntityKind.ASSEMBLY, "a1").node_id == ""

    def test_other_kinds_need_a_node(self):
        with pytest.raises(ValueError):
            EntityRef(EntityKind.SERVER, "s1")

    def test_empty_id_rejected(self):
        with pytest.raises(ValueError):
            EntityRef(EntityKind.NODE, "", "n1")


def test_port_kind_has_five_variants():
    assert len(PortKind) == 5


def test_node_meta_sorts_archives_and_checks_counters():
    m = NodeMetaInfo("n1", installed_archives=("b", "a"))
    assert m.installed_archives == ("a", "b")
    with pytest.raises(ValueError):
        NodeMetaInfo("n1", cpu_count=0)


# canonical serialization


@pytest.mark.parametrize("strategy,cls", [
    (manifests, ArchiveManifest),
    (descriptors, AssemblyDescriptor),
    (entity_refs(), EntityRef),
    (node_metas, NodeMetaInfo),
    (traces(), DeploymentTrace),
    (attr_values, AttrValue),
])
@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_round_trip(strategy, cls, data):
    x = data.draw(strategy)
    raw = encode(x)
    assert decode(cls, raw) == x
    assert encode(decode(cls, raw)) == raw


@given(port_addresses)
def test_port_address_round_trip(addr):
    assert decode(type(addr), encode(addr)) == addr


def test_canonical_form_sorts_keys_and_lowercases_enums():
    raw = canonical_json(PortDecl("in", PortKind.RECEPTACLE_MULTIPLEX, "S"))
    assert raw == b'{"interface_type":"S","kind":"receptacle_multiplex","name":"in"}'


def test_decoder_accepts_any_key_order():
    assert decode(PortDecl, b'{"name":"in","kind":"facet","interface_type":"S"}') == PortDecl("in", PortKind.FACET, "S")


@pytest.mark.parametrize("raw", [
    b'{"name":"in","kind":"socket","interface_type":"S"}',
    b'{"name":"in","kind":"facet","interface_type":"S","extra":1}',
    b'{"name":1,"kind":"facet","interface_type":"S"}',
    b"not json",
])
def test_decoder_rejects_malformed_input(raw):
    with pytest.raises(CodecError):
        decode(PortDecl, raw)


# port compatibility


def test_matching_receptacle_and_facet():
    assert check_port_compat(PortDecl("r", PortKind.RECEPTACLE_SIMPLEX, "log"), PortDecl("f", PortKind.FACET, "log"))


def test_facet_never_originates():
    assert not check_port_compat(PortDecl("a", PortKind.FACET, "log"), PortDecl("b", PortKind.FACET, "log"))


def test_kind_matrix_has_exactly_three_true_cells():
    cells = {
        (a, b)
        for a, b in itertools.product(PortKind, PortKind)
        if check_port_compat(PortDecl("x", a, "T"), PortDecl("y", b, "T"))
    }
    assert cells == {
        (PortKind.RECEPTACLE_SIMPLEX, PortKind.FACET),
        (PortKind.RECEPTACLE_MULTIPLEX, PortKind.FACET),
        (PortKind.EVENT_SOURCE, PortKind.EVENT_SINK),
    }


@given(st.sampled_from(PortKind), st.sampled_from(PortKind), st.sampled_from(["A", "B"]), st.sampled_from(["A", "B"]))
def test_compat_is_antisymmetric_and_type_sensitive(a, b, ta, tb):
    fwd = check_port_compat(PortDecl("x", a, ta), PortDecl("y", b, tb))
    back = check_port_compat(PortDecl("y", b, tb), PortDecl("x", a, ta))
    if a is not b:
        assert not (fwd and back)
    if ta != tb:
        assert not fwd


# validation


def test_empty_descriptor_is_valid():
    assert validate_descriptor(AssemblyDescriptor("empty"), {}) == []


def test_reference_descriptor_is_valid():
    assert validate_descriptor(reference_descriptor(), MANIFESTS) == []


def _two(kind_from=PortKind.RECEPTACLE_SIMPLEX, type_from="A", kind_to=PortKind.FACET, type_to="B"):
    ms = {
        "x": ArchiveManifest("X", "XHome", (PortDecl("out", kind_from, type_from),)),
        "y": ArchiveManifest("Y", "YHome", (PortDecl("in", kind_to, type_to),)),
    }
    desc = AssemblyDescriptor(
        "d",
        (InstanceSpec("a", "x", PlacementSpec("g", "c")), InstanceSpec("b", "y", PlacementSpec("g", "c"))),
        (ConnectionSpec("a", "out", "b", "in"),),
    )
    return desc, ms


def test_interface_type_mismatch_reported_at_connection():
    desc, ms = _two()
    errors = validate_descriptor(desc, ms)
    assert [(e.code, e.path) for e in errors] == [("TypeMismatch", "connections[0]")]


def test_kind_mismatch_and_direction():
    desc, ms = _two(PortKind.EVENT_SOURCE, "A", PortKind.FACET, "A")
    assert [e.code for e in validate_descriptor(desc, ms)] == ["KindMismatch"]
    desc, ms = _two(PortKind.FACET, "A", PortKind.FACET, "A")
    assert [e.code for e in validate_descriptor(desc, ms)] == ["PortDirection"]


def test_collects_every_problem():
    desc = AssemblyDescriptor(
        "bad name!",
        (
            InstanceSpec("a", "missing", PlacementSpec("", "c")),
            InstanceSpec("a", "echo", PlacementSpec("g", "c"), home_attr_values={"greeting": Int(1), "nope": Int(2)}),
        ),
        (ConnectionSpec("a", "in", "ghost", "in"),),
        (RegistrationSpec(RegistrationTarget.HOME, "a", "x//y"), RegistrationSpec(RegistrationTarget.HOME, "zz", "p"),
         RegistrationSpec(RegistrationTarget.HOME, "a", "p")),
    )
    codes = {e.code for e in validate_descriptor(desc, MANIFESTS)}
    assert codes == {
        "InvalidIdentifier", "DuplicateInstance", "InvalidPlacement", "MissingManifest", "AttributeTypeMismatch",
        "UnknownAttribute", "DanglingReference", "InvalidBindingName", "DuplicateBinding",
    }


def test_simplex_used_twice_and_duplicate_connection():
    d = reference_descriptor()
    extra = (ConnectionSpec("relay1", "out", "echo", "in"), ConnectionSpec("counter", "peers", "relay1", "in"))
    d = AssemblyDescriptor(d.name, d.instances, d.connections + extra, d.registrations)
    assert sorted(e.code for e in validate_descriptor(d, MANIFESTS)) == ["DuplicateConnection", "SimplexOverbooked"]


def test_manifest_checks():
    m = ArchiveManifest(
        "", "H",
        (PortDecl("p", PortKind.FACET, "T"), PortDecl("p", PortKind.FACET, "")),
        (AttributeDecl("a", ValueType.INT, Str("x")), AttributeDecl("a", ValueType.INT)),
    )
    codes = sorted({e.code for e in validate_manifest(m)})
    assert codes == ["AttributeTypeMismatch", "DuplicateAttribute", "DuplicatePort", "InvalidManifest"]


def _dangling_oracle(desc: AssemblyDescriptor) -> set[str]:
    """Rescan every cross reference by hand."""
    declared = [i.instance_id for i in desc.instances]
    out = set()
    for idx, c in enumerate(desc.connections):
        if c.from_instance not in declared:
            out.add(f"connections[{idx}].from_instance")
        if c.to_instance not in declared:
            out.add(f"connections[{idx}].to_instance")
    for idx, r in enumerate(desc.registrations):
        if r.instance_id not in declared:
            out.add(f"registrations[{idx}].instance_id")
    return out


@pytest.mark.parametrize("seed", range(40))
def test_dropping_an_instance_yields_exactly_the_dangling_references(seed):
    rng = random.Random(seed)
    desc = random_descriptor(rng, node_set(3))
    while len(desc.instances) < 2:
        desc = random_descriptor(rng, node_set(3))
    assert validate_descriptor(desc, MANIFESTS) == []
    victim = rng.choice(desc.instances).instance_id
    dropped = AssemblyDescriptor(
        desc.name, tuple(i for i in desc.instances if i.instance_id != victim), desc.connections, desc.registrations
    )
    errors = validate_descriptor(dropped, MANIFESTS)
    assert {e.code for e in errors} <= {"DanglingReference"}
    assert {e.path for e in errors} == _dangling_oracle(dropped)


@settings(max_examples=50, deadline=None)
@given(descriptors)
def test_validation_is_deterministic_and_order_normalized(desc):
    shuffled = AssemblyDescriptor(desc.name, tuple(reversed(desc.instances)), desc.connections, desc.registrations)
    a = validate_descriptor(desc, MANIFESTS)
    assert a == validate_descriptor(desc, MANIFESTS)
    assert a == sorted(a, key=lambda e: (e.path, e.code, e.detail))
    # instance order only changes instance paths, not the set of codes
    assert {e.code for e in a} == {e.code for e in validate_descriptor(shuffled, MANIFESTS)}
