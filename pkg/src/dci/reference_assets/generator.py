"""Seeded random descriptors over the reference components.

Bounds: at most 8 instances, 6 connections, 4 nodes and 3 attribute
settings per instance. Every generated descriptor validates and its
placement is satisfiable on the nodes it was generated for.
"""

from __future__ import annotations

import random

from dci.model import (
    AssemblyDescriptor,
    AttrValue,
    Bool,
    ConnectionSpec,
    Float,
    InstanceSpec,
    Int,
    PlacementSpec,
    PortKind,
    RegistrationSpec,
    RegistrationTarget,
    Str,
    ValueType,
)
from dci.reference_assets import MANIFESTS, NODE_TABLE

MAX_INSTANCES = 8
MAX_CONNECTIONS = 6
MAX_NODES = 4
MAX_ATTR_SETTINGS = 3


def node_set(count: int) -> dict[str, dict[str, str]]:
    return {n: dict(NODE_TABLE[n]) for n in sorted(NODE_TABLE)[:count]}


def _value(rng: random.Random, vt: ValueType) -> AttrValue:
    if vt is ValueType.STRING:
        return Str(rng.choice(["", "a", "hello", "x-y", "été"]))
    if vt is ValueType.INT:
        return Int(rng.randint(-1000, 1000))
    if vt is ValueType.FLOAT:
        return Float(rng.choice([0.0, 0.5, -2.25, 1e6]))
    return Bool(rng.random() < 0.5)


def random_descriptor(rng: random.Random, nodes: dict[str, dict[str, str]], name: str = "gen") -> AssemblyDescriptor:
    node_ids = sorted(nodes)
    instances = []
    for i in range(rng.randint(0, MAX_INSTANCES)):
        ref = rng.choice(sorted(MANIFESTS))
        manifest = MANIFESTS[ref]
        mode = rng.choice(["explicit", "constraint", "free"])
        node, constraints = None, {}
        if mode == "explicit":
            node = rng.choice(node_ids)
        elif mode == "constraint":
            source = nodes[rng.choice(node_ids)]
            key = rng.choice(sorted(source))
            constraints = {key: source[key]}
        placement = PlacementSpec(rng.choice(["g1", "g2", "g3"]), rng.choice(["c1", "c2"]), node, constraints)
        decls = [("home", d) for d in manifest.home_attributes] + [("inst", d) for d in manifest.instance_attributes]
        chosen = rng.sample(decls, rng.randint(0, min(MAX_ATTR_SETTINGS, len(decls))))
        home_vals = {d.name: _value(rng, d.value_type) for side, d in chosen if side == "home"}
        inst_vals = {d.name: _value(rng, d.value_type) for side, d in chosen if side == "inst"}
        instances.append(InstanceSpec(f"i{i}", ref, placement, home_vals, inst_vals))

    candidates = []
    for a in instances:
        for p in MANIFESTS[a.archive_ref].ports:
            if not p.kind.is_origin:
                continue
            for b in instances:
                for q in MANIFESTS[b.archive_ref].ports:
                    if q.interface_type != p.interface_type:
                        continue
                    if (p.kind.is_receptacle and q.kind is PortKind.FACET) or (
                        p.kind is PortKind.EVENT_SOURCE and q.kind is PortKind.EVENT_SINK
                    ):
                        candidates.append(ConnectionSpec(a.instance_id, p.name, b.instance_id, q.name))
    rng.shuffle(candidates)
    want = rng.randint(0, MAX_CONNECTIONS)
    refs = {i.instance_id: i.archive_ref for i in instances}
    connections = []
    used_simplex = set()
    for c in candidates:
        if len(connections) >= want:
            break
        kind = MANIFESTS[refs[c.from_instance]].port(c.from_port).kind
        if kind is PortKind.RECEPTACLE_SIMPLEX:
            if (c.from_instance, c.from_port) in used_simplex:
                continue
            used_simplex.add((c.from_instance, c.from_port))
        connections.append(c)

    registrations = []
    if instances:
        for k in range(rng.randint(0, 2)):
            inst = rng.choice(instances)
            target = rng.choice([RegistrationTarget.HOME, RegistrationTarget.INSTANCE])
            registrations.append(RegistrationSpec(target, inst.instance_id, f"{name}/r{k}/{inst.instance_id}"))

    return AssemblyDescriptor(name, tuple(instances), tuple(connections), tuple(registrations))


def random_case(seed: int, name: str = "gen") -> tuple[dict[str, dict[str, str]], AssemblyDescriptor]:
    rng = random.Random(seed)
    nodes = node_set(rng.randint(1, MAX_NODES))
    return nodes, random_descriptor(rng, nodes, name)
