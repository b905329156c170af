"""Independent model of a deployment, used as the test oracle.

Nothing here imports the assembly coordinator. ``oracle_interpret`` applies
a descriptor to an in-memory model using its own placement code, and
``observe`` flattens what the running system reports into the same shape
so the two can be compared with ``==``.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from typing import Any

from dci.errors import UnsatisfiablePlacement, ValidationFailure
from dci.model import (
    ArchiveManifest,
    AssemblyDescriptor,
    DeploymentTrace,
    EntityKind,
    NodeMetaInfo,
    RegistrationTarget,
    Step,
    to_jsonable,
    validate_descriptor,
)


def oracle_placement(descriptor: AssemblyDescriptor, domain_info: Iterable[NodeMetaInfo]) -> dict[str, str]:
    """Brute force: score every node for every instance, take the best score."""
    metas = list(domain_info)
    load = {m.node_id: m.instance_load for m in metas}
    props = {m.node_id: m.properties for m in metas}
    out: dict[str, str] = {}
    bad: list[str] = []
    for inst in descriptor.instances:
        want = inst.placement.constraints
        scored = []
        for node in props:
            if inst.placement.node is not None and node != inst.placement.node:
                continue
            if any(props[node].get(k) != v for k, v in want.items()):
                continue
            scored.append((load[node], node))
        if not scored:
            bad.append(inst.instance_id)
            continue
        scored.sort()
        node = scored[0][1]
        out[inst.instance_id] = node
        load[node] = load[node] + 1
    if bad:
        raise UnsatisfiablePlacement(f"no node for {bad}")
    return out


def _attrs(decls, values) -> dict:
    merged = {d.name: d.default for d in decls if d.default is not None}
    merged.update(values)
    return to_jsonable(merged)


def oracle_interpret(
    descriptor: AssemblyDescriptor,
    domain_info: Iterable[NodeMetaInfo],
    manifests: Mapping[str, ArchiveManifest],
    assembly_id: str,
) -> dict[str, Any]:
    """Expected state after deploying ``descriptor`` as ``assembly_id``."""
    errors = validate_descriptor(descriptor, manifests)
    if errors:
        raise ValidationFailure("; ".join(str(e) for e in errors))
    placement = oracle_placement(descriptor, domain_info)
    hierarchy: dict = {}
    for inst in descriptor.instances:
        m = manifests[inst.archive_ref]
        node = placement[inst.instance_id]
        pl = inst.placement
        hierarchy.setdefault(node, {}).setdefault(pl.server_group, {}).setdefault(pl.container_group, {})[
            inst.instance_id
        ] = {
            "archive": inst.archive_ref,
            "home_attrs": _attrs(m.home_attributes, inst.home_attr_values),
            "instance_attrs": _attrs(m.instance_attributes, inst.instance_attr_values),
            "configured": True,
        }
    outbound = sorted([c.from_instance, c.from_port, c.to_instance, c.to_port] for c in descriptor.connections)
    inbound = sorted([c.to_instance, c.to_port, c.from_instance, c.from_port] for c in descriptor.connections)
    names = {}
    homes = {}
    for reg in descriptor.registrations:
        kind = EntityKind.HOME if reg.target is RegistrationTarget.HOME else EntityKind.INSTANCE
        names[reg.binding_name] = [kind.value, reg.instance_id]
        if reg.target is RegistrationTarget.HOME:
            archive = descriptor.instance(reg.instance_id).archive_ref
            homes[f"{assembly_id}/{reg.instance_id}/home"] = [reg.instance_id, manifests[archive].home_type]
    return {
        "placement": placement,
        "hierarchy": hierarchy,
        "outbound": outbound,
        "inbound": inbound,
        "names": names,
        "homes": homes,
    }


def observe(
    descriptor: AssemblyDescriptor,
    placements: Mapping[str, Any],
    snapshots: Mapping[str, dict],
    registry: dict,
) -> dict[str, Any]:
    """Flatten introspection results into the shape produced by ``oracle_interpret``.

    ``placements`` maps logical instance ids to objects with ``node_id``,
    ``home`` and ``instance`` attributes (the assembly view's placements).
    Entities that belong to no placement show up under ``?<id>`` keys so
    leaks make the comparison fail.
    """
    by_inst = {p.instance.id: iid for iid, p in placements.items()}
    by_home = {p.home.id: iid for iid, p in placements.items()}
    specs = {i.instance_id: i for i in descriptor.instances}

    def logical(entity_id: str) -> str:
        return by_inst.get(entity_id) or by_home.get(entity_id) or f"?{entity_id}"

    hierarchy: dict = {}
    outbound, inbound = [], []
    for node, snap in sorted(snapshots.items()):
        for server in snap["servers"]:
            for container in server["containers"]:
                if not container["homes"]:
                    hierarchy.setdefault(node, {}).setdefault(f"?{server['id']}", {})[f"?{container['id']}"] = {}
                for home in container["homes"]:
                    if not home["instances"]:
                        hierarchy.setdefault(node, {}).setdefault(f"?{server['id']}", {}).setdefault(
                            f"?{container['id']}", {})[f"?{home['id']}"] = {}
                    for inst in home["instances"]:
                        iid = logical(inst["id"])
                        spec = specs.get(iid)
                        sg = spec.placement.server_group if spec else f"?{server['id']}"
                        cg = spec.placement.container_group if spec else f"?{container['id']}"
                        hierarchy.setdefault(node, {}).setdefault(sg, {}).setdefault(cg, {})[iid] = {
                            "archive": home["archive_id"],
                            "home_attrs": home["attrs"],
                            "instance_attrs": inst["attrs"],
                            "configured": inst["configured"],
                        }
                        for port, table in inst["ports"].items():
                            for peer in table["connections"].values():
                                row = [iid, port, logical(peer["instance_id"]), peer["port"]]
                                (outbound if table["direction"] == "outbound" else inbound).append(row)
    names = {}
    for path, ref in registry["names"].items():
        names[path] = [ref["kind"], logical(ref["id"])]
    homes = {name: [logical(ref["id"]), home_type] for name, (ref, home_type) in registry["homes"].items()}
    return {
        "placement": {iid: p.node_id for iid, p in placements.items()},
        "hierarchy": hierarchy,
        "outbound": sorted(outbound),
        "inbound": sorted(inbound),
        "names": names,
        "homes": homes,
    }


def trace_violations(trace: DeploymentTrace) -> list[str]:
    """Every broken phase-ordering rule of a successful deployment trace."""
    events = list(trace)
    out: list[str] = []
    pos = {id(e): i for i, e in enumerate(events)}

    def at(step: Step) -> list[int]:
        return [pos[id(e)] for e in events if e.step is step]

    global_order = [
        (Step.INSTALL_ARCHIVE, Step.CREATE_SERVER),
        (Step.INSTALL_ARCHIVE, Step.CREATE_CONTAINER),
        (Step.INSTALL_ARCHIVE, Step.INSTALL_HOME),
        (Step.CREATE_INSTANCE, Step.CONNECT),
        (Step.CONNECT, Step.CONFIGURATION_COMPLETE),
        (Step.CREATE_INSTANCE, Step.CONFIGURATION_COMPLETE),
        (Step.CONFIGURATION_COMPLETE, Step.REGISTER),
    ]
    for before, after in global_order:
        a, b = at(before), at(after)
        if a and b and max(a) > min(b):
            out.append(f"{before.value} after {after.value}")

    chain = [Step.CREATE_SERVER, Step.CREATE_CONTAINER, Step.INSTALL_HOME, Step.CREATE_INSTANCE]
    nodes = {e.node_id for e in events if e.step in chain}
    for node in sorted(nodes):
        idx = {s: [i for i, e in enumerate(events) if e.step is s and e.node_id == node] for s in chain}
        for i, before in enumerate(chain):
            for after in chain[i + 1:]:
                if idx[before] and idx[after] and max(idx[before]) > min(idx[after]):
                    out.append(f"{node}: {before.value} after {after.value}")

    # ConfigureHome precedes the first CreateInstance of that home
    home_owner = {e.subject.id: e.detail for e in events if e.step is Step.INSTALL_HOME and e.subject}
    first_create = {}
    for i, e in enumerate(events):
        if e.step is Step.CREATE_INSTANCE:
            first_create.setdefault(e.detail, i)
    for i, e in enumerate(events):
        if e.step is Step.CONFIGURE_HOME and e.subject is not None:
            owner = home_owner.get(e.subject.id)
            if owner is None:
                out.append(f"configure_home for unknown home {e.subject.id}")
            elif owner in first_create and first_create[owner] < i:
                out.append(f"configure_home {e.subject.id} after create_instance {owner}")

    # ConfigureInstance precedes that instance's ConfigurationComplete
    complete = {e.subject.id: i for i, e in enumerate(events)
                if e.step is Step.CONFIGURATION_COMPLETE and e.subject is not None}
    for i, e in enumerate(events):
        if e.step is Step.CONFIGURE_INSTANCE and e.subject is not None:
            if complete.get(e.subject.id, len(events)) < i:
                out.append(f"configure_instance {e.subject.id} after configuration_complete")

    seqs = [e.seq for e in events]
    if seqs != sorted(seqs) or len(set(seqs)) != len(seqs):
        out.append("sequence numbers not strictly increasing")
    return out
