"""Static checks for manifests, descriptors and port pairs.

Validation never stops at the first problem: every check runs and the full
list of errors comes back sorted by (path, code, detail).
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Mapping

from dci.model.types import (
    ArchiveManifest,
    AssemblyDescriptor,
    AttrValue,
    AttributeDecl,
    PortDecl,
    PortKind,
    ValidationError,
    is_identifier,
)


def check_port_compat(src: PortDecl, dst: PortDecl) -> bool:
    """True iff a connection from ``src`` to ``dst`` is well typed."""
    if src.interface_type != dst.interface_type:
        return False
    if src.kind.is_receptacle:
        return dst.kind is PortKind.FACET
    if src.kind is PortKind.EVENT_SOURCE:
        return dst.kind is PortKind.EVENT_SINK
    return False


def _check_attr_decls(decls, path: str, out: list[ValidationError]) -> None:
    for name, n in Counter(d.name for d in decls).items():
        if n > 1:
            out.append(ValidationError("DuplicateAttribute", f"{path}.{name}", "declared twice"))
    for d in decls:
        if not is_identifier(d.name):
            out.append(ValidationError("InvalidIdentifier", f"{path}.{d.name}", "bad attribute name"))
        if d.default is not None and d.default.type is not d.value_type:
            out.append(
                ValidationError(
                    "AttributeTypeMismatch",
                    f"{path}.{d.name}",
                    f"default is {d.default.type.value}, declared {d.value_type.value}",
                )
            )


def validate_manifest(m: ArchiveManifest, path: str = "manifest") -> list[ValidationError]:
    out: list[ValidationError] = []
    if not m.component_type:
        out.append(ValidationError("InvalidManifest", f"{path}.component_type", "empty"))
    if not m.home_type:
        out.append(ValidationError("InvalidManifest", f"{path}.home_type", "empty"))
    for name, n in Counter(p.name for p in m.ports).items():
        if n > 1:
            out.append(ValidationError("DuplicatePort", f"{path}.ports.{name}", "declared twice"))
    for p in m.ports:
        if not is_identifier(p.name):
            out.append(ValidationError("InvalidIdentifier", f"{path}.ports.{p.name}", "bad port name"))
        if not p.interface_type:
            out.append(ValidationError("InvalidManifest", f"{path}.ports.{p.name}", "empty interface type"))
    _check_attr_decls(m.home_attributes, f"{path}.home_attributes", out)
    _check_attr_decls(m.instance_attributes, f"{path}.instance_attributes", out)
    return sorted(set(out), key=_sort_key)


def _check_values(
    values: Mapping[str, AttrValue],
    lookup,
    path: str,
    out: list[ValidationError],
) -> None:
    for name, value in values.items():
        decl: AttributeDecl | None = lookup(name)
        if decl is None:
            out.append(ValidationError("UnknownAttribute", f"{path}.{name}", "not declared"))
        elif value.type is not decl.value_type:
            out.append(
                ValidationError(
                    "AttributeTypeMismatch",
                    f"{path}.{name}",
                    f"got {value.type.value}, declared {decl.value_type.value}",
                )
            )


def _sort_key(e: ValidationError) -> tuple:
    return (e.path, e.code, e.detail)


def validate_descriptor(
    desc: AssemblyDescriptor, manifests: Mapping[str, ArchiveManifest]
) -> list[ValidationError]:
    out: list[ValidationError] = []
    if not is_identifier(desc.name):
        out.append(ValidationError("InvalidIdentifier", "name", f"bad assembly name {desc.name!r}"))

    checked_manifests: set[str] = set()
    known: dict[str, ArchiveManifest | None] = {}
    counts = Counter(i.instance_id for i in desc.instances)
    for idx, inst in enumerate(desc.instances):
        base = f"instances[{idx}]"
        if counts[inst.instance_id] > 1:
            out.append(ValidationError("DuplicateInstance", f"{base}.instance_id", inst.instance_id))
        if not is_identifier(inst.instance_id):
            out.append(ValidationError("InvalidIdentifier", f"{base}.instance_id", repr(inst.instance_id)))
        pl = inst.placement
        if not pl.server_group or not pl.container_group:
            out.append(ValidationError("InvalidPlacement", f"{base}.placement", "empty server/container group"))
        if pl.node is not None and not pl.node:
            out.append(ValidationError("InvalidPlacement", f"{base}.placement.node", "empty node id"))
        if inst.find_home is not None and not inst.find_home:
            out.append(ValidationError("InvalidPlacement", f"{base}.find_home", "empty home name"))

        manifest = manifests.get(inst.archive_ref)
        known.setdefault(inst.instance_id, manifest)
        if manifest is None:
            out.append(ValidationError("MissingManifest", f"{base}.archive_ref", inst.archive_ref))
            continue
        if inst.archive_ref not in checked_manifests:
            checked_manifests.add(inst.archive_ref)
            out.extend(validate_manifest(manifest, f"manifests.{inst.archive_ref}"))
        _check_values(inst.home_attr_values, manifest.home_attribute, f"{base}.home_attr_values", out)
        _check_values(inst.instance_attr_values, manifest.instance_attribute, f"{base}.instance_attr_values", out)

    simplex_use: Counter[tuple[str, str]] = Counter()
    seen_conns: set = set()
    for idx, conn in enumerate(desc.connections):
        base = f"connections[{idx}]"
        if conn in seen_conns:
            out.append(ValidationError("DuplicateConnection", base, str(conn)))
        seen_conns.add(conn)
        ends = []
        for side, inst_id, port_name in (
            ("from", conn.from_instance, conn.from_port),
            ("to", conn.to_instance, conn.to_port),
        ):
            if inst_id not in known:
                out.append(ValidationError("DanglingReference", f"{base}.{side}_instance", inst_id))
                ends.append(None)
                continue
            manifest = known[inst_id]
            if manifest is None:
                ends.append(None)  # already reported as MissingManifest
                continue
            port = manifest.port(port_name)
            if port is None:
                out.append(ValidationError("UnknownPort", f"{base}.{side}_port", f"{inst_id}.{port_name}"))
            ends.append(port)
        src, dst = ends
        if src is not None and not src.kind.is_origin:
            out.append(ValidationError("PortDirection", f"{base}.from_port", f"{src.kind.value} cannot originate"))
            src = None
        if dst is not None and not dst.kind.is_target:
            out.append(ValidationError("PortDirection", f"{base}.to_port", f"{dst.kind.value} cannot be a target"))
            dst = None
        if src is None or dst is None:
            continue
        if src.kind.is_receptacle != (dst.kind is PortKind.FACET):
            out.append(ValidationError("KindMismatch", base, f"{src.kind.value} -> {dst.kind.value}"))
        elif src.interface_type != dst.interface_type:
            out.append(ValidationError("TypeMismatch", base, f"{src.interface_type} != {dst.interface_type}"))
        if src.kind is PortKind.RECEPTACLE_SIMPLEX:
            simplex_use[(conn.from_instance, conn.from_port)] += 1
            if simplex_use[(conn.from_instance, conn.from_port)] == 2:
                out.append(ValidationError("SimplexOverbooked", base, f"{conn.from_instance}.{conn.from_port}"))

    bindings = Counter(r.binding_name for r in desc.registrations)
    for idx, reg in enumerate(desc.registrations):
        base = f"registrations[{idx}]"
        if reg.instance_id not in known:
            out.append(ValidationError("DanglingReference", f"{base}.instance_id", reg.instance_id))
        if not reg.binding_name or any(not seg for seg in reg.binding_name.split("/")):
            out.append(ValidationError("InvalidBindingName", f"{base}.binding_name", repr(reg.binding_name)))
        elif bindings[reg.binding_name] > 1:
            out.append(ValidationError("DuplicateBinding", f"{base}.binding_name", reg.binding_name))

    return sorted(set(out), key=_sort_key)
