"""Assembly models, placement and the deployment coordinator.

A deployment runs ten phases in a fixed order: archive distribution,
servers, containers, homes, home attributes, instances, instance
attributes, connections, configuration_complete and registration. Inside a
phase the calls for different nodes run in parallel; the next phase starts
only after every node has finished the current one.

Everything a deployment acquires is appended to the record's journal.
Rollback and teardown both walk that journal backwards.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import zipfile
from collections import defaultdict
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from dci.archive import decode_archive, encode_archive, verify
from dci.errors import (
    AlreadyBound,
    BadRequest,
    ChecksumMismatch,
    DciError,
    DuplicateId,
    InjectedFault,
    InUse,
    InvalidState,
    NodeCallFailure,
    NotBound,
    NotConnected,
    NotFound,
    PlacementFailure,
    UnknownAssembly,
    UnknownCookie,
    UnknownModel,
    UnsatisfiablePlacement,
    ValidationFailure,
)
from dci.model import (
    AssemblyDescriptor,
    ComponentArchive,
    ConnectionSpec,
    DeploymentTrace,
    EntityKind,
    EntityRef,
    InstanceSpec,
    NodeMetaInfo,
    PortAddress,
    RegistrationTarget,
    Step,
    TraceEvent,
    from_jsonable,
    to_jsonable,
    validate_descriptor,
)
from dci.model.codec import CodecError

log = logging.getLogger(__name__)

SIMPLEX = "simplex"

PHASES: tuple[Step, ...] = (
    Step.INSTALL_ARCHIVE,
    Step.CREATE_SERVER,
    Step.CREATE_CONTAINER,
    Step.INSTALL_HOME,
    Step.CONFIGURE_HOME,
    Step.CREATE_INSTANCE,
    Step.CONFIGURE_INSTANCE,
    Step.CONNECT,
    Step.CONFIGURATION_COMPLETE,
    Step.REGISTER,
)

# node op invoked by each phase, used by fault injection
PHASE_OPS: dict[Step, str] = {
    Step.INSTALL_ARCHIVE: "node.install_archive",
    Step.CREATE_SERVER: "node.create_server",
    Step.CREATE_CONTAINER: "node.create_container",
    Step.INSTALL_HOME: "node.install_home",
    Step.CONFIGURE_HOME: "node.set_home_attr",
    Step.CREATE_INSTANCE: "node.create_instance",
    Step.CONFIGURE_INSTANCE: "node.set_instance_attr",
    Step.CONNECT: "node.connect",
    Step.CONFIGURATION_COMPLETE: "node.configuration_complete",
}


class AssemblyStatus(str, Enum):
    CREATED = "created"
    DEPLOYING = "deploying"
    DEPLOYED = "deployed"
    TEARING_DOWN = "tearing_down"
    DESTROYED = "destroyed"
    FAILED = "failed"
    DEGRADED = "degraded"


S = AssemblyStatus
TRANSITIONS: dict[AssemblyStatus, set[AssemblyStatus]] = {
    S.CREATED: {S.DEPLOYING},
    S.DEPLOYING: {S.DEPLOYED, S.FAILED},
    S.DEPLOYED: {S.TEARING_DOWN, S.DEGRADED},
    S.DEGRADED: {S.TEARING_DOWN},
    S.FAILED: {S.TEARING_DOWN},
    S.TEARING_DOWN: {S.DESTROYED},
    S.DESTROYED: set(),
}


def home_registry_name(assembly_id: str, instance_id: str) -> str:
    return f"{assembly_id}/{instance_id}/home"


def plan_placement(
    descriptor: AssemblyDescriptor,
    domain_info: Iterable[NodeMetaInfo],
    skip: Iterable[str] = (),
) -> dict[str, str]:
    """Assign every instance (except ``skip``) to a live node.

    Explicit nodes win; otherwise the node whose properties satisfy all
    constraints with the lowest instance load is chosen, ties broken by node
    id. Each assignment bumps the chosen node's load.
    """
    nodes = {m.node_id: m for m in domain_info}
    loads = {n: m.instance_load for n, m in nodes.items()}
    skip = set(skip)
    result: dict[str, str] = {}
    problems: list[str] = []
    for inst in descriptor.instances:
        if inst.instance_id in skip:
            continue
        pl = inst.placement
        if pl.node is not None:
            meta = nodes.get(pl.node)
            if meta is None:
                problems.append(f"{inst.instance_id}: node {pl.node} is not live")
                continue
            if any(meta.properties.get(k) != v for k, v in pl.constraints.items()):
                problems.append(f"{inst.instance_id}: node {pl.node} violates constraints {pl.constraints}")
                continue
            chosen = pl.node
        else:
            candidates = [
                n for n, m in nodes.items() if all(m.properties.get(k) == v for k, v in pl.constraints.items())
            ]
            if not candidates:
                problems.append(f"{inst.instance_id}: no live node matches {pl.constraints}")
                continue
            chosen = min(candidates, key=lambda n: (loads[n], n))
        result[inst.instance_id] = chosen
        loads[chosen] += 1
    if problems:
        raise UnsatisfiablePlacement("; ".join(problems))
    return result


# records


@dataclass(frozen=True)
class Placement:
    node_id: str
    server_id: str
    container_id: str
    home: EntityRef
    instance: EntityRef


@dataclass(frozen=True)
class ConnectionBinding:
    connection: ConnectionSpec
    cookie: str


@dataclass(frozen=True)
class AssemblyView:
    """Read-only snapshot of one assembly."""

    assembly_id: str
    model_id: str
    status: AssemblyStatus
    placements: dict[str, Placement]
    connections: tuple[ConnectionBinding, ...]
    trace: DeploymentTrace
    residue: tuple[str, ...] = ()

    @property
    def connection_map(self) -> dict[ConnectionSpec, str]:
        return {b.connection: b.cookie for b in self.connections}


@dataclass
class AssemblyModel:
    model_id: str
    descriptor: AssemblyDescriptor
    archives: dict[str, ComponentArchive]
    instances_spawned: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "descriptor": to_jsonable(self.descriptor),
            "archives": {k: base64.b64encode(encode_archive(v)).decode("ascii") for k, v in self.archives.items()},
            "instances_spawned": list(self.instances_spawned),
        }

    @classmethod
    def from_json(cls, data: dict) -> AssemblyModel:
        return cls(
            data["model_id"],
            from_jsonable(AssemblyDescriptor, data["descriptor"]),
            {k: decode_archive(base64.b64decode(v)) for k, v in data["archives"].items()},
            list(data.get("instances_spawned", [])),
        )


@dataclass
class AssemblyRecord:
    assembly_id: str
    model_id: str
    status: AssemblyStatus = AssemblyStatus.CREATED
    placements: dict[str, Placement] = field(default_factory=dict)
    connections: dict[ConnectionSpec, str] = field(default_factory=dict)
    events: list[TraceEvent] = field(default_factory=list)
    journal: list[list] = field(default_factory=list)
    residue: list[str] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def view(self) -> AssemblyView:
        with self.lock:
            return AssemblyView(
                self.assembly_id,
                self.model_id,
                self.status,
                dict(self.placements),
                tuple(ConnectionBinding(c, k) for c, k in self.connections.items()),
                DeploymentTrace(tuple(self.events)),
                tuple(self.residue),
            )

    def nodes(self) -> set[str]:
        with self.lock:
            return {p.node_id for p in self.placements.values()}

    def to_json(self) -> dict:
        with self.lock:
            return {
                "assembly_id": self.assembly_id,
                "model_id": self.model_id,
                "status": self.status.value,
                "placements": to_jsonable(self.placements),
                "connections": [to_jsonable(ConnectionBinding(c, k)) for c, k in self.connections.items()],
                "events": to_jsonable(self.events),
                "journal": self.journal,
                "residue": self.residue,
            }

    @classmethod
    def from_json(cls, data: dict) -> AssemblyRecord:
        rec = cls(data["assembly_id"], data["model_id"], AssemblyStatus(data["status"]))
        rec.placements = from_jsonable(dict[str, Placement], data["placements"])
        for b in data["connections"]:
            cb = from_jsonable(ConnectionBinding, b)
            rec.connections[cb.connection] = cb.cookie
        rec.events = list(from_jsonable(tuple[TraceEvent, ...], data["events"]))
        rec.journal = [list(j) for j in data["journal"]]
        rec.residue = list(data["residue"])
        return rec


def view_to_json(view: AssemblyView) -> dict:
    return {
        "assembly_id": view.assembly_id,
        "model_id": view.model_id,
        "status": view.status.value,
        "placements": to_jsonable(view.placements),
        "connections": [to_jsonable(b) for b in view.connections],
        "trace": to_jsonable(view.trace),
        "residue": list(view.residue),
    }


def view_from_json(data: dict) -> AssemblyView:
    return AssemblyView(
        data["assembly_id"],
        data["model_id"],
        AssemblyStatus(data["status"]),
        from_jsonable(dict[str, Placement], data["placements"]),
        from_jsonable(tuple[ConnectionBinding, ...], data["connections"]),
        from_jsonable(DeploymentTrace, data["trace"]),
        tuple(data.get("residue", ())),
    )


# packages


def load_package(path: str | Path) -> tuple[AssemblyDescriptor, dict[str, ComponentArchive]]:
    """Read ``descriptor.json`` plus ``<archive_ref>.ccar`` files from a directory or zip file."""
    path = Path(path)
    files: dict[str, bytes] = {}
    if path.is_dir():
        for p in path.iterdir():
            if p.is_file():
                files[p.name] = p.read_bytes()
    elif zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                if not name.endswith("/"):
                    files[Path(name).name] = zf.read(name)
    else:
        raise BadRequest(f"{path} is neither a directory nor a zip package")
    if "descriptor.json" not in files:
        raise BadRequest(f"{path}: missing descriptor.json")
    try:
        descriptor = from_jsonable(AssemblyDescriptor, json.loads(files["descriptor.json"]))
    except (CodecError, json.JSONDecodeError) as exc:
        raise BadRequest(f"{path}/descriptor.json: {exc}") from exc
    archives = {}
    for ref in sorted({i.archive_ref for i in descriptor.instances}):
        data = files.get(f"{ref}.ccar")
        if data is not None:
            archives[ref] = decode_archive(data)
    return descriptor, archives


def write_package(path: str | Path, descriptor: AssemblyDescriptor, archives: dict[str, ComponentArchive]) -> None:
    """Write a zip package, or a directory when ``path`` has no .zip suffix."""
    path = Path(path)
    desc = json.dumps(to_jsonable(descriptor), indent=2, sort_keys=True).encode()
    if path.suffix == ".zip":
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("descriptor.json", desc)
            for ref, a in sorted(archives.items()):
                zf.writestr(f"{ref}.ccar", encode_archive(a))
        path.write_bytes(buf.getvalue())
        return
    path.mkdir(parents=True, exist_ok=True)
    (path / "descriptor.json").write_bytes(desc)
    for ref, a in archives.items():
        (path / f"{ref}.ccar").write_bytes(encode_archive(a))


# coordinator


@dataclass
class _Slot:
    spec: InstanceSpec
    node_id: str
    found: Any = None  # shared-entity entry of a home located through the home finder
    server_id: str = ""
    container_id: str = ""
    home: EntityRef | None = None
    instance: EntityRef | None = None


class _Run:
    """State of one deploy/teardown pass over a record."""

    def __init__(self, machine: AssemblyMachine, rec: AssemblyRecord, progress: Callable[[str], None] | None):
        self.m = machine
        self.rec = rec
        self.progress = progress or (lambda _msg: None)

    def trace(self, step: Step, node_id: str = "", subject: EntityRef | None = None,
              connection: ConnectionSpec | None = None, detail: str = "") -> None:
        with self.rec.lock:
            seq = self.rec.events[-1].seq + 1 if self.rec.events else 1
            self.rec.events.append(TraceEvent(seq, step, node_id, subject, connection, detail))

    def journal(self, *entry) -> None:
        with self.rec.lock:
            self.rec.journal.append(list(entry))


class AssemblyMachine:
    """Models, assembly records and the deploy/teardown coordinator.

    ``domain`` supplies node channels, liveness, registries, id allocation
    and the shared-entity table; see :class:`dci.domain.DomainManager`.
    """

    def __init__(self, domain, max_workers: int = 16):
        self.domain = domain
        self.models: dict[str, AssemblyModel] = {}
        self.records: dict[str, AssemblyRecord] = {}
        self.tombstones: dict[str, AssemblyRecord] = {}
        self._lock = threading.RLock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="deploy")
        self._faults: dict[Step, int] = {}

    def close(self) -> None:
        self._pool.shutdown(wait=False)

    # models

    def install_model(self, model_id: str, descriptor: AssemblyDescriptor, archives: dict[str, ComponentArchive]) -> None:
        for ref, a in archives.items():
            if not verify(a):
                raise ChecksumMismatch(f"archive {ref}")
        manifests = {ref: a.manifest for ref, a in archives.items()}
        errors = validate_descriptor(descriptor, manifests)
        if errors:
            raise ValidationFailure("; ".join(str(e) for e in errors))
        with self._lock:
            if model_id in self.models:
                raise DuplicateId(f"model {model_id}")
            used = {i.archive_ref for i in descriptor.instances}
            self.models[model_id] = AssemblyModel(model_id, descriptor, {r: archives[r] for r in sorted(used)})
        self.domain.persist()

    def list_models(self) -> list[str]:
        with self._lock:
            return sorted(self.models)

    def get_model(self, model_id: str) -> AssemblyModel:
        with self._lock:
            model = self.models.get(model_id)
        if model is None:
            raise UnknownModel(model_id)
        return model

    def uninstall_model(self, model_id: str) -> None:
        with self._lock:
            model = self.get_model(model_id)
            if model.instances_spawned:
                raise InUse(f"model {model_id} has live assemblies {model.instances_spawned}")
            del self.models[model_id]
        self.domain.persist()

    # assemblies

    def create_assembly(self, model_id: str, assembly_id: str) -> EntityRef:
        if not assembly_id or "/" in assembly_id:
            raise BadRequest(f"bad assembly id {assembly_id!r}")
        with self._lock:
            model = self.get_model(model_id)
            if assembly_id in self.records:
                raise DuplicateId(f"assembly {assembly_id}")
            self.tombstones.pop(assembly_id, None)
            rec = AssemblyRecord(assembly_id, model_id)
            ref = EntityRef(EntityKind.ASSEMBLY, assembly_id)
            _Run(self, rec, None).trace(Step.CREATE_ASSEMBLY, subject=ref)
            self.records[assembly_id] = rec
            model.instances_spawned.append(assembly_id)
        self.domain.persist()
        return ref

    def list_assemblies(self) -> list[str]:
        with self._lock:
            return sorted(self.records)

    def record(self, assembly_id: str) -> AssemblyRecord:
        with self._lock:
            rec = self.records.get(assembly_id) or self.tombstones.get(assembly_id)
        if rec is None:
            raise UnknownAssembly(assembly_id)
        return rec

    def introspect(self, assembly_id: str) -> AssemblyView:
        return self.record(assembly_id).view()

    def _set_status(self, rec: AssemblyRecord, status: AssemblyStatus,
                    expect: tuple[AssemblyStatus, ...] | None = None) -> None:
        with rec.lock:
            if expect is not None and rec.status not in expect:
                raise InvalidState(f"{rec.assembly_id} is {rec.status.value}")
            if status not in TRANSITIONS[rec.status]:
                raise InvalidState(f"{rec.assembly_id}: {rec.status.value} -> {status.value}")
            rec.status = status
        # persisted outside the record lock: persist() takes every record's lock
        self.domain.persist()

    def mark_degraded(self, node_id: str) -> list[str]:
        """Deployed assemblies with entities on ``node_id`` become degraded."""
        hit = []
        with self._lock:
            recs = list(self.records.values())
        for rec in recs:
            with rec.lock:
                if rec.status is AssemblyStatus.DEPLOYED and node_id in rec.nodes():
                    rec.status = AssemblyStatus.DEGRADED
                    hit.append(rec.assembly_id)
        if hit:
            self.domain.persist()
        return hit

    def destroy_assembly(self, assembly_id: str, progress: Callable[[str], None] | None = None) -> AssemblyView:
        rec = self.record(assembly_id)
        if rec.status in (AssemblyStatus.DEPLOYED, AssemblyStatus.DEGRADED, AssemblyStatus.FAILED):
            self.teardown(assembly_id, progress)
        elif rec.status in (AssemblyStatus.DEPLOYING, AssemblyStatus.TEARING_DOWN):
            raise InvalidState(f"{assembly_id} is {rec.status.value}")
        elif rec.status is AssemblyStatus.CREATED:
            with rec.lock:
                rec.status = AssemblyStatus.DESTROYED
            self._retire(rec)
        return rec.view()

    def _retire(self, rec: AssemblyRecord) -> None:
        with self._lock:
            self.records.pop(rec.assembly_id, None)
            self.tombstones[rec.assembly_id] = rec
            model = self.models.get(rec.model_id)
            if model is not None and rec.assembly_id in model.instances_spawned:
                model.instances_spawned.remove(rec.assembly_id)
        self.domain.persist()

    # fault injection (test hook): the next ``count`` executions of ``step`` fail

    def inject_fault(self, step: Step, count: int = 1) -> None:
        with self._lock:
            self._faults[Step(step)] = count

    def _check_fault(self, step: Step) -> None:
        with self._lock:
            n = self._faults.get(step, 0)
            if n <= 0:
                return
            self._faults[step] = n - 1
        raise InjectedFault(f"coordinator fault at {step.value}")

    def _node_call(self, node_id: str, step: Step, entity: str, op: str, **args) -> Any:
        try:
            self._check_fault(step)
            return self.domain.node_channel(node_id).call(op, args)
        except DciError as exc:
            raise NodeCallFailure(
                f"{step.value} {entity} on {node_id}: {exc}", step=step.value, entity=entity, cause=exc.code
            ) from exc

    def _run_phase(self, step: Step, tasks: dict[str, list[Callable[[], None]]]) -> None:
        """Run each node's task list in order, nodes in parallel; raise the first failure after all finish."""

        def run_node(fns):
            for fn in fns:
                fn()

        items = [fns for _node, fns in sorted(tasks.items()) if fns]
        errors: list[BaseException] = []
        if len(items) == 1:
            try:
                run_node(items[0])
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors.append(exc)
        else:
            futures = [self._pool.submit(run_node, fns) for fns in items]
            for f in futures:
                exc = f.exception()
                if exc is not None:
                    errors.append(exc)
        if errors:
            exc = errors[0]
            if isinstance(exc, DciError) and not isinstance(exc, NodeCallFailure):
                exc = NodeCallFailure(f"{step.value}: {exc}", step=step.value, cause=exc.code)
            raise exc

    # deploy

    def deploy(self, assembly_id: str, progress: Callable[[str], None] | None = None) -> DeploymentTrace:
        rec = self.record(assembly_id)
        model = self.get_model(rec.model_id)
        self._set_status(rec, AssemblyStatus.DEPLOYING, expect=(AssemblyStatus.CREATED,))
        run = _Run(self, rec, progress)
        try:
            slots = self._plan(rec, model)
            self._deploy_phases(run, model, slots)
        except (UnsatisfiablePlacement, PlacementFailure) as exc:
            self._set_status(rec, AssemblyStatus.FAILED)
            run.progress(f"placement failed: {exc.detail}")
            raise
        except DciError as exc:
            run.progress(f"failure: {exc}; rolling back")
            self._unwind(run, Step.ROLLBACK_STEP)
            self._set_status(rec, AssemblyStatus.FAILED)
            if isinstance(exc, NodeCallFailure):
                raise
            raise NodeCallFailure(str(exc), cause=exc.code) from exc
        self._set_status(rec, AssemblyStatus.DEPLOYED)
        run.progress("deployed")
        return rec.view().trace

    def _plan(self, rec: AssemblyRecord, model: AssemblyModel) -> list[_Slot]:
        desc = model.descriptor
        found: dict[str, Any] = {}
        home_nodes: dict[str, str] = {}
        for inst in desc.instances:
            if inst.find_home is None:
                continue
            try:
                ref, home_type = self.domain.find_home_by_name(inst.find_home)
            except NotBound:
                raise PlacementFailure(f"{inst.instance_id}: no home registered as {inst.find_home!r}") from None
            manifest = model.archives[inst.archive_ref].manifest
            if home_type != manifest.home_type:
                raise PlacementFailure(f"{inst.instance_id}: home {inst.find_home} is a {home_type}")
            if not self.domain.is_live(ref.node_id):
                raise PlacementFailure(f"{inst.instance_id}: home {inst.find_home} is on a dead node")
            found[inst.instance_id] = ref
            home_nodes[inst.instance_id] = ref.node_id
        metas = [n.meta for n in self.domain.get_domain_info() if n.reachable]
        placement = plan_placement(desc, metas, skip=found)
        slots = []
        for inst in desc.instances:
            node = home_nodes.get(inst.instance_id) or placement[inst.instance_id]
            slots.append(_Slot(inst, node, found.get(inst.instance_id)))
        return slots

    def _deploy_phases(self, run: _Run, model: AssemblyModel, slots: list[_Slot]) -> None:
        aid = run.rec.assembly_id
        by_node: dict[str, list[_Slot]] = defaultdict(list)
        for s in slots:
            by_node[s.node_id].append(s)
        table = self.domain.entities
        by_id = {s.spec.instance_id: s for s in slots}

        # step 2: archive distribution, skipping nodes that already hold the checksum
        run.progress("phase install_archive")
        tasks: dict[str, list] = defaultdict(list)
        for node, node_slots in by_node.items():
            refs = sorted({s.spec.archive_ref for s in node_slots if s.found is None})

            def install(node=node, refs=refs):
                if not refs:
                    return
                have = self._node_call(node, Step.INSTALL_ARCHIVE, node, "node.list_archives")
                for ref in refs:
                    archive = model.archives[ref]
                    if have.get(ref) == archive.checksum:
                        continue
                    self._node_call(
                        node, Step.INSTALL_ARCHIVE, ref, "node.install_archive",
                        archive_id=ref,
                        data=base64.b64encode(encode_archive(archive)).decode("ascii"),
                        checksum=archive.checksum,
                    )
                    run.trace(Step.INSTALL_ARCHIVE, node, EntityRef(EntityKind.NODE, node, node), detail=ref)

            tasks[node].append(install)
        self._run_phase(Step.INSTALL_ARCHIVE, tasks)

        # step 5a: servers, shared per (node, server_group)
        run.progress("phase create_server")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            for group in sorted({s.spec.placement.server_group for s in node_slots if s.found is None}):

                def server(node=node, group=group):
                    def create():
                        sid = self.domain.next_id("srv")
                        ref = self._node_call(node, Step.CREATE_SERVER, sid, "node.create_server", server_id=sid)
                        return from_jsonable(EntityRef, ref)

                    entry, created = table.ensure(("server", node, group), aid, create)
                    run.journal("hold", entry.ref.id)
                    if created:
                        run.trace(Step.CREATE_SERVER, node, entry.ref, detail=group)
                    for s in by_node[node]:
                        if s.found is None and s.spec.placement.server_group == group:
                            s.server_id = entry.ref.id

                tasks[node].append(server)
        self._run_phase(Step.CREATE_SERVER, tasks)

        # step 5b: containers, shared per (node, server_group, container_group)
        run.progress("phase create_container")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            keys = sorted({(s.spec.placement.server_group, s.spec.placement.container_group)
                           for s in node_slots if s.found is None})
            for group, cgroup in keys:

                def container(node=node, group=group, cgroup=cgroup):
                    members = [s for s in by_node[node] if s.found is None
                               and (s.spec.placement.server_group, s.spec.placement.container_group) == (group, cgroup)]
                    sid = members[0].server_id

                    def create():
                        cid = self.domain.next_id("ctr")
                        ref = self._node_call(node, Step.CREATE_CONTAINER, cid, "node.create_container",
                                              server_id=sid, container_id=cid)
                        return from_jsonable(EntityRef, ref)

                    entry, created = table.ensure(("container", node, group, cgroup), aid, create, parent=sid)
                    run.journal("hold", entry.ref.id)
                    if created:
                        run.trace(Step.CREATE_CONTAINER, node, entry.ref, detail=f"{group}/{cgroup}")
                    for s in members:
                        s.container_id = entry.ref.id

                tasks[node].append(container)
        self._run_phase(Step.CREATE_CONTAINER, tasks)

        # step 5c/5d: one home per instance; found homes are only held
        run.progress("phase install_home")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            for s in node_slots:

                def home(s=s, node=node):
                    if s.found is not None:
                        for entry in table.acquire_chain(s.found.id, aid):
                            run.journal("hold", entry.ref.id)
                            if entry.ref.kind is EntityKind.SERVER:
                                s.server_id = entry.ref.id
                            elif entry.ref.kind is EntityKind.CONTAINER:
                                s.container_id = entry.ref.id
                        s.home = s.found
                        return
                    hid = self.domain.next_id("home")

                    def create():
                        ref = self._node_call(node, Step.INSTALL_HOME, hid, "node.install_home",
                                              server_id=s.server_id, container_id=s.container_id,
                                              home_id=hid, archive_id=s.spec.archive_ref)
                        return from_jsonable(EntityRef, ref)

                    entry, _ = table.ensure(("home", hid), aid, create, parent=s.container_id)
                    run.journal("hold", entry.ref.id)
                    s.home = entry.ref
                    run.trace(Step.INSTALL_HOME, node, entry.ref, detail=s.spec.instance_id)

                tasks[node].append(home)
        self._run_phase(Step.INSTALL_HOME, tasks)

        # step 6: home attributes
        run.progress("phase configure_home")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            for s in node_slots:
                if s.found is not None:
                    continue
                for name, value in sorted(s.spec.home_attr_values.items()):

                    def set_home(s=s, node=node, name=name, value=value):
                        self._node_call(node, Step.CONFIGURE_HOME, s.home.id, "node.set_home_attr",
                                        home=s.home.id, name=name, value=to_jsonable(value))
                        run.trace(Step.CONFIGURE_HOME, node, s.home, detail=name)

                    tasks[node].append(set_home)
        self._run_phase(Step.CONFIGURE_HOME, tasks)

        # step 7: instances
        run.progress("phase create_instance")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            for s in node_slots:

                def create_instance(s=s, node=node):
                    iid = self.domain.next_id("inst")
                    ref = self._node_call(node, Step.CREATE_INSTANCE, iid, "node.create_instance",
                                          home=s.home.id, instance_id=iid)
                    s.instance = from_jsonable(EntityRef, ref)
                    run.journal("instance", node, iid)
                    with run.rec.lock:
                        run.rec.placements[s.spec.instance_id] = Placement(
                            node, s.server_id, s.container_id, s.home, s.instance)
                    run.trace(Step.CREATE_INSTANCE, node, s.instance, detail=s.spec.instance_id)

                tasks[node].append(create_instance)
        self._run_phase(Step.CREATE_INSTANCE, tasks)

        # step 8: instance attributes
        run.progress("phase configure_instance")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            for s in node_slots:
                for name, value in sorted(s.spec.instance_attr_values.items()):

                    def set_inst(s=s, node=node, name=name, value=value):
                        self._node_call(node, Step.CONFIGURE_INSTANCE, s.instance.id, "node.set_instance_attr",
                                        instance=s.instance.id, name=name, value=to_jsonable(value))
                        run.trace(Step.CONFIGURE_INSTANCE, node, s.instance, detail=name)

                    tasks[node].append(set_inst)
        self._run_phase(Step.CONFIGURE_INSTANCE, tasks)

        # step 9: connections, issued by the node owning the origin port
        run.progress("phase connect")
        tasks = defaultdict(list)
        for conn in model.descriptor.connections:
            src, dst = by_id[conn.from_instance], by_id[conn.to_instance]

            def connect(conn=conn, src=src, dst=dst):
                target = PortAddress(dst.node_id, dst.instance.id, conn.to_port)
                cookie = self._node_call(src.node_id, Step.CONNECT, str(conn), "node.connect",
                                         instance=src.instance.id, port=conn.from_port, target=to_jsonable(target))
                cookie = cookie or SIMPLEX
                run.journal("connect", src.node_id, src.instance.id, conn.from_port, cookie)
                with run.rec.lock:
                    run.rec.connections[conn] = cookie
                run.trace(Step.CONNECT, src.node_id, src.instance, connection=conn, detail=cookie)

            tasks[src.node_id].append(connect)
        self._run_phase(Step.CONNECT, tasks)

        # step 10: configuration_complete
        run.progress("phase configuration_complete")
        tasks = defaultdict(list)
        for node, node_slots in by_node.items():
            for s in node_slots:

                def complete(s=s, node=node):
                    self._node_call(node, Step.CONFIGURATION_COMPLETE, s.instance.id,
                                    "node.configuration_complete", instance=s.instance.id)
                    run.trace(Step.CONFIGURATION_COMPLETE, node, s.instance, detail=s.spec.instance_id)

                tasks[node].append(complete)
        self._run_phase(Step.CONFIGURATION_COMPLETE, tasks)

        # step 11: home finder and naming registrations
        run.progress("phase register")
        registered_homes: set[str] = set()
        for reg in model.descriptor.registrations:
            s = by_id[reg.instance_id]
            try:
                self._check_fault(Step.REGISTER)
                if reg.target is RegistrationTarget.HOME:
                    ref = s.home
                    name = home_registry_name(aid, reg.instance_id)
                    if name not in registered_homes:
                        manifest = model.archives[s.spec.archive_ref].manifest
                        self.domain.register_home(name, ref, manifest.home_type)
                        run.journal("home_name", name)
                        registered_homes.add(name)
                else:
                    ref = s.instance
                self.domain.bind_name(reg.binding_name, ref)
                run.journal("name", reg.binding_name)
            except DciError as exc:
                raise NodeCallFailure(f"register {reg.binding_name}: {exc}", step=Step.REGISTER.value,
                                      entity=reg.binding_name, cause=exc.code) from exc
            run.trace(Step.REGISTER, s.node_id, ref, detail=reg.binding_name)

    # rollback / teardown

    def _unwind(self, run: _Run, step: Step) -> None:
        """Undo the journal newest-first; entries that fail stay in the journal as residue."""
        rec = run.rec
        table = self.domain.entities
        aid = rec.assembly_id
        with rec.lock:
            entries = list(reversed(rec.journal))
        left: list[list] = []
        residue: list[str] = []
        for entry in entries:
            kind = entry[0]
            try:
                if kind == "name":
                    try:
                        self.domain.unbind_name(entry[1])
                    except NotBound:
                        pass
                    run.trace(step, detail=f"unbind {entry[1]}")
                elif kind == "home_name":
                    try:
                        self.domain.unregister_home(entry[1])
                    except NotBound:
                        pass
                    run.trace(step, detail=f"unregister home {entry[1]}")
                elif kind == "connect":
                    _, node, iid, port, cookie = entry
                    if self._reachable(node):
                        try:
                            self._node_call(node, step, iid, "node.disconnect", instance=iid, port=port,
                                            cookie=None if cookie == SIMPLEX else cookie)
                        except NodeCallFailure as exc:
                            if exc.cause not in (NotConnected.code, UnknownCookie.code, NotFound.code):
                                raise
                        run.trace(step, node, EntityRef(EntityKind.INSTANCE, iid, node), detail=f"disconnect {port}")
                    else:
                        residue.append(f"connection {iid}.{port} on unreachable {node}")
                elif kind == "instance":
                    _, node, iid = entry
                    if self._reachable(node):
                        try:
                            self._node_call(node, step, iid, "node.remove_instance", instance=iid)
                        except NodeCallFailure as exc:
                            if exc.cause != NotFound.code:
                                raise
                        run.trace(step, node, EntityRef(EntityKind.INSTANCE, iid, node), detail="remove instance")
                    else:
                        residue.append(f"instance {iid} on unreachable {node}")
                elif kind == "hold":
                    for ref, outcome in table.release(entry[1], aid, lambda e: self._destroy(e, step)):
                        if outcome == "destroyed":
                            run.trace(step, ref.node_id, ref, detail=f"remove {ref.kind.value}")
                        elif outcome != "released":
                            residue.append(f"{ref.kind.value} {ref.id}: {outcome}")
            except DciError as exc:
                residue.append(f"{entry}: {exc}")
                left.append(entry)
        with rec.lock:
            rec.journal = list(reversed(left))
            rec.residue.extend(residue)
            if not left:
                rec.placements.clear()
                rec.connections.clear()

    def _reachable(self, node_id: str) -> bool:
        return self.domain.is_live(node_id)

    def _destroy(self, entry, step: Step) -> str:
        ref: EntityRef = entry.ref
        if not self._reachable(ref.node_id):
            return f"left on unreachable node {ref.node_id}"
        try:
            if ref.kind is EntityKind.SERVER:
                self._node_call(ref.node_id, step, ref.id, "node.remove_server", server_id=ref.id)
            elif ref.kind is EntityKind.CONTAINER:
                self._node_call(ref.node_id, step, ref.id, "node.remove_container",
                                server_id=entry.parent, container_id=ref.id)
            else:
                self._node_call(ref.node_id, step, ref.id, "node.remove_home", home=ref.id)
        except NodeCallFailure as exc:
            if exc.cause not in (NotFound.code, "NoSuchServer", "NoSuchContainer"):
                return f"destroy failed: {exc.detail}"
        return "destroyed"

    def teardown(self, assembly_id: str, progress: Callable[[str], None] | None = None) -> DeploymentTrace:
        rec = self.record(assembly_id)
        self._set_status(rec, AssemblyStatus.TEARING_DOWN,
                         expect=(AssemblyStatus.DEPLOYED, AssemblyStatus.DEGRADED, AssemblyStatus.FAILED))
        run = _Run(self, rec, progress)
        start = len(rec.events)
        run.progress("teardown")
        self._unwind(run, Step.TEARDOWN_STEP)
        with rec.lock:
            if rec.journal:
                rec.residue.append(f"{len(rec.journal)} journal entries could not be undone")
                rec.journal = []
            rec.placements.clear()
            rec.connections.clear()
        self._set_status(rec, AssemblyStatus.DESTROYED)
        self._retire(rec)
        run.progress("destroyed")
        return DeploymentTrace(tuple(rec.events[start:]))

    # domain restart support

    def to_json(self) -> dict:
        with self._lock:
            return {
                "models": [m.to_json() for m in self.models.values()],
                "records": [r.to_json() for r in self.records.values()],
            }

    def load_json(self, data: dict) -> None:
        with self._lock:
            self.models = {m["model_id"]: AssemblyModel.from_json(m) for m in data.get("models", [])}
            self.records = {r["assembly_id"]: AssemblyRecord.from_json(r) for r in data.get("records", [])}

    def reconcile(self) -> list[str]:
        """After a restart: deployed assemblies on nodes that did not come back become degraded."""
        changed = []
        with self._lock:
            recs = list(self.records.values())
        for rec in recs:
            if all(self.domain.is_live(n) for n in rec.nodes()):
                continue
            with rec.lock:
                if rec.status is AssemblyStatus.DEPLOYED:
                    rec.status = AssemblyStatus.DEGRADED
                    changed.append(rec.assembly_id)
        if changed:
            self.domain.persist()
        return changed


__all__ = [
    "AlreadyBound",
    "AssemblyMachine",
    "AssemblyModel",
    "AssemblyRecord",
    "AssemblyStatus",
    "AssemblyView",
    "ConnectionBinding",
    "PHASES",
    "PHASE_OPS",
    "Placement",
    "SIMPLEX",
    "home_registry_name",
    "load_package",
    "plan_placement",
    "view_from_json",
    "view_to_json",
    "write_package",
]
