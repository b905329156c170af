"""The deployment domain: node registry, naming, home finder and the facade.

Nodes join with ``register_node`` and keep their membership alive with
``renew_lease``. A node that misses three lease intervals is reported
unreachable but stays registered; it may register again under the same id.

Registries are written to an optional state file after every mutation
(temp file plus rename) and reloaded by the next domain process.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import tempfile
import threading
import time
from collections import defaultdict
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dci.archive import decode_archive
from dci.assembly import AssemblyMachine, view_to_json
from dci.errors import (
    AlreadyBound,
    BadRequest,
    DciError,
    DuplicateNode,
    NotBound,
    NotFound,
    UnknownNode,
)
from dci.model import (
    AssemblyDescriptor,
    EntityRef,
    NodeMetaInfo,
    Step,
    canonical_json,
    from_jsonable,
    to_jsonable,
)
from dci.model.codec import CodecError
from dci.transport import Connector, Dispatcher, LoopbackHub, current_call

log = logging.getLogger(__name__)

MISSED_LEASES = 3
INFO_TIMEOUT = 2.0


@dataclass
class NodeEntry:
    node_id: str
    address: str
    meta: NodeMetaInfo
    last_seen: float


@dataclass(frozen=True)
class NodeStatus:
    meta: NodeMetaInfo
    address: str
    reachable: bool


@dataclass
class SharedEntity:
    ref: EntityRef
    key: tuple
    parent: str | None
    holders: set[str] = field(default_factory=set)


class EntityTable:
    """Reference counts for servers, containers and homes.

    ``key`` is the sharing key: two holders asking for the same key get the
    same entity. The per-key lock makes create and destroy of one key
    mutually exclusive, so a release never races a reuse.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._by_id: dict[str, SharedEntity] = {}
        self._by_key: dict[tuple, str] = {}
        self._key_locks: dict[tuple, threading.Lock] = defaultdict(threading.Lock)

    def _key_lock(self, key: tuple) -> threading.Lock:
        with self._lock:
            return self._key_locks[key]

    def ensure(self, key: tuple, holder: str, create: Callable[[], EntityRef],
               parent: str | None = None) -> tuple[SharedEntity, bool]:
        with self._key_lock(key):
            with self._lock:
                eid = self._by_key.get(key)
                if eid is not None:
                    entry = self._by_id[eid]
                    entry.holders.add(holder)
                    return entry, False
            ref = create()
            entry = SharedEntity(ref, key, parent, {holder})
            with self._lock:
                self._by_id[ref.id] = entry
                self._by_key[key] = ref.id
            return entry, True

    def acquire_chain(self, entity_id: str, holder: str) -> list[SharedEntity]:
        """Hold an entity and all its ancestors; returned outermost first."""
        with self._lock:
            chain = []
            eid: str | None = entity_id
            while eid is not None:
                entry = self._by_id.get(eid)
                if entry is None:
                    raise NotFound(f"shared entity {eid}")
                chain.append(entry)
                eid = entry.parent
            for entry in chain:
                entry.holders.add(holder)
            return list(reversed(chain))

    def release(self, entity_id: str, holder: str,
                destroy: Callable[[SharedEntity], str]) -> list[tuple[EntityRef, str]]:
        with self._lock:
            entry = self._by_id.get(entity_id)
        if entry is None:
            return []
        with self._key_lock(entry.key):
            with self._lock:
                if holder not in entry.holders:
                    return []
                entry.holders.discard(holder)
                if entry.holders:
                    return [(entry.ref, "released")]
                del self._by_id[entity_id]
                self._by_key.pop(entry.key, None)
            return [(entry.ref, destroy(entry))]

    def get(self, entity_id: str) -> SharedEntity | None:
        with self._lock:
            return self._by_id.get(entity_id)

    def holders(self) -> dict[str, list[str]]:
        with self._lock:
            return {eid: sorted(e.holders) for eid, e in sorted(self._by_id.items())}

    def to_json(self) -> list:
        with self._lock:
            return [
                {"ref": to_jsonable(e.ref), "key": list(e.key), "parent": e.parent, "holders": sorted(e.holders)}
                for e in self._by_id.values()
            ]

    def load_json(self, data: list) -> None:
        with self._lock:
            self._by_id.clear()
            self._by_key.clear()
            for d in data:
                entry = SharedEntity(from_jsonable(EntityRef, d["ref"]), tuple(d["key"]), d["parent"], set(d["holders"]))
                self._by_id[entry.ref.id] = entry
                self._by_key[entry.key] = entry.ref.id


def _check_path(path: str) -> None:
    if not isinstance(path, str) or not path or any(not seg for seg in path.split("/")):
        raise BadRequest(f"bad name path {path!r}")


class DomainManager:
    """Node registry, name tree, home finder and assembly facade.

    ``connector`` opens channels to node agents; ``clock`` is injectable so
    lease expiry can be tested without sleeping.
    """

    def __init__(
        self,
        connector: Connector | None = None,
        lease_interval: float = 5.0,
        state_file: str | os.PathLike | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.connector = connector or Connector()
        self.lease_interval = lease_interval
        self.state_file = Path(state_file) if state_file else None
        self.clock = clock
        self._lock = threading.RLock()
        self._persist_lock = threading.Lock()
        self.nodes: dict[str, NodeEntry] = {}
        self.names: dict[str, EntityRef] = {}
        self.homes: dict[str, tuple[EntityRef, str]] = {}
        self.counters: dict[str, int] = {}
        self.entities = EntityTable()
        self.machine = AssemblyMachine(self)
        self._pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix="domain-info")
        self._loading = False
        if self.state_file is not None and self.state_file.exists():
            self._load()

    def close(self) -> None:
        self.machine.close()
        self._pool.shutdown(wait=False)
        self.connector.close()

    # nodes

    def _live(self, entry: NodeEntry | None) -> bool:
        return entry is not None and self.clock() - entry.last_seen <= MISSED_LEASES * self.lease_interval

    def is_live(self, node_id: str) -> bool:
        with self._lock:
            return self._live(self.nodes.get(node_id))

    def register_node(self, node_id: str, address: str, meta: NodeMetaInfo) -> None:
        if meta.node_id != node_id:
            raise BadRequest(f"meta describes {meta.node_id}, not {node_id}")
        with self._lock:
            if self._live(self.nodes.get(node_id)):
                raise DuplicateNode(f"node {node_id} is already registered")
            old = self.nodes.get(node_id)
            self.nodes[node_id] = NodeEntry(node_id, address, meta, self.clock())
        if old is not None and old.address != address:
            self.connector.drop(old.address)
        log.info("node %s registered at %s", node_id, address)
        self.persist()

    def renew_lease(self, node_id: str) -> None:
        """Refresh a node's lease; UnknownNode tells the agent to register again."""
        with self._lock:
            entry = self.nodes.get(node_id)
            if entry is None or not self._live(entry):
                raise UnknownNode(node_id)
            entry.last_seen = self.clock()

    def deregister_node(self, node_id: str) -> list[str]:
        with self._lock:
            entry = self.nodes.get(node_id)
            if not self._live(entry):
                raise UnknownNode(node_id)
            del self.nodes[node_id]
        self.connector.drop(entry.address)
        degraded = self.machine.mark_degraded(node_id)
        log.info("node %s deregistered; degraded %s", node_id, degraded)
        self.persist()
        return degraded

    def list_nodes(self) -> list[str]:
        with self._lock:
            return sorted(n for n, e in self.nodes.items() if self._live(e))

    def node_address(self, node_id: str) -> str:
        with self._lock:
            entry = self.nodes.get(node_id)
        if entry is None:
            raise UnknownNode(node_id)
        return entry.address

    def node_channel(self, node_id: str):
        return self.connector.get(self.node_address(node_id))

    def _query(self, entry: NodeEntry, live: bool) -> NodeStatus:
        if not live:
            return NodeStatus(entry.meta, entry.address, False)
        try:
            raw = self.connector.get(entry.address).call("node.get_meta_info", {}, timeout=INFO_TIMEOUT)
            meta = from_jsonable(NodeMetaInfo, raw)
        except (DciError, CodecError) as exc:
            log.warning("node %s unreachable: %s", entry.node_id, exc)
            return NodeStatus(entry.meta, entry.address, False)
        with self._lock:
            if self.nodes.get(entry.node_id) is entry:
                entry.meta = meta
        return NodeStatus(meta, entry.address, True)

    def get_domain_info(self) -> list[NodeStatus]:
        """One snapshot per registered node; unreachable nodes keep their last-known meta."""
        with self._lock:
            entries = [(e, self._live(e)) for _, e in sorted(self.nodes.items())]
        if len(entries) <= 1:
            return [self._query(e, live) for e, live in entries]
        return list(self._pool.map(lambda el: self._query(*el), entries))

    def get_node_meta(self, node_id: str) -> NodeStatus:
        with self._lock:
            entry = self.nodes.get(node_id)
            live = self._live(entry)
        if entry is None:
            raise UnknownNode(node_id)
        return self._query(entry, live)

    # naming

    def bind_name(self, path: str, ref: EntityRef) -> None:
        _check_path(path)
        with self._lock:
            if path in self.names:
                raise AlreadyBound(path)
            self.names[path] = ref
        self.persist()

    def resolve_name(self, path: str) -> EntityRef:
        with self._lock:
            ref = self.names.get(path)
        if ref is None:
            raise NotBound(path)
        return ref

    def unbind_name(self, path: str) -> None:
        with self._lock:
            if self.names.pop(path, None) is None:
                raise NotBound(path)
        self.persist()

    def list_names(self, prefix: str = "") -> list[str]:
        """Bound paths equal to ``prefix`` or below it, sorted."""
        prefix = prefix.strip("/")
        with self._lock:
            paths = list(self.names)
        if not prefix:
            return sorted(paths)
        return sorted(p for p in paths if p == prefix or p.startswith(prefix + "/"))

    # home finder

    def register_home(self, name: str, ref: EntityRef, home_type: str) -> None:
        _check_path(name)
        with self._lock:
            if name in self.homes:
                raise AlreadyBound(name)
            self.homes[name] = (ref, home_type)
        self.persist()

    def find_home_by_name(self, name: str) -> tuple[EntityRef, str]:
        with self._lock:
            found = self.homes.get(name)
        if found is None:
            raise NotBound(name)
        return found

    def find_home_by_type(self, home_type: str) -> list[EntityRef]:
        with self._lock:
            return [ref for _, (ref, t) in sorted(self.homes.items()) if t == home_type]

    def unregister_home(self, name: str) -> None:
        with self._lock:
            if self.homes.pop(name, None) is None:
                raise NotBound(name)
        self.persist()

    def list_homes(self) -> list[tuple[str, EntityRef, str]]:
        with self._lock:
            return [(n, ref, t) for n, (ref, t) in sorted(self.homes.items())]

    # ids

    def next_id(self, prefix: str) -> str:
        with self._lock:
            n = self.counters.get(prefix, 0) + 1
            self.counters[prefix] = n
        # ids must never repeat across restarts, so the counter reaches disk before use
        self.persist()
        return f"{prefix}-{n}"

    # snapshot used by tests and the CLI

    def registry_snapshot(self) -> dict[str, Any]:
        with self._lock:
            names = {p: to_jsonable(r) for p, r in sorted(self.names.items())}
            homes = {n: [to_jsonable(r), t] for n, (r, t) in sorted(self.homes.items())}
        return {"names": names, "homes": homes, "entities": self.entities.holders()}

    # persistence

    def _state(self) -> dict:
        with self._lock:
            state = {
                "nodes": [
                    {"node_id": e.node_id, "address": e.address, "meta": to_jsonable(e.meta)}
                    for e in self.nodes.values()
                ],
                "names": {p: to_jsonable(r) for p, r in self.names.items()},
                "homes": {n: {"ref": to_jsonable(r), "home_type": t} for n, (r, t) in self.homes.items()},
                "counters": dict(self.counters),
            }
        state["entities"] = self.entities.to_json()
        state["assembly"] = self.machine.to_json()
        return state

    def persist(self) -> None:
        if self.state_file is None or self._loading:
            return
        with self._persist_lock:
            body = canonical_json(self._state())
            self.state_file.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.state_file.parent, prefix=".state-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(body)
                os.replace(tmp, self.state_file)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    def _load(self) -> None:
        data = json.loads(self.state_file.read_bytes())
        self._loading = True
        try:
            # nodes come back as expired leases: they must register again to count as live
            expired = -float("inf")
            for d in data.get("nodes", []):
                self.nodes[d["node_id"]] = NodeEntry(
                    d["node_id"], d["address"], from_jsonable(NodeMetaInfo, d["meta"]), expired)
            self.names = {p: from_jsonable(EntityRef, r) for p, r in data.get("names", {}).items()}
            self.homes = {
                n: (from_jsonable(EntityRef, h["ref"]), h["home_type"]) for n, h in data.get("homes", {}).items()
            }
            self.counters = dict(data.get("counters", {}))
            self.entities.load_json(data.get("entities", []))
            self.machine.load_json(data.get("assembly", {}))
        finally:
            self._loading = False

    def reconcile(self) -> list[str]:
        """Deployed assemblies whose nodes have not re-registered become degraded."""
        return self.machine.reconcile()

    def reconcile_after(self, grace: float) -> threading.Timer:
        timer = threading.Timer(grace, self.reconcile)
        timer.daemon = True
        timer.start()
        return timer


def _progress_sink() -> Callable[[str], None]:
    ctx = current_call()
    if ctx is None:
        return lambda _line: None
    chan = ctx.channel

    def send(line: str) -> None:
        try:
            chan.notify("assembly.progress", {"line": line})
        except DciError:
            pass

    return send


def decode_package(descriptor: dict, archives: dict[str, str]):
    try:
        desc = from_jsonable(AssemblyDescriptor, descriptor)
    except CodecError as exc:
        raise BadRequest(f"descriptor: {exc}") from exc
    return desc, {ref: decode_archive(base64.b64decode(data)) for ref, data in archives.items()}


def build_dispatcher(dm: DomainManager) -> Dispatcher:
    d = Dispatcher()
    m = dm.machine

    def op(name: str):
        def deco(fn):
            d.register(name, fn)
            return fn

        return deco

    def ref_of(data) -> EntityRef:
        try:
            return from_jsonable(EntityRef, data)
        except CodecError as exc:
            raise BadRequest(str(exc)) from exc

    def status_json(s: NodeStatus) -> dict:
        return {"meta": to_jsonable(s.meta), "address": s.address, "reachable": s.reachable}

    @op("domain.register_node")
    def register_node(node_id: str, address: str, meta: dict):
        """Join the domain; rejected while a live node holds the id."""
        try:
            info = from_jsonable(NodeMetaInfo, meta)
        except CodecError as exc:
            raise BadRequest(str(exc)) from exc
        dm.register_node(node_id, address, info)

    @op("domain.renew_lease")
    def renew_lease(node_id: str):
        """Keep a node's membership alive."""
        dm.renew_lease(node_id)

    @op("domain.deregister_node")
    def deregister_node(node_id: str):
        """Leave the domain; assemblies using the node become degraded."""
        return dm.deregister_node(node_id)

    @op("domain.list_nodes")
    def list_nodes():
        """Ids of live nodes."""
        return dm.list_nodes()

    @op("domain.node_address")
    def node_address(node_id: str):
        """Listen address of a registered node."""
        return dm.node_address(node_id)

    @op("domain.get_domain_info")
    def get_domain_info():
        """Fresh meta-info of every registered node with a reachability flag."""
        return [status_json(s) for s in dm.get_domain_info()]

    @op("domain.get_node_meta")
    def get_node_meta(node_id: str):
        """Meta-info of one node."""
        return status_json(dm.get_node_meta(node_id))

    @op("domain.bind_name")
    def bind_name(path: str, ref: dict):
        """Bind a '/'-separated path to an entity reference."""
        dm.bind_name(path, ref_of(ref))

    @op("domain.resolve_name")
    def resolve_name(path: str):
        """Entity reference bound at a path."""
        return to_jsonable(dm.resolve_name(path))

    @op("domain.unbind_name")
    def unbind_name(path: str):
        """Remove a binding."""
        dm.unbind_name(path)

    @op("domain.list_names")
    def list_names(prefix: str = ""):
        """Bound paths under a prefix, sorted."""
        return dm.list_names(prefix)

    @op("domain.register_home")
    def register_home(name: str, ref: dict, home_type: str):
        """Publish a home for reuse by later assemblies."""
        dm.register_home(name, ref_of(ref), home_type)

    @op("domain.find_home_by_name")
    def find_home_by_name(name: str):
        """Reference and type of a published home."""
        ref, home_type = dm.find_home_by_name(name)
        return {"ref": to_jsonable(ref), "home_type": home_type}

    @op("domain.find_home_by_type")
    def find_home_by_type(home_type: str):
        """Published homes of a type, sorted by name."""
        return [to_jsonable(r) for r in dm.find_home_by_type(home_type)]

    @op("domain.unregister_home")
    def unregister_home(name: str):
        """Withdraw a published home."""
        dm.unregister_home(name)

    @op("domain.list_homes")
    def list_homes():
        """Every published home."""
        return [{"name": n, "ref": to_jsonable(r), "home_type": t} for n, r, t in dm.list_homes()]

    @op("domain.registry_snapshot")
    def registry_snapshot():
        """Names, homes and shared-entity holders."""
        return dm.registry_snapshot()

    @op("assembly.install_model")
    def install_model(model_id: str, descriptor: dict, archives: dict):
        """Validate and store an assembly model; archives are base64 archive files."""
        desc, arcs = decode_package(descriptor, archives)
        m.install_model(model_id, desc, arcs)

    @op("assembly.list_models")
    def list_models():
        """Installed model ids."""
        return m.list_models()

    @op("assembly.uninstall_model")
    def uninstall_model(model_id: str):
        """Remove a model without live assemblies."""
        m.uninstall_model(model_id)

    @op("assembly.create_assembly")
    def create_assembly(model_id: str, assembly_id: str):
        """New assembly in state created."""
        return to_jsonable(m.create_assembly(model_id, assembly_id))

    @op("assembly.deploy")
    def deploy(assembly_id: str):
        """Run the deployment; progress lines arrive as assembly.progress events."""
        return to_jsonable(m.deploy(assembly_id, _progress_sink()))

    @op("assembly.teardown")
    def teardown(assembly_id: str):
        """Undo a deployment."""
        return to_jsonable(m.teardown(assembly_id, _progress_sink()))

    @op("assembly.destroy_assembly")
    def destroy_assembly(assembly_id: str):
        """Tear down if needed, then delist."""
        return view_to_json(m.destroy_assembly(assembly_id, _progress_sink()))

    @op("assembly.introspect")
    def introspect(assembly_id: str):
        """Status, placements, connections and trace."""
        return view_to_json(m.introspect(assembly_id))

    @op("assembly.list_assemblies")
    def list_assemblies():
        """Ids of assemblies that are not destroyed."""
        return m.list_assemblies()

    @op("assembly.inject_fault")
    def inject_fault(step: str, count: int = 1):
        """Make the next executions of a deployment step fail (testing hook)."""
        m.inject_fault(Step(step), count)

    return d


__all__ = [
    "DomainManager",
    "EntityTable",
    "LoopbackHub",
    "NodeEntry",
    "NodeStatus",
    "SharedEntity",
    "build_dispatcher",
    "decode_package",
]
