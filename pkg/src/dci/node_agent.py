"""Per-node runtime: archive installation, servers, containers, homes, instances.

Servers are supervised in-process records rather than OS processes. Every
container has its own lock; mutations inside one container are serialized
and disjoint containers proceed independently. The agent-wide lock only
guards the id indexes and is always taken after a container lock, never
before one.

Connections to ports on other nodes go through ``peers``, a callable that
returns a channel to the named node.
"""

from __future__ import annotations

import base64
import functools
import itertools
import logging
import os
import platform
import queue
import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

from dci.archive import ArchiveStore, encode_archive
from dci.errors import (
    AlreadyConfigured,
    AlreadyConnected,
    ArchiveNotInstalled,
    BadRequest,
    ConnectionClosed,
    DciError,
    DuplicateId,
    InjectedFault,
    NoSuchContainer,
    NoSuchPort,
    NoSuchServer,
    NotActive,
    NotConnected,
    NotFound,
    PortKindMismatch,
    RelayUnconnected,
    Timeout,
    TypeMismatch,
    UnknownAttribute,
    UnknownCookie,
    UnknownNode,
    UnresolvableTarget,
)
from dci.model import (
    ArchiveManifest,
    AttrValue,
    Behavior,
    EntityKind,
    EntityRef,
    NodeMetaInfo,
    PortAddress,
    PortDecl,
    PortKind,
    from_jsonable,
    is_identifier,
    to_jsonable,
)
from dci.model.codec import CodecError
from dci.transport import Channel, Dispatcher

log = logging.getLogger(__name__)

_COUNT = struct.Struct(">Q")


@dataclass
class InstanceState:
    ref: EntityRef
    home: HomeState
    attrs: dict[str, AttrValue]
    configured: bool = False
    # port -> cookie -> peer address; outbound for origins, inbound for targets
    outbound: dict[str, dict[str, PortAddress]] = field(default_factory=dict)
    inbound: dict[str, dict[str, PortAddress]] = field(default_factory=dict)
    count: int = 0
    sink_logs: dict[str, list[bytes]] = field(default_factory=dict)
    removed: bool = False

    @property
    def manifest(self) -> ArchiveManifest:
        return self.home.manifest


@dataclass
class HomeState:
    ref: EntityRef
    container: ContainerState
    archive_id: str
    manifest: ArchiveManifest
    attrs: dict[str, AttrValue]
    instances: dict[str, InstanceState] = field(default_factory=dict)
    removed: bool = False


@dataclass
class ContainerState:
    ref: EntityRef
    server: ServerState
    homes: dict[str, HomeState] = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    removed: bool = False


@dataclass
class ServerState:
    ref: EntityRef
    containers: dict[str, ContainerState] = field(default_factory=dict)
    removed: bool = False


def _ref_id(ref: EntityRef | str | dict) -> str:
    if isinstance(ref, EntityRef):
        return ref.id
    if isinstance(ref, dict):
        return str(ref.get("id", ""))
    return ref


def _local_platform() -> dict[str, Any]:
    try:
        mem = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        mem = 0
    return {
        "os": platform.system(),
        "arch": platform.machine(),
        "cpu_count": os.cpu_count() or 1,
        "mem_bytes": mem,
    }


class NodeAgent:
    def __init__(
        self,
        node_id: str,
        store: ArchiveStore,
        properties: dict[str, str] | None = None,
        peers: Callable[[str], Channel] | None = None,
        platform_info: dict[str, Any] | None = None,
    ):
        if not is_identifier(node_id):
            raise ValueError(f"bad node id {node_id!r}")
        self.node_id = node_id
        self.store = store
        store.in_use = self.archive_in_use
        self.properties = dict(properties or {})
        self.platform_info = {**_local_platform(), **(platform_info or {})}
        self.peers = peers
        self.address = ""
        self._lock = threading.RLock()
        self._servers: dict[str, ServerState] = {}
        self._containers: dict[str, ContainerState] = {}
        self._homes: dict[str, HomeState] = {}
        self._instances: dict[str, InstanceState] = {}
        self._cookies = itertools.count(1)
        self._faults: dict[str, int] = {}
        self._events: queue.SimpleQueue = queue.SimpleQueue()
        self._worker = threading.Thread(target=self._delivery_loop, name=f"events-{node_id}", daemon=True)
        self._worker.start()
        self.dispatcher = build_dispatcher(self)

    def close(self) -> None:
        self._events.put(None)

    def _ref(self, kind: EntityKind, entity_id: str) -> EntityRef:
        return EntityRef(kind, entity_id, self.node_id)

    # fault injection for tests: the next ``count`` calls of ``op`` fail

    def inject_fault(self, op: str, count: int = 1) -> None:
        with self._lock:
            if count > 0:
                self._faults[op] = count
            else:
                self._faults.pop(op, None)

    def check_fault(self, op: str) -> None:
        with self._lock:
            n = self._faults.get(op, 0)
            if n <= 0:
                return
            if n == 1:
                del self._faults[op]
            else:
                self._faults[op] = n - 1
        raise InjectedFault(f"{op} on {self.node_id}")

    # meta-info and archives

    def get_meta_info(self) -> NodeMetaInfo:
        with self._lock:
            load = len(self._instances)
        p = self.platform_info
        return NodeMetaInfo(
            node_id=self.node_id,
            os=p["os"],
            arch=p["arch"],
            cpu_count=p["cpu_count"],
            mem_bytes=p["mem_bytes"],
            properties=dict(self.properties),
            installed_archives=tuple(self.store.list()),
            instance_load=load,
        )

    def archive_in_use(self, archive_id: str) -> bool:
        with self._lock:
            return any(h.archive_id == archive_id for h in self._homes.values())

    def install_archive(self, archive_id: str, data: bytes, checksum: str | None = None) -> bool:
        return self.store.install_bytes(archive_id, data, checksum)

    def install_archive_from_url(self, archive_id: str, url: str, checksum: str | None = None) -> bool:
        return self.store.install_from_url(archive_id, url, checksum)

    def uninstall_archive(self, archive_id: str) -> None:
        self.store.uninstall(archive_id)

    def list_archives(self) -> dict[str, str]:
        return {i: self.store.checksum(i) for i in self.store.list()}

    # servers

    def create_server(self, server_id: str) -> EntityRef:
        if not is_identifier(server_id):
            raise BadRequest(f"bad server id {server_id!r}")
        with self._lock:
            if server_id in self._servers:
                raise DuplicateId(f"server {server_id}")
            srv = ServerState(self._ref(EntityKind.SERVER, server_id))
            self._servers[server_id] = srv
            return srv.ref

    def list_servers(self) -> list[EntityRef]:
        with self._lock:
            return [s.ref for s in self._servers.values()]

    def remove_server(self, server_id: str) -> list[EntityRef]:
        """Destroy a server and everything below it; returns removed refs, leaves first."""
        with self._lock:
            srv = self._servers.get(server_id)
            if srv is None:
                raise NotFound(f"server {server_id}")
            srv.removed = True
            containers = list(srv.containers.values())
        removed: list[EntityRef] = []
        for c in reversed(containers):
            removed.extend(self._destroy_container(c))
        with self._lock:
            self._servers.pop(server_id, None)
        removed.append(srv.ref)
        return removed

    # containers

    def _server(self, server_id: str) -> ServerState:
        srv = self._servers.get(server_id)
        if srv is None or srv.removed:
            raise NoSuchServer(server_id)
        return srv

    def create_container(self, server_id: str, container_id: str) -> EntityRef:
        if not is_identifier(container_id):
            raise BadRequest(f"bad container id {container_id!r}")
        with self._lock:
            srv = self._server(server_id)
            if container_id in srv.containers or container_id in self._containers:
                raise DuplicateId(f"container {container_id}")
            c = ContainerState(self._ref(EntityKind.CONTAINER, container_id), srv)
            srv.containers[container_id] = c
            self._containers[container_id] = c
            return c.ref

    def list_containers(self, server_id: str) -> list[EntityRef]:
        with self._lock:
            return [c.ref for c in self._server(server_id).containers.values()]

    def remove_container(self, server_id: str, container_id: str) -> list[EntityRef]:
        with self._lock:
            srv = self._server(server_id)
            c = srv.containers.get(container_id)
            if c is None:
                raise NotFound(f"container {container_id}")
        return self._destroy_container(c)

    def _destroy_container(self, c: ContainerState) -> list[EntityRef]:
        removed: list[EntityRef] = []
        links: list[tuple[str, PortAddress, PortAddress, str]] = []
        with c.lock:
            if c.removed:
                return removed
            for h in reversed(list(c.homes.values())):
                removed.extend(self._drop_home(h, links))
            c.removed = True
            with self._lock:
                c.server.containers.pop(c.ref.id, None)
                self._containers.pop(c.ref.id, None)
        removed.append(c.ref)
        self._unlink(links)
        return removed

    # homes

    def _container(self, container_id: str, server_id: str | None = None) -> ContainerState:
        c = self._containers.get(container_id)
        if c is None or c.removed or (server_id is not None and c.server.ref.id != server_id):
            raise NoSuchContainer(container_id)
        return c

    def install_home(self, server_id: str, container_id: str, home_id: str, archive_id: str) -> EntityRef:
        if not is_identifier(home_id):
            raise BadRequest(f"bad home id {home_id!r}")
        with self._lock:
            self._server(server_id)
            c = self._container(container_id, server_id)
        try:
            manifest = self.store.retrieve(archive_id).manifest
        except NotFound:
            raise ArchiveNotInstalled(archive_id) from None
        with c.lock:
            if c.removed:
                raise NoSuchContainer(container_id)
            with self._lock:
                if home_id in self._homes:
                    raise DuplicateId(f"home {home_id}")
                attrs = {a.name: a.default for a in manifest.home_attributes if a.default is not None}
                h = HomeState(self._ref(EntityKind.HOME, home_id), c, archive_id, manifest, attrs)
                c.homes[home_id] = h
                self._homes[home_id] = h
                return h.ref

    def list_homes(self, server_id: str, container_id: str) -> list[EntityRef]:
        with self._lock:
            return [h.ref for h in self._container(container_id, server_id).homes.values()]

    def _home(self, home_ref) -> HomeState:
        with self._lock:
            h = self._homes.get(_ref_id(home_ref))
        if h is None or h.removed:
            raise NotFound(f"home {_ref_id(home_ref)}")
        return h

    def set_home_attr(self, home_ref, name: str, value: AttrValue) -> None:
        h = self._home(home_ref)
        decl = h.manifest.home_attribute(name)
        if decl is None:
            raise UnknownAttribute(f"{h.manifest.home_type}.{name}")
        if value.type is not decl.value_type:
            raise TypeMismatch(f"{name}: expected {decl.value_type.value}, got {value.type.value}")
        with h.container.lock:
            if h.removed:
                raise NotFound(f"home {h.ref.id}")
            h.attrs[name] = value

    def get_home_attrs(self, home_ref) -> dict[str, AttrValue]:
        h = self._home(home_ref)
        with h.container.lock:
            return dict(h.attrs)

    def remove_home(self, home_ref) -> list[EntityRef]:
        h = self._home(home_ref)
        links: list = []
        with h.container.lock:
            if h.removed:
                raise NotFound(f"home {h.ref.id}")
            removed = self._drop_home(h, links)
        self._unlink(links)
        return removed

    def _drop_home(self, h: HomeState, links: list) -> list[EntityRef]:
        # caller holds h.container.lock
        removed = []
        for inst in reversed(list(h.instances.values())):
            self._drop_instance(inst, links)
            removed.append(inst.ref)
        h.removed = True
        with self._lock:
            h.container.homes.pop(h.ref.id, None)
            self._homes.pop(h.ref.id, None)
        removed.append(h.ref)
        return removed

    # instances

    def create_instance(self, home_ref, instance_id: str) -> EntityRef:
        if not is_identifier(instance_id):
            raise BadRequest(f"bad instance id {instance_id!r}")
        h = self._home(home_ref)
        with h.container.lock:
            if h.removed:
                raise NotFound(f"home {h.ref.id}")
            with self._lock:
                if instance_id in self._instances:
                    raise DuplicateId(f"instance {instance_id}")
                m = h.manifest
                inst = InstanceState(
                    self._ref(EntityKind.INSTANCE, instance_id),
                    h,
                    {a.name: a.default for a in m.instance_attributes if a.default is not None},
                )
                for p in m.ports:
                    if p.kind.is_origin:
                        inst.outbound[p.name] = {}
                    else:
                        inst.inbound[p.name] = {}
                    if p.kind is PortKind.EVENT_SINK:
                        inst.sink_logs[p.name] = []
                h.instances[instance_id] = inst
                self._instances[instance_id] = inst
                return inst.ref

    def list_instances(self, home_ref) -> list[EntityRef]:
        h = self._home(home_ref)
        with h.container.lock:
            return [i.ref for i in h.instances.values()]

    def _instance(self, ref) -> InstanceState:
        with self._lock:
            inst = self._instances.get(_ref_id(ref))
        if inst is None or inst.removed:
            raise NotFound(f"instance {_ref_id(ref)}")
        return inst

    def remove_instance(self, instance_ref) -> list[EntityRef]:
        inst = self._instance(instance_ref)
        links: list = []
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            self._drop_instance(inst, links)
        self._unlink(links)
        return [inst.ref]

    def _drop_instance(self, inst: InstanceState, links: list) -> None:
        # caller holds the container lock; peer notifications are queued in ``links``
        me = inst.ref.id
        for port, conns in inst.outbound.items():
            for cookie, target in conns.items():
                links.append(("detach", target, PortAddress(self.node_id, me, port), cookie))
            conns.clear()
        for port, conns in inst.inbound.items():
            for cookie, source in conns.items():
                links.append(("drop", source, PortAddress(self.node_id, me, port), cookie))
            conns.clear()
        inst.removed = True
        with self._lock:
            inst.home.instances.pop(me, None)
            self._instances.pop(me, None)

    def _unlink(self, links: list) -> None:
        for action, peer, me, cookie in links:
            try:
                if action == "detach":
                    self._peer_call(peer.node_id, "node.detach_inbound",
                                    instance=peer.instance_id, port=peer.port, cookie=cookie)
                else:
                    self._peer_call(peer.node_id, "node.drop_outbound",
                                    instance=peer.instance_id, port=peer.port, cookie=cookie)
            except DciError as exc:
                log.info("%s: could not unlink %s %s: %s", self.node_id, action, peer, exc)

    def set_instance_attr(self, instance_ref, name: str, value: AttrValue) -> None:
        inst = self._instance(instance_ref)
        decl = inst.manifest.instance_attribute(name)
        if decl is None:
            raise UnknownAttribute(f"{inst.manifest.component_type}.{name}")
        if value.type is not decl.value_type:
            raise TypeMismatch(f"{name}: expected {decl.value_type.value}, got {value.type.value}")
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            if inst.configured:
                raise AlreadyConfigured(inst.ref.id)
            inst.attrs[name] = value

    def get_instance_attrs(self, instance_ref) -> dict[str, AttrValue]:
        inst = self._instance(instance_ref)
        with inst.home.container.lock:
            return dict(inst.attrs)

    def configuration_complete(self, instance_ref) -> None:
        inst = self._instance(instance_ref)
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            if inst.configured:
                raise AlreadyConfigured(inst.ref.id)
            inst.configured = True
            inst.count = 0

    def is_configured(self, instance_ref) -> bool:
        return self._instance(instance_ref).configured

    # ports

    def describe_port(self, instance_ref, port: str) -> PortDecl:
        decl = self._instance(instance_ref).manifest.port(port)
        if decl is None:
            raise NoSuchPort(f"{_ref_id(instance_ref)}.{port}")
        return decl

    def _peer_call(self, node_id: str, op: str, **args) -> Any:
        if node_id == self.node_id:
            return self.dispatcher.dispatch(op, args)
        if self.peers is None:
            raise UnresolvableTarget(f"no route to node {node_id}")
        try:
            chan = self.peers(node_id)
        except (UnknownNode, ConnectionClosed, Timeout) as exc:
            raise UnresolvableTarget(f"node {node_id}: {exc}") from exc
        return chan.call(op, args)

    def connect(self, instance_ref, port: str, target: PortAddress) -> str | None:
        """Connect an origin port to ``target``; returns the cookie (None for simplex)."""
        inst = self._instance(instance_ref)
        decl = inst.manifest.port(port)
        if decl is None:
            raise NoSuchPort(f"{inst.ref.id}.{port}")
        if not decl.kind.is_origin:
            raise PortKindMismatch(f"{port} is a {decl.kind.value}")
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            conns = inst.outbound[port]
            if decl.kind is PortKind.RECEPTACLE_SIMPLEX and conns:
                raise AlreadyConnected(f"{inst.ref.id}.{port}")
            cookie = f"{self.node_id}:c{next(self._cookies)}"
            conns[cookie] = target  # reserve before talking to the target
        source = PortAddress(self.node_id, inst.ref.id, port)
        try:
            self._peer_call(
                target.node_id,
                "node.attach_inbound",
                instance=target.instance_id,
                port=target.port,
                source=to_jsonable(source),
                cookie=cookie,
                source_decl=to_jsonable(decl),
            )
        except DciError as exc:
            with inst.home.container.lock:
                inst.outbound.get(port, {}).pop(cookie, None)
            if isinstance(exc, NotFound):
                raise UnresolvableTarget(f"{target}: {exc}") from exc
            raise
        return None if decl.kind is PortKind.RECEPTACLE_SIMPLEX else cookie

    def attach_inbound(self, instance_ref, port: str, source: PortAddress, cookie: str, source_decl: PortDecl) -> None:
        inst = self._instance(instance_ref)
        decl = inst.manifest.port(port)
        if decl is None:
            raise NoSuchPort(f"{inst.ref.id}.{port}")
        if not decl.kind.is_target or source_decl.kind.is_receptacle != (decl.kind is PortKind.FACET):
            raise PortKindMismatch(f"{source_decl.kind.value} cannot connect to {decl.kind.value}")
        if source_decl.interface_type != decl.interface_type:
            raise TypeMismatch(f"{source_decl.interface_type} != {decl.interface_type}")
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            inst.inbound[port][cookie] = source

    def detach_inbound(self, instance_ref, port: str, cookie: str) -> None:
        try:
            inst = self._instance(instance_ref)
        except NotFound:
            return
        with inst.home.container.lock:
            inst.inbound.get(port, {}).pop(cookie, None)

    def drop_outbound(self, instance_ref, port: str, cookie: str) -> None:
        try:
            inst = self._instance(instance_ref)
        except NotFound:
            return
        with inst.home.container.lock:
            inst.outbound.get(port, {}).pop(cookie, None)

    def disconnect(self, instance_ref, port: str, cookie: str | None = None) -> None:
        inst = self._instance(instance_ref)
        decl = inst.manifest.port(port)
        if decl is None:
            raise NoSuchPort(f"{inst.ref.id}.{port}")
        if not decl.kind.is_origin:
            raise PortKindMismatch(f"{port} is a {decl.kind.value}")
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            conns = inst.outbound[port]
            if not conns:
                raise NotConnected(f"{inst.ref.id}.{port}")
            if decl.kind is PortKind.RECEPTACLE_SIMPLEX and cookie is None:
                cookie = next(iter(conns))
            if cookie not in conns:
                raise UnknownCookie(f"{inst.ref.id}.{port}: {cookie}")
            target = conns.pop(cookie)
        self._unlink([("detach", target, PortAddress(self.node_id, inst.ref.id, port), cookie)])

    def port_table(self, instance_ref) -> dict[str, Any]:
        inst = self._instance(instance_ref)
        with inst.home.container.lock:
            return _port_table(inst)

    # behaviors

    def invoke_facet(self, instance_ref, facet: str, payload: bytes) -> bytes:
        inst = self._instance(instance_ref)
        decl = inst.manifest.port(facet)
        if decl is None or decl.kind is not PortKind.FACET:
            raise NoSuchPort(f"{inst.ref.id}.{facet}")
        behavior = inst.manifest.behavior
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            if not inst.configured:
                raise NotActive(inst.ref.id)
            if behavior is Behavior.COUNTER:
                inst.count += 1
                return _COUNT.pack(inst.count)
            if behavior is Behavior.RELAY:
                out = next((p for p in inst.manifest.ports if p.kind is PortKind.RECEPTACLE_SIMPLEX), None)
                target = next(iter(inst.outbound[out.name].values()), None) if out else None
                if target is None:
                    raise RelayUnconnected(inst.ref.id)
        if behavior is Behavior.NULL:
            return b""
        if behavior is Behavior.ECHO:
            return bytes(payload)
        result = self._peer_call(
            target.node_id,
            "node.invoke_facet",
            instance=target.instance_id,
            facet=target.port,
            payload=base64.b64encode(payload).decode("ascii"),
        )
        return base64.b64decode(result)

    def emit_event(self, instance_ref, port: str, payload: bytes) -> int:
        """Queue ``payload`` for every connected sink; returns the number of sinks."""
        inst = self._instance(instance_ref)
        decl = inst.manifest.port(port)
        if decl is None or decl.kind is not PortKind.EVENT_SOURCE:
            raise NoSuchPort(f"{inst.ref.id}.{port}")
        with inst.home.container.lock:
            if inst.removed:
                raise NotFound(f"instance {inst.ref.id}")
            if not inst.configured:
                raise NotActive(inst.ref.id)
            targets = list(inst.outbound[port].values())
            source = PortAddress(self.node_id, inst.ref.id, port)
            for t in targets:
                self._events.put((t, bytes(payload), source))
        return len(targets)

    def _delivery_loop(self) -> None:
        while True:
            item = self._events.get()
            if item is None:
                return
            target, payload, source = item
            try:
                if target.node_id == self.node_id:
                    self.deliver_event(target.instance_id, target.port, payload, source)
                elif self.peers is not None:
                    self.peers(target.node_id).notify(
                        "node.deliver_event",
                        {
                            "instance": target.instance_id,
                            "port": target.port,
                            "payload": base64.b64encode(payload).decode("ascii"),
                            "source": to_jsonable(source),
                        },
                    )
            except Exception as exc:
                log.info("%s: event to %s dropped: %s", self.node_id, target, exc)

    def deliver_event(self, instance_ref, port: str, payload: bytes, source: PortAddress | None = None) -> None:
        try:
            inst = self._instance(instance_ref)
        except NotFound:
            return
        with inst.home.container.lock:
            log_ = inst.sink_logs.get(port)
            if log_ is not None and not inst.removed:
                log_.append(bytes(payload))

    def sink_log(self, instance_ref, port: str) -> list[bytes]:
        inst = self._instance(instance_ref)
        with inst.home.container.lock:
            if port not in inst.sink_logs:
                raise NoSuchPort(f"{inst.ref.id}.{port}")
            return list(inst.sink_logs[port])

    # introspection

    def snapshot(self) -> dict[str, Any]:
        """Whole hierarchy as plain JSON data, in creation order."""
        with self._lock:
            servers = list(self._servers.values())
        out = []
        for s in servers:
            containers = []
            for c in list(s.containers.values()):
                with c.lock:
                    homes = []
                    for h in c.homes.values():
                        homes.append(
                            {
                                "id": h.ref.id,
                                "archive_id": h.archive_id,
                                "attrs": to_jsonable(h.attrs),
                                "instances": [
                                    {
                                        "id": i.ref.id,
                                        "attrs": to_jsonable(i.attrs),
                                        "configured": i.configured,
                                        "ports": _port_table(i),
                                    }
                                    for i in h.instances.values()
                                ],
                            }
                        )
                containers.append({"id": c.ref.id, "homes": homes})
            out.append({"id": s.ref.id, "containers": containers})
        return {"node_id": self.node_id, "servers": out}


def _port_table(inst: InstanceState) -> dict[str, Any]:
    table = {}
    for p in inst.manifest.ports:
        conns = inst.outbound.get(p.name) if p.kind.is_origin else inst.inbound.get(p.name)
        table[p.name] = {
            "kind": p.kind.value,
            "direction": "outbound" if p.kind.is_origin else "inbound",
            "connections": {k: to_jsonable(v) for k, v in sorted((conns or {}).items())},
        }
    return table


# wire adaptors


def _b64(data: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise BadRequest(f"bad base64 payload: {exc}") from exc


def _value(data: Any) -> AttrValue:
    try:
        return from_jsonable(AttrValue, data)
    except CodecError as exc:
        raise BadRequest(str(exc)) from exc


def _decode(tp, data):
    try:
        return from_jsonable(tp, data)
    except CodecError as exc:
        raise BadRequest(str(exc)) from exc


def build_dispatcher(agent: NodeAgent) -> Dispatcher:
    d = Dispatcher()
    a = agent

    def op(name: str):
        def deco(fn):
            @functools.wraps(fn)
            def guarded(**kwargs):
                a.check_fault(name)
                return fn(**kwargs)

            d.register(name, guarded)
            return fn

        return deco

    @op("node.get_meta_info")
    def get_meta_info():
        """Hardware/software description and current instance load."""
        return to_jsonable(a.get_meta_info())

    @op("node.install_archive")
    def install_archive(archive_id: str, data: str, checksum: str | None = None):
        """Push-mode install of a base64-encoded .ccar file."""
        return a.install_archive(archive_id, _b64(data), checksum)

    @op("node.install_archive_from_url")
    def install_archive_from_url(archive_id: str, url: str, checksum: str | None = None):
        """Pull-mode install from a file: or http: URL."""
        return a.install_archive_from_url(archive_id, url, checksum)

    @op("node.list_archives")
    def list_archives():
        """Installed archive ids mapped to their checksums."""
        return a.list_archives()

    @op("node.retrieve_archive")
    def retrieve_archive(archive_id: str):
        """Base64 .ccar bytes of an installed archive."""
        return base64.b64encode(encode_archive(a.store.retrieve(archive_id))).decode("ascii")

    @op("node.uninstall_archive")
    def uninstall_archive(archive_id: str):
        """Remove an archive not backing any live home."""
        a.uninstall_archive(archive_id)

    @op("node.create_server")
    def create_server(server_id: str):
        """Create a component server."""
        return to_jsonable(a.create_server(server_id))

    @op("node.remove_server")
    def remove_server(server_id: str):
        """Destroy a server with all its containers, homes and instances."""
        return to_jsonable(a.remove_server(server_id))

    @op("node.list_servers")
    def list_servers():
        """Live servers."""
        return to_jsonable(a.list_servers())

    @op("node.create_container")
    def create_container(server_id: str, container_id: str):
        """Create a container inside a server."""
        return to_jsonable(a.create_container(server_id, container_id))

    @op("node.remove_container")
    def remove_container(server_id: str, container_id: str):
        """Destroy a container and everything in it."""
        return to_jsonable(a.remove_container(server_id, container_id))

    @op("node.list_containers")
    def list_containers(server_id: str):
        """Containers of one server."""
        return to_jsonable(a.list_containers(server_id))

    @op("node.install_home")
    def install_home(server_id: str, container_id: str, home_id: str, archive_id: str):
        """Install a home from a locally installed archive."""
        return to_jsonable(a.install_home(server_id, container_id, home_id, archive_id))

    @op("node.list_homes")
    def list_homes(server_id: str, container_id: str):
        """Homes of one container."""
        return to_jsonable(a.list_homes(server_id, container_id))

    @op("node.remove_home")
    def remove_home(home: Any):
        """Destroy a home and its instances."""
        return to_jsonable(a.remove_home(home))

    @op("node.set_home_attr")
    def set_home_attr(home: Any, name: str, value: dict):
        """Set one home attribute."""
        a.set_home_attr(home, name, _value(value))

    @op("node.get_home_attrs")
    def get_home_attrs(home: Any):
        """Current home attributes."""
        return to_jsonable(a.get_home_attrs(home))

    @op("node.create_instance")
    def create_instance(home: Any, instance_id: str):
        """Create a component instance through a home."""
        return to_jsonable(a.create_instance(home, instance_id))

    @op("node.list_instances")
    def list_instances(home: Any):
        """Instances created by one home."""
        return to_jsonable(a.list_instances(home))

    @op("node.remove_instance")
    def remove_instance(instance: Any):
        """Disconnect and destroy an instance."""
        return to_jsonable(a.remove_instance(instance))

    @op("node.set_instance_attr")
    def set_instance_attr(instance: Any, name: str, value: dict):
        """Set one instance attribute; only before configuration_complete."""
        a.set_instance_attr(instance, name, _value(value))

    @op("node.get_instance_attrs")
    def get_instance_attrs(instance: Any):
        """Current instance attributes."""
        return to_jsonable(a.get_instance_attrs(instance))

    @op("node.connect")
    def connect(instance: Any, port: str, target: dict):
        """Connect an origin port to a remote port address; returns a cookie or null."""
        return a.connect(instance, port, _decode(PortAddress, target))

    @op("node.disconnect")
    def disconnect(instance: Any, port: str, cookie: str | None = None):
        """Remove one connection."""
        a.disconnect(instance, port, cookie)

    @op("node.describe_port")
    def describe_port(instance: Any, port: str):
        """Port declaration of an instance port."""
        return to_jsonable(a.describe_port(instance, port))

    @op("node.attach_inbound")
    def attach_inbound(instance: Any, port: str, source: dict, cookie: str, source_decl: dict):
        """Record an inbound connection after checking compatibility."""
        a.attach_inbound(instance, port, _decode(PortAddress, source), cookie, _decode(PortDecl, source_decl))

    @op("node.detach_inbound")
    def detach_inbound(instance: Any, port: str, cookie: str):
        """Forget an inbound connection record."""
        a.detach_inbound(instance, port, cookie)

    @op("node.drop_outbound")
    def drop_outbound(instance: Any, port: str, cookie: str):
        """Forget an outbound connection whose target went away."""
        a.drop_outbound(instance, port, cookie)

    @op("node.port_table")
    def port_table(instance: Any):
        """Connection records of every port of an instance."""
        return a.port_table(instance)

    @op("node.configuration_complete")
    def configuration_complete(instance: Any):
        """Freeze attributes and activate the instance."""
        a.configuration_complete(instance)

    @op("node.invoke_facet")
    def invoke_facet(instance: Any, facet: str, payload: str):
        """Invoke a facet with a base64 payload; returns base64."""
        return base64.b64encode(a.invoke_facet(instance, facet, _b64(payload))).decode("ascii")

    @op("node.emit_event")
    def emit_event(instance: Any, port: str, payload: str):
        """Publish a base64 payload on an event source."""
        return a.emit_event(instance, port, _b64(payload))

    @op("node.deliver_event")
    def deliver_event(instance: Any, port: str, payload: str, source: dict | None = None):
        """Inbound event delivery (sent as a one-way event message)."""
        a.deliver_event(instance, port, _b64(payload), _decode(PortAddress, source) if source else None)

    @op("node.sink_log")
    def sink_log(instance: Any, port: str):
        """Payloads received so far on an event sink, base64."""
        return [base64.b64encode(p).decode("ascii") for p in a.sink_log(instance, port)]

    @op("node.snapshot")
    def snapshot():
        """Full entity hierarchy with attributes and port tables."""
        return a.snapshot()

    @op("node.inject_fault")
    def inject_fault(op: str, count: int = 1):
        """Make the next ``count`` calls of ``op`` fail (test hook)."""
        a.inject_fault(op, count)

    return d
