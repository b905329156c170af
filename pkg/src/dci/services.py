"""Process wiring: a domain service and node agent services on the transport."""

from __future__ import annotations

import logging
import os
import threading

from dci.archive import ArchiveStore
from dci.domain import DomainManager, build_dispatcher as build_domain_dispatcher
from dci.errors import ConnectionClosed, DciError, UnknownNode
from dci.model import to_jsonable
from dci.node_agent import NodeAgent
from dci.transport import Channel, Connector, LoopbackHub, connect, serve

log = logging.getLogger(__name__)


class DomainService:
    """A DomainManager listening on ``listen``."""

    def __init__(
        self,
        listen: str,
        hub: LoopbackHub | None = None,
        lease_interval: float = 5.0,
        state_file: str | os.PathLike | None = None,
        reconcile_grace: float | None = None,
    ):
        self.hub = hub
        self.manager = DomainManager(Connector(hub), lease_interval=lease_interval, state_file=state_file)
        self.dispatcher = build_domain_dispatcher(self.manager)
        self.service = serve(listen, self.dispatcher, hub=hub)
        self.address = self.service.address
        if reconcile_grace is not None:
            self.manager.reconcile_after(reconcile_grace)

    def close(self) -> None:
        self.service.close()
        self.manager.close()


class AgentService:
    """A NodeAgent listening on ``listen`` and registered with a domain.

    A background thread renews the lease; if the domain has forgotten the
    node (restart or expiry) the agent registers again.
    """

    def __init__(
        self,
        node_id: str,
        domain_address: str,
        listen: str,
        store_dir: str | os.PathLike,
        properties: dict[str, str] | None = None,
        hub: LoopbackHub | None = None,
        lease_interval: float = 5.0,
        platform_info: dict | None = None,
    ):
        self.hub = hub
        self.domain_address = domain_address
        self.lease_interval = lease_interval
        self._peers = Connector(hub)
        self._addresses: dict[str, str] = {}
        self._domain: Channel | None = None
        self._domain_lock = threading.Lock()
        self.agent = NodeAgent(node_id, ArchiveStore(store_dir), properties, self._peer, platform_info)
        self.service = serve(listen, self.agent.dispatcher, hub=hub)
        self.address = self.agent.address = self.service.address
        self._stop = threading.Event()
        try:
            self._register()
        except BaseException:
            self.service.close()
            self.agent.close()
            raise
        self._thread = threading.Thread(target=self._lease_loop, name=f"lease-{node_id}", daemon=True)
        self._thread.start()

    @property
    def node_id(self) -> str:
        return self.agent.node_id

    def domain(self) -> Channel:
        with self._domain_lock:
            if self._domain is None or self._domain.closed:
                self._domain = connect(self.domain_address, hub=self.hub)
            return self._domain

    def _register(self) -> None:
        self.domain().call("domain.register_node", {
            "node_id": self.node_id,
            "address": self.address,
            "meta": to_jsonable(self.agent.get_meta_info()),
        })

    def _lease_loop(self) -> None:
        while not self._stop.wait(self.lease_interval):
            try:
                self.domain().call("domain.renew_lease", {"node_id": self.node_id}, timeout=self.lease_interval)
            except UnknownNode:
                try:
                    self._register()
                except DciError as exc:
                    log.warning("%s: re-registration failed: %s", self.node_id, exc)
            except DciError as exc:
                log.warning("%s: lease renewal failed: %s", self.node_id, exc)

    def _peer(self, node_id: str) -> Channel:
        address = self._addresses.get(node_id)
        if address is not None:
            try:
                return self._peers.get(address)
            except ConnectionClosed:
                # the peer may have re-registered elsewhere; ask the domain again
                self._addresses.pop(node_id, None)
        address = self.domain().call("domain.node_address", {"node_id": node_id})
        self._addresses[node_id] = address
        return self._peers.get(address)

    def close(self, graceful: bool = True) -> None:
        """Stop serving; a graceful close deregisters from the domain first."""
        self._stop.set()
        if graceful:
            try:
                self.domain().call("domain.deregister_node", {"node_id": self.node_id}, timeout=5.0)
            except DciError as exc:
                log.warning("%s: deregistration failed: %s", self.node_id, exc)
        self.service.close()
        self._peers.close()
        with self._domain_lock:
            if self._domain is not None:
                self._domain.close()
        self.agent.close()
