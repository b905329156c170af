"""An in-process domain with several node agents, over loopback or TCP."""

from __future__ import annotations

import itertools
import tempfile
from pathlib import Path

from dci.client import DomainClient
from dci.services import AgentService, DomainService
from dci.transport import LoopbackHub

_seq = itertools.count(1)


class LocalCluster:
    """One domain plus one agent per entry of ``nodes`` (node id -> properties).

    ``transport`` is ``"loop"`` for in-process pipes or ``"tcp"`` for real
    sockets on 127.0.0.1. Each cluster has its own loopback hub, so clusters
    never see each other.
    """

    def __init__(
        self,
        nodes: dict[str, dict[str, str]],
        transport: str = "loop",
        root: str | Path | None = None,
        lease_interval: float = 5.0,
        state_file: str | Path | None = None,
    ):
        self.transport = transport
        self.hub = LoopbackHub()
        self.lease_interval = lease_interval
        self._tmp = None
        if root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="dci-cluster-")
            root = self._tmp.name
        self.root = Path(root)
        self.domain = DomainService(self._listen("domain"), hub=self.hub, lease_interval=lease_interval,
                                    state_file=state_file)
        self.agents: dict[str, AgentService] = {}
        for node_id, props in nodes.items():
            self.add_agent(node_id, props)
        self.client = DomainClient(self.domain.address, hub=self.hub)

    def _listen(self, name: str) -> str:
        if self.transport == "tcp":
            return "tcp://127.0.0.1:0"
        return f"loop://{name}-{next(_seq)}"

    def add_agent(self, node_id: str, properties: dict[str, str] | None = None) -> AgentService:
        agent = AgentService(
            node_id,
            self.domain.address,
            self._listen(node_id),
            self.root / "stores" / node_id,
            properties,
            hub=self.hub,
            lease_interval=self.lease_interval,
            platform_info={"os": "testos", "arch": "testarch", "cpu_count": 1, "mem_bytes": 0},
        )
        self.agents[node_id] = agent
        return agent

    def stop_agent(self, node_id: str, graceful: bool = True) -> None:
        self.agents.pop(node_id).close(graceful=graceful)

    @property
    def manager(self):
        return self.domain.manager

    def snapshots(self) -> dict[str, dict]:
        """Entity hierarchy of every agent, as reported over the wire."""
        return {n: self._snapshot(n) for n in sorted(self.agents)}

    def _snapshot(self, node_id: str) -> dict:
        return self.manager.node_channel(node_id).call("node.snapshot", {})

    def stores(self) -> dict[str, dict[str, bytes]]:
        """Raw archive store files per node."""
        out = {}
        for n in sorted(self.agents):
            d = self.root / "stores" / n
            out[n] = {p.name: p.read_bytes() for p in sorted(d.iterdir()) if not p.name.startswith(".")}
        return out

    def close(self) -> None:
        self.client.close()
        for node_id in list(self.agents):
            self.agents.pop(node_id).close(graceful=False)
        self.domain.close()
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self) -> LocalCluster:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
