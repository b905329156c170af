"""Typed client for the domain service."""

from __future__ import annotations

import base64
from collections.abc import Callable
from typing import Any

from dci.archive import encode_archive
from dci.assembly import AssemblyView, view_from_json
from dci.model import (
    AssemblyDescriptor,
    ComponentArchive,
    DeploymentTrace,
    EntityRef,
    NodeMetaInfo,
    Step,
    from_jsonable,
    to_jsonable,
)
from dci.transport import Channel, Dispatcher, LoopbackHub, connect


class DomainClient:
    """Calls domain operations; ``on_progress`` receives deploy/teardown progress lines."""

    def __init__(
        self,
        address: str,
        hub: LoopbackHub | None = None,
        timeout: float = 120.0,
        on_progress: Callable[[str], None] | None = None,
    ):
        self.timeout = timeout
        self.on_progress = on_progress
        d = Dispatcher()
        d.register("assembly.progress", self._progress)
        self.channel: Channel = connect(address, d, hub=hub)

    def _progress(self, line: str) -> None:
        if self.on_progress is not None:
            self.on_progress(line)

    def close(self) -> None:
        self.channel.close()

    def __enter__(self) -> DomainClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def call(self, op: str, **args) -> Any:
        return self.channel.call(op, args, timeout=self.timeout)

    # nodes

    def list_nodes(self) -> list[str]:
        return self.call("domain.list_nodes")

    def domain_info(self) -> list[dict]:
        """Each entry: ``{"meta": NodeMetaInfo, "address": str, "reachable": bool}``."""
        out = []
        for s in self.call("domain.get_domain_info"):
            out.append({**s, "meta": from_jsonable(NodeMetaInfo, s["meta"])})
        return out

    def node_meta(self, node_id: str) -> dict:
        s = self.call("domain.get_node_meta", node_id=node_id)
        return {**s, "meta": from_jsonable(NodeMetaInfo, s["meta"])}

    # naming and homes

    def bind_name(self, path: str, ref: EntityRef) -> None:
        self.call("domain.bind_name", path=path, ref=to_jsonable(ref))

    def resolve_name(self, path: str) -> EntityRef:
        return from_jsonable(EntityRef, self.call("domain.resolve_name", path=path))

    def unbind_name(self, path: str) -> None:
        self.call("domain.unbind_name", path=path)

    def list_names(self, prefix: str = "") -> list[str]:
        return self.call("domain.list_names", prefix=prefix)

    def list_homes(self) -> list[dict]:
        return [{**h, "ref": from_jsonable(EntityRef, h["ref"])} for h in self.call("domain.list_homes")]

    def find_home_by_type(self, home_type: str) -> list[EntityRef]:
        return [from_jsonable(EntityRef, r) for r in self.call("domain.find_home_by_type", home_type=home_type)]

    def registry_snapshot(self) -> dict:
        return self.call("domain.registry_snapshot")

    # models and assemblies

    def install_model(self, model_id: str, descriptor: AssemblyDescriptor,
                      archives: dict[str, ComponentArchive]) -> None:
        self.call(
            "assembly.install_model",
            model_id=model_id,
            descriptor=to_jsonable(descriptor),
            archives={r: base64.b64encode(encode_archive(a)).decode("ascii") for r, a in archives.items()},
        )

    def list_models(self) -> list[str]:
        return self.call("assembly.list_models")

    def uninstall_model(self, model_id: str) -> None:
        self.call("assembly.uninstall_model", model_id=model_id)

    def create_assembly(self, model_id: str, assembly_id: str) -> EntityRef:
        return from_jsonable(EntityRef, self.call("assembly.create_assembly", model_id=model_id,
                                                  assembly_id=assembly_id))

    def deploy(self, assembly_id: str) -> DeploymentTrace:
        return from_jsonable(DeploymentTrace, self.call("assembly.deploy", assembly_id=assembly_id))

    def teardown(self, assembly_id: str) -> DeploymentTrace:
        return from_jsonable(DeploymentTrace, self.call("assembly.teardown", assembly_id=assembly_id))

    def destroy_assembly(self, assembly_id: str) -> AssemblyView:
        return view_from_json(self.call("assembly.destroy_assembly", assembly_id=assembly_id))

    def introspect(self, assembly_id: str) -> AssemblyView:
        return view_from_json(self.call("assembly.introspect", assembly_id=assembly_id))

    def list_assemblies(self) -> list[str]:
        return self.call("assembly.list_assemblies")

    def inject_fault(self, step: Step, count: int = 1) -> None:
        self.call("assembly.inject_fault", step=Step(step).value, count=count)
