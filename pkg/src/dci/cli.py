"""Command-line entry point: ``dci <command>``.

Serve commands run the domain or a node agent until SIGINT/SIGTERM. The
other commands are single requests to the domain at ``--domain`` (or
``$DCI_DOMAIN``, or ``domain_address`` in the config file).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Any

from dci.archive import pack, write_archive
from dci.assembly import AssemblyView, load_package, view_to_json
from dci.client import DomainClient
from dci.errors import ConnectionClosed, DciError, DuplicateNode, UnknownAssembly
from dci.model import ArchiveManifest, NodeMetaInfo, decode, to_jsonable
from dci.model.codec import CodecError

ENV_DOMAIN = "DCI_DOMAIN"
DEFAULT_CONFIG = Path("~/.config/dci/config.json")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BIND = 2
EXIT_DUPLICATE_NODE = 3
EXIT_UNKNOWN_ASSEMBLY = 4

log = logging.getLogger("dci")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DuplicateNode):
        return EXIT_DUPLICATE_NODE
    if isinstance(exc, UnknownAssembly):
        return EXIT_UNKNOWN_ASSEMBLY
    return EXIT_ERROR


def load_config(path: str | None) -> dict[str, Any]:
    p = Path(path).expanduser() if path else DEFAULT_CONFIG.expanduser()
    if not p.exists():
        if path:
            raise SystemExit(f"config file {p} not found")
        return {}
    return json.loads(p.read_text())


def resolve_domain(flag: str | None, config: dict[str, Any]) -> str | None:
    """Flag, then environment, then config file."""
    return flag or os.environ.get(ENV_DOMAIN) or config.get("domain_address")


def emit(args, value: Any, human: str) -> None:
    if args.output == "json":
        print(json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False))
    else:
        print(human)


# rendering


def meta_xml(status: dict) -> str:
    meta: NodeMetaInfo = status["meta"]
    root = ET.Element("nodeMetaInfo", nodeId=meta.node_id, reachable=str(status["reachable"]).lower())
    for tag in ("os", "arch", "cpu_count", "mem_bytes", "instance_load"):
        ET.SubElement(root, tag).text = str(getattr(meta, tag))
    props = ET.SubElement(root, "properties")
    for k, v in sorted(meta.properties.items()):
        ET.SubElement(props, "property", name=k).text = v
    archives = ET.SubElement(root, "installedArchives")
    for a in meta.installed_archives:
        ET.SubElement(archives, "archive", id=a)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def render_view(view: AssemblyView) -> str:
    lines = [f"assembly {view.assembly_id} (model {view.model_id}): {view.status.value}"]
    if view.placements:
        lines.append("placements:")
        for iid, p in sorted(view.placements.items()):
            lines.append(f"  {iid}: node={p.node_id} server={p.server_id} container={p.container_id} "
                         f"home={p.home.id} instance={p.instance.id}")
    if view.connections:
        lines.append("connections:")
        for b in view.connections:
            lines.append(f"  {b.connection} [{b.cookie}]")
    lines.append(f"trace ({len(view.trace)} events):")
    lines.extend(render_trace(view.trace))
    if view.residue:
        lines.append("residue:")
        lines.extend(f"  {r}" for r in view.residue)
    return "\n".join(lines)


def render_trace(trace) -> list[str]:
    out = []
    for e in trace:
        what = str(e.connection) if e.connection else (e.subject.id if e.subject else "")
        extra = f" ({e.detail})" if e.detail else ""
        out.append(f"  {e.seq:4d} {e.step.value:<23} {e.node_id or '-':<6} {what}{extra}")
    return out


def trace_summary(trace) -> str:
    counts: dict[str, int] = {}
    for e in trace:
        counts[e.step.value] = counts.get(e.step.value, 0) + 1
    return ", ".join(f"{k}={v}" for k, v in counts.items())


# serve commands


def _wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.5):
        pass


def cmd_domain_serve(args, config) -> int:
    from dci.services import DomainService

    try:
        svc = DomainService(args.listen, lease_interval=args.lease, state_file=args.state,
                            reconcile_grace=args.grace if args.state else None)
    except OSError as exc:
        print(f"BindFailure: {args.listen}: {exc}", file=sys.stderr)
        return EXIT_BIND
    print(f"domain listening on {svc.address}", flush=True)
    try:
        _wait_for_signal()
    finally:
        svc.close()
    return EXIT_OK


def cmd_agent_serve(args, config) -> int:
    from dci.services import AgentService

    domain = resolve_domain(args.domain, config)
    if not domain:
        print("no domain address (use --domain or DCI_DOMAIN)", file=sys.stderr)
        return EXIT_ERROR
    props = {}
    for item in args.prop:
        key, sep, value = item.partition("=")
        if not sep or not key:
            print(f"bad --prop {item!r}; expected key=value", file=sys.stderr)
            return EXIT_ERROR
        props[key] = value
    try:
        svc = AgentService(args.node_id, domain, args.listen, args.store, props, lease_interval=args.lease)
    except OSError as exc:
        print(f"BindFailure: {args.listen}: {exc}", file=sys.stderr)
        return EXIT_BIND
    except DciError as exc:
        print(str(exc), file=sys.stderr)
        return exit_code_for(exc)
    print(f"agent {args.node_id} listening on {svc.address}", flush=True)
    try:
        _wait_for_signal()
    finally:
        svc.close(graceful=True)
    return EXIT_OK


# offline command


def cmd_pack(args, config) -> int:
    try:
        manifest = decode(ArchiveManifest, Path(args.manifest).read_bytes())
    except CodecError as exc:
        print(f"InvalidManifest: {exc}", file=sys.stderr)
        return EXIT_ERROR
    payload = Path(args.payload).read_bytes() if args.payload else b""
    archive = pack(manifest, payload)
    write_archive(args.out, archive)
    emit(args, {"path": args.out, "checksum": archive.checksum}, f"{args.out} {archive.checksum}")
    return EXIT_OK


# client commands


def cmd_install_model(args, client: DomainClient) -> int:
    descriptor, archives = load_package(args.package)
    model_id = args.model_id or descriptor.name
    client.install_model(model_id, descriptor, archives)
    emit(args, {"model_id": model_id}, f"installed model {model_id}")
    return EXIT_OK


def cmd_deploy(args, client: DomainClient) -> int:
    stream = sys.stderr if args.output == "json" else sys.stdout
    client.on_progress = lambda line: print(f"progress: {line}", file=stream, flush=True)
    client.create_assembly(args.model_id, args.id)
    trace = client.deploy(args.id)
    emit(args, to_jsonable(trace), f"deployed {args.id}: {len(trace)} events\n{trace_summary(trace)}")
    return EXIT_OK


def cmd_teardown(args, client: DomainClient) -> int:
    stream = sys.stderr if args.output == "json" else sys.stdout
    client.on_progress = lambda line: print(f"progress: {line}", file=stream, flush=True)
    view = client.destroy_assembly(args.assembly_id)
    human = f"{args.assembly_id}: {view.status.value}"
    if view.residue:
        human += "\nresidue:\n" + "\n".join(f"  {r}" for r in view.residue)
    emit(args, view_to_json(view), human)
    return EXIT_OK


def cmd_inspect(args, client: DomainClient) -> int:
    view = client.introspect(args.assembly_id)
    emit(args, view_to_json(view), render_view(view))
    return EXIT_OK


def cmd_nodes(args, client: DomainClient) -> int:
    info = client.domain_info()
    rows = [{"node_id": s["meta"].node_id, "address": s["address"], "reachable": s["reachable"],
             "instance_load": s["meta"].instance_load} for s in info]
    human = "\n".join(f"{r['node_id']:<10} {r['address']:<28} {'up' if r['reachable'] else 'UNREACHABLE':<12} "
                      f"load={r['instance_load']}" for r in rows) or "(no nodes)"
    emit(args, rows, human)
    return EXIT_OK


def cmd_meta(args, client: DomainClient) -> int:
    status = client.node_meta(args.node_id)
    if args.xml or args.output == "xml":
        print(meta_xml(status))
        return EXIT_OK
    value = {**status, "meta": to_jsonable(status["meta"])}
    m = status["meta"]
    human = "\n".join([
        f"node {m.node_id} ({'reachable' if status['reachable'] else 'unreachable'}) at {status['address']}",
        f"  os={m.os} arch={m.arch} cpus={m.cpu_count} mem={m.mem_bytes}",
        f"  properties: {', '.join(f'{k}={v}' for k, v in sorted(m.properties.items())) or '-'}",
        f"  archives: {', '.join(m.installed_archives) or '-'}",
        f"  instance load: {m.instance_load}",
    ])
    emit(args, value, human)
    return EXIT_OK


def cmd_names(args, client: DomainClient) -> int:
    paths = client.list_names(args.prefix)
    rows = [{"path": p, "ref": to_jsonable(client.resolve_name(p))} for p in paths]
    human = "\n".join(f"{r['path']} -> {r['ref']['kind']} {r['ref']['id']}@{r['ref']['node_id']}"
                      for r in rows) or "(no names)"
    emit(args, rows, human)
    return EXIT_OK


def cmd_homes(args, client: DomainClient) -> int:
    homes = client.list_homes()
    rows = [{"name": h["name"], "home_type": h["home_type"], "ref": to_jsonable(h["ref"])} for h in homes]
    human = "\n".join(f"{r['name']} [{r['home_type']}] -> {r['ref']['id']}@{r['ref']['node_id']}"
                      for r in rows) or "(no homes)"
    emit(args, rows, human)
    return EXIT_OK


def cmd_models(args, client: DomainClient) -> int:
    models = client.list_models()
    emit(args, models, "\n".join(models) or "(no models)")
    return EXIT_OK


def cmd_assemblies(args, client: DomainClient) -> int:
    rows = [{"assembly_id": a, "status": client.introspect(a).status.value} for a in client.list_assemblies()]
    emit(args, rows, "\n".join(f"{r['assembly_id']}: {r['status']}" for r in rows) or "(no assemblies)")
    return EXIT_OK


def cmd_protocol(args, config) -> int:
    print(protocol_markdown())
    return EXIT_OK


def protocol_markdown() -> str:
    """Operation tables generated from the live dispatchers."""
    import tempfile

    from dci.archive import ArchiveStore
    from dci.domain import DomainManager, build_dispatcher as domain_dispatcher
    from dci.node_agent import NodeAgent

    lines = []
    with tempfile.TemporaryDirectory() as tmp:
        agent = NodeAgent("doc", ArchiveStore(tmp))
        dm = DomainManager()
        try:
            for title, d in (("Node agent", agent.dispatcher), ("Domain", domain_dispatcher(dm))):
                lines += [f"### {title} operations", "", "| op | arguments | summary |", "|---|---|---|"]
                for op, params, doc in d.describe():
                    params = params.replace("|", "\\|")
                    lines.append(f"| `{op}` | `{params}` | {doc} |")
                lines.append("")
        finally:
            agent.close()
            dm.close()
    return "\n".join(lines)


CLIENT_COMMANDS = {
    "install-model": cmd_install_model,
    "deploy": cmd_deploy,
    "teardown": cmd_teardown,
    "inspect": cmd_inspect,
    "nodes": cmd_nodes,
    "meta": cmd_meta,
    "names": cmd_names,
    "homes": cmd_homes,
    "models": cmd_models,
    "assemblies": cmd_assemblies,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dci", description="Distributed component deployment infrastructure.")
    p.add_argument("--domain", help=f"domain address (default: ${ENV_DOMAIN}, then config file)")
    p.add_argument("--config", help=f"JSON config file (default: {DEFAULT_CONFIG})")
    p.add_argument("--output", choices=["human", "json", "xml"], default="human")
    p.add_argument("--timeout", type=float, default=None, help="request timeout in seconds")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    dom = sub.add_parser("domain", help="run the domain service")
    dom_sub = dom.add_subparsers(dest="action", required=True)
    ds = dom_sub.add_parser("serve")
    ds.add_argument("--listen", required=True)
    ds.add_argument("--state", help="state file for registries")
    ds.add_argument("--lease", type=float, default=5.0, help="lease interval in seconds")
    ds.add_argument("--grace", type=float, default=15.0, help="seconds before reconciling after restart")
    ds.set_defaults(func=cmd_domain_serve, client=False)

    ag = sub.add_parser("agent", help="run a node agent")
    ag_sub = ag.add_subparsers(dest="action", required=True)
    as_ = ag_sub.add_parser("serve")
    as_.add_argument("--node-id", required=True)
    as_.add_argument("--domain", dest="domain_sub")
    as_.add_argument("--listen", required=True)
    as_.add_argument("--store", required=True)
    as_.add_argument("--prop", action="append", default=[], metavar="K=V")
    as_.add_argument("--lease", type=float, default=5.0)
    as_.set_defaults(func=cmd_agent_serve, client=False)

    pk = sub.add_parser("pack", help="build an archive file")
    pk.add_argument("--manifest", required=True)
    pk.add_argument("--payload")
    pk.add_argument("-o", "--out", required=True)
    pk.set_defaults(func=cmd_pack, client=False)

    im = sub.add_parser("install-model", help="install an assembly package")
    im.add_argument("package")
    im.add_argument("--model-id")

    dp = sub.add_parser("deploy", help="create and deploy an assembly")
    dp.add_argument("model_id")
    dp.add_argument("--id", required=True)

    for name in ("teardown", "inspect"):
        sp = sub.add_parser(name)
        sp.add_argument("assembly_id")

    sub.add_parser("nodes", help="list nodes with reachability")
    mt = sub.add_parser("meta", help="meta-info of one node")
    mt.add_argument("node_id")
    mt.add_argument("--xml", action="store_true")
    nm = sub.add_parser("names", help="list name bindings")
    nm.add_argument("prefix", nargs="?", default="")
    sub.add_parser("homes", help="list published homes")
    sub.add_parser("models", help="list installed models")
    sub.add_parser("assemblies", help="list assemblies")
    pr = sub.add_parser("protocol", help="print the wire operation tables")
    pr.set_defaults(func=cmd_protocol, client=False)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config = load_config(args.config)
    if getattr(args, "domain_sub", None):
        args.domain = args.domain_sub
    if args.output == "xml" and args.command != "meta":
        print("xml output is only available for meta", file=sys.stderr)
        return EXIT_ERROR
    func = getattr(args, "func", None)
    try:
        if func is not None:
            return func(args, config)
        domain = resolve_domain(args.domain, config)
        if not domain:
            print(f"no domain address (use --domain or {ENV_DOMAIN})", file=sys.stderr)
            return EXIT_ERROR
        timeout = args.timeout or float(config.get("timeout", 120.0))
        with DomainClient(domain, timeout=timeout) as client:
            return CLIENT_COMMANDS[args.command](args, client)
    except ConnectionClosed as exc:
        print(f"{exc.code}: cannot reach domain: {exc.detail}", file=sys.stderr)
        return EXIT_ERROR
    except DciError as exc:
        print(str(exc), file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
