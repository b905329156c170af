"""Builds the golden fixture files; ``python -m dci.reference_assets.golden DIR`` rewrites them.

Traces are stored normalized: entity ids and cookies depend on scheduling,
so each event becomes ``[step, node_id, what]`` where ``what`` is the
connection for connect events and the event detail otherwise. Events are
sorted within each run of equal steps, which is where concurrent nodes may
interleave.
"""

from __future__ import annotations

import itertools
import json
import sys
from pathlib import Path

from dci.archive import encode_archive
from dci.model import DeploymentTrace, Step, canonical_json
from dci.reference_assets import MANIFESTS, reference_archives, reference_descriptor, reference_nodes
from dci.transport import Message, MessageKind, frame_encode

_UNORDERED_DETAIL = {Step.CONNECT}


def normalize_trace(trace: DeploymentTrace) -> list[list[str]]:
    rows = []
    for e in trace:
        what = str(e.connection) if e.step in _UNORDERED_DETAIL and e.connection else e.detail
        rows.append([e.step.value, e.node_id, what])
    out = []
    for _, group in itertools.groupby(rows, key=lambda r: r[0]):
        out.extend(sorted(group))
    return out


def golden_messages() -> list[Message]:
    return [
        Message("c-1", MessageKind.REQUEST, "node.create_server", args={"server_id": "srv-1"}),
        Message("c-1", MessageKind.REPLY, "node.create_server", ok=True,
                value={"id": "srv-1", "kind": "server", "node_id": "n1"}),
        Message("c-2", MessageKind.REQUEST, "domain.resolve_name", args={"path": "a/b"}),
        Message("c-2", MessageKind.REPLY, "domain.resolve_name", ok=False, error=("NotBound", "a/b")),
        Message("c-3", MessageKind.EVENT, "node.deliver_event",
                args={"instance": "inst-1", "port": "events", "payload": "dGljaw==", "source": None}),
        Message("c-4", MessageKind.REQUEST, "node.set_home_attr",
                args={"home": "home-1", "name": "greeting", "value": {"type": "string", "value": "été"}}),
        Message("c-4", MessageKind.REPLY, "node.set_home_attr", ok=True, value=None),
    ]


def reference_trace() -> list[list[str]]:
    from dci.reference_assets.cluster import LocalCluster

    with LocalCluster(reference_nodes()) as cluster:
        cluster.client.install_model("reference", reference_descriptor(), reference_archives())
        cluster.client.create_assembly("reference", "ref-1")
        return normalize_trace(cluster.client.deploy("ref-1"))


def build(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for ref, m in MANIFESTS.items():
        (out / f"{ref}.manifest.json").write_bytes(canonical_json(m))
    for ref, a in reference_archives().items():
        (out / f"{ref}.ccar").write_bytes(encode_archive(a))
        (out / f"{ref}.checksum").write_text(a.checksum + "\n")
    (out / "descriptor.json").write_bytes(canonical_json(reference_descriptor()))
    (out / "nodes.json").write_bytes(canonical_json(reference_nodes()))
    messages = golden_messages()
    (out / "frames.bin").write_bytes(b"".join(frame_encode(m) for m in messages))
    (out / "frames.json").write_bytes(canonical_json([m.to_json() for m in messages]))
    (out / "reference_trace.json").write_bytes(canonical_json(reference_trace()))


def main(argv: list[str]) -> int:
    target = Path(argv[0]) if argv else Path(__file__).parent / "fixtures"
    build(target)
    print(json.dumps(sorted(p.name for p in target.iterdir())))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))


__all__ = ["build", "golden_messages", "normalize_trace", "reference_trace"]
