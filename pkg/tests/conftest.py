from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dci.archive import ArchiveStore  # noqa: E402
from dci.node_agent import NodeAgent  # noqa: E402
from dci.reference_assets import reference_archives, reference_descriptor, reference_nodes  # noqa: E402
from dci.reference_assets.cluster import LocalCluster  # noqa: E402


@pytest.fixture
def store(tmp_path):
    return ArchiveStore(tmp_path / "store")


@pytest.fixture
def agent(tmp_path):
    a = NodeAgent("n1", ArchiveStore(tmp_path / "n1"), {"zone": "us"})
    for ref, archive in reference_archives().items():
        a.store.install(ref, archive)
    yield a
    a.close()


@pytest.fixture
def cluster(tmp_path):
    with LocalCluster(reference_nodes(), root=tmp_path) as c:
        yield c


@pytest.fixture
def ref_cluster(cluster):
    """Cluster with the reference model installed as ``ref``."""
    cluster.client.install_model("ref", reference_descriptor(), reference_archives())
    return cluster
