from __future__ import annotations

import json
import threading
import zipfile
from collections import Counter

import pytest
from harness import ClusterPool, run_case
from hypothesis import given, settings
from hypothesis import strategies as st

from dci.archive import encode_archive
from dci.assembly import (
    PHASES,
    TRANSITIONS,
    AssemblyRecord,
    AssemblyStatus,
    load_package,
    plan_placement,
    write_package,
)
from dci.errors import (
    InvalidState,
    NodeCallFailure,
    PlacementFailure,
    UnknownAssembly,
    UnknownModel,
    UnsatisfiablePlacement,
    ValidationFailure,
)
from dci.model import (
    AssemblyDescriptor,
    ConnectionSpec,
    InstanceSpec,
    NodeMetaInfo,
    PlacementSpec,
    RegistrationSpec,
    RegistrationTarget,
    Step,
    canonical_json,
)
from dci.reference_assets import MANIFESTS, reference_archives, reference_descriptor
from dci.reference_assets.cluster import LocalCluster
from dci.reference_assets.generator import node_set, random_case
from dci.reference_assets.oracle import observe, oracle_placement, trace_violations


def inst(iid, archive="echo", node=None, sg="g", cg="c", **constraints):
    return InstanceSpec(iid, archive, PlacementSpec(sg, cg, node, constraints))


def metas(spec: dict[str, dict[str, str]], loads: dict[str, int] | None = None):
    return [NodeMetaInfo(n, properties=p, instance_load=(loads or {}).get(n, 0)) for n, p in spec.items()]


# placement


def test_single_node_takes_everything():
    d = AssemblyDescriptor("d", tuple(inst(f"i{k}") for k in range(5)))
    assert set(plan_placement(d, metas({"only": {}})).values()) == {"only"}


def test_constraint_selects_matching_node():
    d = AssemblyDescriptor("d", (inst("x", zone="eu"),))
    assert plan_placement(d, metas({"n1": {"zone": "us"}, "n2": {"zone": "eu"}})) == {"x": "n2"}


def test_explicit_node_wins_over_load():
    d = AssemblyDescriptor("d", (inst("x", node="n2"),))
    assert plan_placement(d, metas({"n1": {}, "n2": {}}, {"n2": 50})) == {"x": "n2"}


def test_unsatisfiable_placement_names_every_bad_instance():
    d = AssemblyDescriptor("d", (inst("dead", node="n9"), inst("ok"), inst("nomatch", zone="mars"),
                                 inst("conflict", node="n1", zone="eu")))
    with pytest.raises(UnsatisfiablePlacement) as info:
        plan_placement(d, metas({"n1": {"zone": "us"}}))
    for name in ("dead", "nomatch", "conflict"):
        assert name in info.value.detail
    assert "ok:" not in info.value.detail


def test_ten_free_instances_over_three_nodes_balance():
    d = AssemblyDescriptor("d", tuple(inst(f"i{k}") for k in range(10)))
    nodes = metas(node_set(3))
    got = plan_placement(d, nodes)
    loads = Counter(got.values())
    assert max(loads.values()) - min(loads.values()) <= 1
    assert got == oracle_placement(d, nodes)


@st.composite
def placement_problems(draw):
    node_ids = draw(st.lists(st.sampled_from(["n1", "n2", "n3", "n4"]), min_size=1, max_size=4, unique=True))
    zones = ["us", "eu"]
    spec = {n: {"zone": draw(st.sampled_from(zones))} for n in node_ids}
    loads = {n: draw(st.integers(0, 5)) for n in node_ids}
    instances = []
    for k in range(draw(st.integers(0, 10))):
        choice = draw(st.integers(0, 3))
        if choice == 0:
            instances.append(inst(f"i{k}", node=draw(st.sampled_from(node_ids))))
        elif choice == 1:
            instances.append(inst(f"i{k}", zone=draw(st.sampled_from(zones))))
        else:
            instances.append(inst(f"i{k}"))
    return AssemblyDescriptor("p", tuple(instances)), metas(spec, loads)


@settings(max_examples=300, deadline=None)
@given(placement_problems())
def test_placement_matches_brute_force_replay(problem):
    desc, nodes = problem
    try:
        want = oracle_placement(desc, nodes)
    except UnsatisfiablePlacement:
        with pytest.raises(UnsatisfiablePlacement):
            plan_placement(desc, nodes)
        return
    assert plan_placement(desc, nodes) == want
    # pure: same answer again, inputs untouched
    assert plan_placement(desc, nodes) == want
    assert all(isinstance(m, NodeMetaInfo) for m in nodes)


# status machine


def test_transition_table():
    S = AssemblyStatus
    assert TRANSITIONS[S.CREATED] >= {S.DEPLOYING}
    assert TRANSITIONS[S.DEPLOYING] == {S.DEPLOYED, S.FAILED}
    assert S.TEARING_DOWN in TRANSITIONS[S.DEPLOYED] and S.DEGRADED in TRANSITIONS[S.DEPLOYED]
    assert TRANSITIONS[S.DEGRADED] == {S.TEARING_DOWN}
    assert TRANSITIONS[S.TEARING_DOWN] == {S.DESTROYED}
    assert TRANSITIONS[S.DESTROYED] == set()
    assert [p.value for p in PHASES] == [
        "install_archive", "create_server", "create_container", "install_home", "configure_home",
        "create_instance", "configure_instance", "connect", "configuration_complete", "register",
    ]


# deployment


def test_empty_descriptor_deploys_vacuously(cluster):
    c = cluster.client
    c.install_model("empty", AssemblyDescriptor("empty"), {})
    c.create_assembly("empty", "e1")
    trace = c.deploy("e1")
    assert [e.step for e in trace] == [Step.CREATE_ASSEMBLY]
    assert c.introspect("e1").status is AssemblyStatus.DEPLOYED


def _two_node_model():
    desc = AssemblyDescriptor(
        "pair",
        (inst("r", "relay", node="n1"), inst("e", "echo", node="n2")),
        (ConnectionSpec("r", "out", "e", "in"),),
        (RegistrationSpec(RegistrationTarget.INSTANCE, "e", "pair/echo"),),
    )
    archives = {k: v for k, v in reference_archives().items() if k in ("relay", "echo")}
    return desc, archives


def test_two_instances_two_nodes_step_counts(cluster):
    c = cluster.client
    desc, archives = _two_node_model()
    c.install_model("pair", desc, archives)
    c.create_assembly("pair", "p1")
    trace = c.deploy("p1")
    counts = Counter(e.step for e in trace)
    assert counts == {
        Step.CREATE_ASSEMBLY: 1, Step.INSTALL_ARCHIVE: 2, Step.CREATE_SERVER: 2, Step.CREATE_CONTAINER: 2,
        Step.INSTALL_HOME: 2, Step.CREATE_INSTANCE: 2, Step.CONNECT: 1, Step.CONFIGURATION_COMPLETE: 2,
        Step.REGISTER: 1,
    }
    assert trace_violations(trace) == []
    # a second model using the same archives finds them already installed
    c.install_model("pair2", AssemblyDescriptor("pair2", desc.instances, desc.connections), archives)
    c.create_assembly("pair2", "p2")
    again = c.deploy("p2")
    assert Counter(e.step for e in again)[Step.INSTALL_ARCHIVE] == 0


def test_reference_deploy_introspection(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    trace = c.deploy("a1")
    assert trace_violations(trace) == []
    view = c.introspect("a1")
    desc = reference_descriptor()
    assert set(view.placements) == {i.instance_id for i in desc.instances}
    assert set(view.connection_map) == set(desc.connections)
    assert view.placements["echo"].node_id == "n1"
    assert view.placements["counter"].node_id == "n3"
    # relays share a server and container, echo and counter do not share with them
    p = view.placements
    assert p["relay1"].container_id == p["relay2"].container_id or p["relay1"].node_id != p["relay2"].node_id
    with pytest.raises(InvalidState):
        c.deploy("a1")


def test_invalid_model_rejected(cluster):
    bad = AssemblyDescriptor("bad", (inst("x", "missing"),))
    with pytest.raises(ValidationFailure):
        cluster.client.install_model("bad", bad, reference_archives())
    assert cluster.client.list_models() == []


def test_unknown_ids(cluster):
    with pytest.raises(UnknownAssembly):
        cluster.client.introspect("ghost")
    with pytest.raises(UnknownModel):
        cluster.client.create_assembly("ghost", "a")


def test_placement_failure_leaves_nothing(cluster):
    c = cluster.client
    desc = AssemblyDescriptor("far", (inst("x", zone="mars"),))
    c.install_model("far", desc, reference_archives())
    c.create_assembly("far", "f1")
    before = cluster.snapshots()
    with pytest.raises(UnsatisfiablePlacement):
        c.deploy("f1")
    assert c.introspect("f1").status is AssemblyStatus.FAILED
    assert cluster.snapshots() == before


def test_missing_home_is_a_placement_failure(cluster):
    c = cluster.client
    desc = AssemblyDescriptor("b", (InstanceSpec("x", "echo", PlacementSpec("g", "c"), find_home="nobody/home"),))
    c.install_model("b", desc, reference_archives())
    c.create_assembly("b", "b1")
    with pytest.raises(PlacementFailure):
        c.deploy("b1")


# rollback


def _state(cluster):
    reg = cluster.client.registry_snapshot()
    return cluster.snapshots(), reg


@pytest.mark.parametrize("phase", PHASES)
def test_rollback_at_every_phase(ref_cluster, phase):
    c = ref_cluster.client
    snaps_before, reg_before = _state(ref_cluster)
    c.create_assembly("ref", "a1")
    c.inject_fault(phase)
    with pytest.raises(NodeCallFailure) as info:
        c.deploy("a1")
    assert info.value.step == phase.value
    view = c.introspect("a1")
    assert view.status is AssemblyStatus.FAILED
    snaps, reg = _state(ref_cluster)
    assert snaps == snaps_before
    assert reg == reg_before
    assert view.placements == {} and view.residue == ()
    if phase is not Step.INSTALL_ARCHIVE:
        assert any(e.step is Step.ROLLBACK_STEP for e in view.trace)
    # archives stay installed
    if phase is not Step.INSTALL_ARCHIVE:
        assert all(ref_cluster.stores()[n] for n in ("n1", "n2", "n3"))


def test_failure_at_first_step_rolls_back_nothing(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    c.inject_fault(Step.INSTALL_ARCHIVE)
    with pytest.raises(NodeCallFailure):
        c.deploy("a1")
    # other nodes may finish installing their archives; nothing is rolled back
    trace = c.introspect("a1").trace
    assert {e.step for e in trace} <= {Step.CREATE_ASSEMBLY, Step.INSTALL_ARCHIVE}


def test_node_side_failure_on_second_node(tmp_path):
    nodes = node_set(2)
    with LocalCluster(nodes, root=tmp_path) as cluster:
        c = cluster.client
        desc = AssemblyDescriptor("two", (inst("a", node="n1"), inst("b", node="n2")))
        c.install_model("two", desc, reference_archives())
        c.create_assembly("two", "t1")
        before = cluster.snapshots()
        cluster.agents["n2"].agent.inject_fault("node.create_container")
        with pytest.raises(NodeCallFailure) as info:
            c.deploy("t1")
        assert info.value.step == Step.CREATE_CONTAINER.value
        assert cluster.snapshots() == before
        removed = [e for e in c.introspect("t1").trace if e.step is Step.ROLLBACK_STEP]
        assert {(e.node_id, e.subject.kind.value) for e in removed if e.subject} >= {("n1", "server"), ("n2", "server")}
        assert all(cluster.stores()[n] for n in nodes)


def test_failed_assembly_teardown_is_idempotent_completion(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    c.inject_fault(Step.REGISTER)
    with pytest.raises(NodeCallFailure):
        c.deploy("a1")
    c.teardown("a1")
    assert c.introspect("a1").status is AssemblyStatus.DESTROYED
    with pytest.raises(InvalidState):
        c.teardown("a1")


def test_replay_after_failure_equals_fresh_deploy(ref_cluster, tmp_path):
    c = ref_cluster.client
    desc = reference_descriptor()
    c.create_assembly("ref", "a1")
    c.inject_fault(Step.CONNECT)
    with pytest.raises(NodeCallFailure):
        c.deploy("a1")
    failed_ids = {e.subject.id for e in c.introspect("a1").trace if e.step is Step.CREATE_INSTANCE}
    assert failed_ids
    c.destroy_assembly("a1")
    c.create_assembly("ref", "a1")
    c.deploy("a1")
    replay = c.introspect("a1")
    replay_ids = {p.instance.id for p in replay.placements.values()}
    assert not replay_ids & failed_ids

    props = {n: a.agent.properties for n, a in ref_cluster.agents.items()}
    with LocalCluster(props, root=tmp_path / "fresh") as fresh:
        fresh.client.install_model("ref", desc, reference_archives())
        fresh.client.create_assembly("ref", "a1")
        fresh.client.deploy("a1")
        clean = fresh.client.introspect("a1")
        assert observe(desc, replay.placements, ref_cluster.snapshots(), c.registry_snapshot()) == \
            observe(desc, clean.placements, fresh.snapshots(), fresh.client.registry_snapshot())


# teardown and sharing


def test_teardown_restores_prior_state(ref_cluster):
    c = ref_cluster.client
    snaps_before, reg_before = _state(ref_cluster)
    stores_before = ref_cluster.stores()
    c.create_assembly("ref", "a1")
    c.deploy("a1")
    trace = c.teardown("a1")
    assert trace and all(e.step is Step.TEARDOWN_STEP for e in trace)
    snaps, reg = _state(ref_cluster)
    assert snaps == snaps_before and reg == reg_before
    # archives remain installed
    assert all(set(ref_cluster.stores()[n]) >= set(stores_before[n]) for n in stores_before)
    assert any(ref_cluster.stores()[n] for n in stores_before)


def _shared_model():
    return AssemblyDescriptor("s", (inst("x", node="n1", sg="shared", cg="c1"),))


def test_server_shared_between_assemblies_is_refcounted(cluster):
    c = cluster.client
    c.install_model("s", _shared_model(), reference_archives())
    c.create_assembly("s", "A")
    c.create_assembly("s", "B")
    c.deploy("A")
    c.deploy("B")
    snap = cluster.snapshots()["n1"]
    assert len(snap["servers"]) == 1 and len(snap["servers"][0]["containers"]) == 1
    server_id = snap["servers"][0]["id"]
    assert c.registry_snapshot()["entities"][server_id] == ["A", "B"]
    c.teardown("A")
    snap = cluster.snapshots()["n1"]
    assert [s["id"] for s in snap["servers"]] == [server_id]
    assert c.registry_snapshot()["entities"][server_id] == ["B"]
    c.teardown("B")
    assert cluster.snapshots()["n1"]["servers"] == []
    assert c.registry_snapshot()["entities"] == {}


def test_refcounts_equal_live_assembly_references(cluster):
    c = cluster.client
    c.install_model("s", _shared_model(), reference_archives())
    live = []
    for k, action in enumerate(["d", "d", "d", "t", "d", "t", "t"]):
        if action == "d":
            c.create_assembly("s", f"a{k}")
            c.deploy(f"a{k}")
            live.append(f"a{k}")
        else:
            c.teardown(live.pop(0))
        ents = c.registry_snapshot()["entities"]
        servers = [s["id"] for s in cluster.snapshots()["n1"]["servers"]]
        if live:
            assert ents[servers[0]] == sorted(live)
        else:
            assert servers == [] and ents == {}


def test_cross_assembly_home_reuse(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "A")
    c.deploy("A")
    home_name = "A/echo/home"
    assert home_name in c.registry_snapshot()["homes"]
    desc_b = AssemblyDescriptor(
        "b", (InstanceSpec("guest", "echo", PlacementSpec("g", "c"), find_home=home_name),))
    c.install_model("b", desc_b, reference_archives())
    c.create_assembly("b", "B")
    trace_b = c.deploy("B")
    assert {e.step for e in trace_b} == {Step.CREATE_ASSEMBLY, Step.CREATE_INSTANCE, Step.CONFIGURATION_COMPLETE}
    a, b = c.introspect("A").placements["echo"], c.introspect("B").placements["guest"]
    assert (b.node_id, b.container_id, b.home) == (a.node_id, a.container_id, a.home)
    c.destroy_assembly("B")
    assert c.introspect("A").status is AssemblyStatus.DEPLOYED
    snap = ref_cluster.snapshots()[a.node_id]
    homes = [h for s in snap["servers"] for ct in s["containers"] for h in ct["homes"] if h["id"] == a.home.id]
    assert [i["id"] for i in homes[0]["instances"]] == [a.instance.id]
    c.destroy_assembly("A")
    assert all(not s["servers"] for s in ref_cluster.snapshots().values())


def test_found_home_outlives_its_registering_assembly(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "A")
    c.deploy("A")
    desc_b = AssemblyDescriptor(
        "b", (InstanceSpec("guest", "echo", PlacementSpec("g", "c"), find_home="A/echo/home"),))
    c.install_model("b", desc_b, reference_archives())
    c.create_assembly("b", "B")
    c.deploy("B")
    home = c.introspect("B").placements["guest"].home
    c.destroy_assembly("A")
    # B still holds the home, its container and its server
    snap = ref_cluster.snapshots()[home.node_id]
    assert [h["id"] for s in snap["servers"] for ct in s["containers"] for h in ct["homes"]] == [home.id]
    c.destroy_assembly("B")
    assert all(not s["servers"] for s in ref_cluster.snapshots().values())


def test_destroyed_assembly_leaves_a_tombstone(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    c.deploy("a1")
    c.destroy_assembly("a1")
    tomb = c.introspect("a1")
    assert tomb.status is AssemblyStatus.DESTROYED and tomb.placements == {}
    steps = [e.step for e in tomb.trace]
    assert steps[0] is Step.CREATE_ASSEMBLY and Step.TEARDOWN_STEP in steps
    assert c.list_assemblies() == []


def test_destroy_before_deploy(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    assert c.destroy_assembly("a1").status is AssemblyStatus.DESTROYED
    with pytest.raises(InvalidState):
        c.deploy("a1")


def test_degraded_teardown_skips_unreachable_nodes(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    c.deploy("a1")
    ref_cluster.stop_agent("n3", graceful=True)
    assert c.introspect("a1").status is AssemblyStatus.DEGRADED
    c.teardown("a1")
    tomb = c.introspect("a1")
    assert tomb.status is AssemblyStatus.DESTROYED
    assert tomb.residue and all("n3" in r or "unreachable" in r for r in tomb.residue)
    assert all(not s["servers"] for s in ref_cluster.snapshots().values())


def test_concurrent_deployments(ref_cluster):
    c = ref_cluster.client
    ref = reference_descriptor()
    # fixed binding names would collide between copies, so this model registers nothing
    c.install_model("plain", AssemblyDescriptor("plain", ref.instances, ref.connections), reference_archives())
    ids = [f"c{k}" for k in range(5)]
    for a in ids:
        c.create_assembly("plain", a)
    errors = []

    def go(a):
        try:
            c.deploy(a)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=go, args=(a,)) for a in ids]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    for a in ids:
        view = c.introspect(a)
        assert view.status is AssemblyStatus.DEPLOYED and trace_violations(view.trace) == []
    instances = [p.instance.id for a in ids for p in c.introspect(a).placements.values()]
    assert len(instances) == len(set(instances)) == 5 * 4
    for a in ids:
        c.destroy_assembly(a)
    assert all(not s["servers"] for s in ref_cluster.snapshots().values())


@pytest.mark.parametrize("seed", range(15))
def test_random_descriptor_round_trip(seed, tmp_path):
    pool = ClusterPool(root=tmp_path)
    try:
        nodes, desc = random_case(seed)
        r = run_case(pool.get(nodes), desc, f"r{seed}")
        assert r.violations == [] and r.oracle_diff == {}
        assert r.restored and r.registries_empty
    finally:
        pool.close()


# records and packages


def test_record_json_round_trip(ref_cluster):
    c = ref_cluster.client
    c.create_assembly("ref", "a1")
    c.deploy("a1")
    rec = ref_cluster.manager.machine.record("a1")
    again = AssemblyRecord.from_json(json.loads(canonical_json(rec.to_json())))
    assert again.view() == rec.view()


def test_package_directory_and_zip(tmp_path):
    desc = reference_descriptor()
    write_package(tmp_path / "pkg", desc, reference_archives())
    d2, archives = load_package(tmp_path / "pkg")
    assert d2 == desc and archives == reference_archives()
    with zipfile.ZipFile(tmp_path / "pkg.zip", "w") as z:
        z.writestr("descriptor.json", canonical_json(desc))
        for ref, a in reference_archives().items():
            z.writestr(f"{ref}.ccar", encode_archive(a))
    d3, archives3 = load_package(tmp_path / "pkg.zip")
    assert d3 == desc and archives3 == archives


def test_package_missing_archive_fails_install(cluster, tmp_path):
    write_package(tmp_path / "pkg", reference_descriptor(), reference_archives())
    (tmp_path / "pkg" / "relay.ccar").unlink()
    desc, archives = load_package(tmp_path / "pkg")
    assert sorted(archives) == ["counter", "echo"]
    with pytest.raises(ValidationFailure):
        cluster.client.install_model("p", desc, archives)


def test_manifests_fixture_matches_reference_archives():
    assert {r: a.manifest for r, a in reference_archives().items()} == MANIFESTS
