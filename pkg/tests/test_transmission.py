import dataclasses
import time

import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_random_tree, tree_path_length, wait_until

from protonet import (
    Action,
    Layer,
    NodeRole,
    NodeState,
    Runtime,
    RouteStatus,
    TransmissionNode,
    new_message,
)
from protonet.errors import (
    ConfigTimeout,
    DeliveryError,
    NoSuchChild,
    NotMaster,
    SweepTimeout,
    UnreachableNode,
)


def spawn_binary_tree(rt, depth=3):
    """Complete binary tree with `depth` levels; 7 nodes for depth 3."""
    master = TransmissionNode.spawn(rt, NodeRole.MASTER, address="b0")
    nodes = {"b0": master}
    parent_of = {}
    level = ["b0"]
    count = 1
    for _ in range(depth - 1):
        next_level = []
        for parent in level:
            for _ in range(2):
                addr = f"b{count}"
                count += 1
                node = TransmissionNode.spawn(rt, NodeRole.SERVER, nodes[parent].endpoint, address=addr)
                nodes[addr] = node
                parent_of[addr] = parent
                next_level.append(addr)
        level = next_level
    return master, nodes, parent_of


# ------------------------------------------------------------------- spawning


def test_spawn_master_is_configured_immediately(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER)
    assert master.state is NodeState.CONFIGURED
    assert master.routing.parent is None


def test_spawn_child_lands_in_parent_children(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    child = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="c")
    assert child.state is NodeState.CONFIGURED
    assert master.routing.child_addresses() == ["c"]


def test_spawn_parent_role_contract(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER)
    with pytest.raises(ValueError):
        TransmissionNode.spawn(runtime, NodeRole.SERVER)  # no parent
    with pytest.raises(ValueError):
        TransmissionNode.spawn(runtime, NodeRole.MASTER, master.endpoint)


def test_spawn_1000_node_tree_each_address_has_one_parent():
    with Runtime() as rt:
        nodes, parent_of = build_random_tree(rt, 1000, seed=101)
        children_seen: dict[str, str] = {}
        for node in nodes:
            for child in node.routing.child_addresses():
                assert child not in children_seen, "address claimed by two parents"
                children_seen[child] = node.address
        assert children_seen == parent_of


def test_spawn_handshake_timeout(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    master.debug_pause_actor()  # CONFIG is delivered but never acknowledged
    with pytest.raises(ConfigTimeout):
        TransmissionNode.spawn(
            runtime, NodeRole.SERVER, master.endpoint, address="c", config_timeout=0.2
        )
    master.debug_resume_actor()


def test_duplicate_address_rejected(runtime):
    TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    from protonet.errors import AddressInUse

    with pytest.raises(AddressInUse):
        TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")


# ------------------------------------------------------------------- sweeping


def test_start_connect_single_master(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER)
    report = master.start_connect()
    assert report.nodes == 1
    assert master.state is NodeState.CONNECTED


def test_start_connect_counts_binary_tree(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    report = master.start_connect()
    assert report.nodes == 7
    assert all(n.state is NodeState.CONNECTED for n in nodes.values())


def test_internal_nodes_echo_only_after_both_children(runtime):
    master, nodes, parent_of = spawn_binary_tree(runtime)
    master.start_connect()
    echo_at = {
        e.node: e.t_ns for e in runtime.trace.events("echo-sent") if e.data["sweep"] == 1
    }
    for child, parent in parent_of.items():
        if parent == master.address:
            continue
        assert echo_at[parent] > echo_at[child]


def test_each_node_echoes_exactly_once_per_sweep(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    master.start_connect()
    master.start_connect()  # reconnect sweep gets a fresh id
    for sweep_id in (1, 2):
        for addr in nodes:
            if addr == master.address:
                continue
            sent = [
                e
                for e in runtime.trace.events("echo-sent", node=addr)
                if e.data["sweep"] == sweep_id
            ]
            assert len(sent) == 1, (addr, sweep_id)


def test_duplicate_hello_is_echoed_again_not_reforwarded(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    master.start_connect()
    mid = nodes["b1"]  # internal node with two children
    hello = new_message(
        Layer.TRANSMISSION, Action.HELLO, "b1", master.address, ("sweep", "1")
    )
    before_forwards = len(
        [e for e in runtime.trace.events("hello", node="b3") if e.data["sweep"] == 1]
    )
    mid.endpoint.enqueue(hello)
    assert wait_until(
        lambda: len(
            [e for e in runtime.trace.events("echo-sent", node="b1") if e.data["sweep"] == 1]
        )
        == 2
    )
    after_forwards = len(
        [e for e in runtime.trace.events("hello", node="b3") if e.data["sweep"] == 1]
    )
    assert after_forwards == before_forwards


def test_sweep_timeout_names_subtree_and_restart_recovers(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    victim = nodes["b1"]
    victim.debug_pause_router()
    with pytest.raises(SweepTimeout) as err:
        master.start_connect(timeout=0.3)
    assert err.value.unresponsive == ["b1"]
    victim.debug_resume_router()
    report = master.start_connect()
    assert report.nodes == 7


def test_start_connect_requires_master(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    child = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="c")
    with pytest.raises(NotMaster):
        child.start_connect()


# -------------------------------------------------------------------- routing


def test_route_self_delivery_keeps_ttl(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    msg = new_message(Layer.TRANSMISSION, Action.TICK, "m", "m")
    result = master.route(msg)
    assert result.status is RouteStatus.DELIVERED
    delivered = master.delivered.pop(timeout=1.0)
    assert delivered is not None and delivered.time_to_live == 64 and delivered.route == ()


def test_route_chain_two_hops(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    a = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="a")
    b = TransmissionNode.spawn(runtime, NodeRole.SERVER, a.endpoint, address="b")
    master.start_connect()
    probe = new_message(Layer.TRANSMISSION, Action.TICK, "m", "b")
    result = b.route(probe)
    assert result.status is RouteStatus.FORWARDED and result.next_hop == "a"
    assert wait_until(
        lambda: any(
            e.data["corr"] == probe.correlation_id
            for e in runtime.trace.events("deliver", node="m")
        )
    )
    deliver = [
        e
        for e in runtime.trace.events("deliver", node="m")
        if e.data["corr"] == probe.correlation_id
    ][0]
    assert deliver.data["hops"] == 2


def test_route_ttl_expiry_drops_at_intermediate(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    a = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="a")
    b = TransmissionNode.spawn(runtime, NodeRole.SERVER, a.endpoint, address="b")
    master.start_connect()
    probe = dataclasses.replace(
        new_message(Layer.TRANSMISSION, Action.TICK, "m", "b"), time_to_live=1
    )
    b.route(probe)
    assert wait_until(lambda: a.drop_counts["expired"] == 1)
    assert master.drop_counts["expired"] == 0


def test_route_unknown_destination_drops_at_master(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    probe = new_message(Layer.TRANSMISSION, Action.TICK, "ghost", "m")
    result = master.route(probe)
    assert result.status is RouteStatus.DROPPED
    assert result.reason == "unknown-destination"


def test_route_dead_next_hop_counted(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    child = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="c")
    master.start_connect()
    child.force_terminate()
    probe = new_message(Layer.TRANSMISSION, Action.TICK, "c", "m")
    result = master.route(probe)
    assert result.status is RouteStatus.DROPPED and result.reason == "dead-next-hop"


def test_route_rejects_invalid_action_layer_on_receipt(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    bogus = dataclasses.replace(
        new_message(Layer.TRANSMISSION, Action.TICK, "m", "m"), action=Action.REQ
    )
    result = master.route(bogus)
    assert result.status is RouteStatus.DROPPED and result.reason == "invalid-message"


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000), data=st.data())
def test_delivery_hops_match_bruteforce_path(seed, data):
    with Runtime() as rt:
        n = data.draw(st.integers(min_value=2, max_value=25))
        nodes, parent_of = build_random_tree(rt, n, seed=seed)
        nodes[0].start_connect()
        pairs = data.draw(
            st.lists(
                st.tuples(
                    st.integers(min_value=0, max_value=n - 1),
                    st.integers(min_value=0, max_value=n - 1),
                ),
                min_size=1,
                max_size=8,
            )
        )
        expected = {}
        for si, di in pairs:
            src, dst = nodes[si], nodes[di]
            probe = new_message(Layer.TRANSMISSION, Action.TICK, dst.address, src.address)
            expected[probe.correlation_id] = (
                dst.address,
                tree_path_length(parent_of, src.address, dst.address),
            )
            src.route(probe)
        assert wait_until(
            lambda: sum(
                1 for e in rt.trace.events("deliver") if e.data["corr"] in expected
            )
            == len(expected)
        )
        for ev in rt.trace.events("deliver"):
            if ev.data["corr"] in expected:
                dst_addr, hops = expected[ev.data["corr"]]
                assert ev.node == dst_addr
                assert ev.data["hops"] == hops


# ----------------------------------------------------------------------- tick


def test_tick_self(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    master.start_connect()
    report = master.tick("m")
    assert report.state == "CONNECTED"
    assert report.round_trip_hops == 0


def test_tick_leaf_round_trip_is_twice_depth(runtime):
    master, nodes, parent_of = spawn_binary_tree(runtime)
    master.start_connect()
    report = master.tick("b6")  # depth-2 leaf
    assert report.round_trip_hops == 2 * tree_path_length(parent_of, master.address, "b6") == 4


def test_tick_terminated_node_unreachable(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    child = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="c")
    master.start_connect()
    child.force_terminate()
    with pytest.raises(UnreachableNode):
        master.tick("c", timeout=0.3)


# ------------------------------------------------------------------- shutdown


def test_shutdown_single_node(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    master.start_connect()
    report = master.shutdown()
    assert report.clean and report.forced == []
    assert master.state is NodeState.TERMINATED


def test_shutdown_child_terminates_before_parent(runtime):
    master, nodes, parent_of = spawn_binary_tree(runtime)
    master.start_connect()
    report = master.shutdown()
    assert report.clean
    terminated = {e.node: e.t_ns for e in runtime.trace.events("terminated")}
    assert set(terminated) == set(nodes)
    for child, parent in parent_of.items():
        assert terminated[child] <= terminated[parent]


def test_send_after_shutdown_is_delivery_error(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    child = TransmissionNode.spawn(runtime, NodeRole.SERVER, master.endpoint, address="c")
    master.start_connect()
    master.shutdown()
    for node in (master, child):
        with pytest.raises(DeliveryError):
            node.endpoint.enqueue(new_message(Layer.TRANSMISSION, Action.TICK, node.address, "x"))


def test_shutdown_timeout_forces_stragglers(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    master.start_connect()
    nodes["b1"].debug_pause_actor()  # EXIT never processed in that subtree
    report = master.shutdown(timeout=0.4)
    assert not report.clean
    assert "b1" in report.forced
    assert all(n.state is NodeState.TERMINATED for n in nodes.values())


def test_no_outlet_calls_after_termination(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    master.start_connect()
    master.shutdown()
    terminated = {e.node: e.t_ns for e in runtime.trace.events("terminated")}
    for ev in runtime.trace.events("outlet"):
        assert ev.t_ns <= terminated[ev.node]


# -------------------------------------------------------------- detach/attach


def test_detach_unknown_child(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    master.start_connect()
    with pytest.raises(NoSuchChild):
        master.detach_subtree("ghost")


def test_detach_makes_subtree_unreachable(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    master.start_connect()
    removed = master.detach_subtree("b1")
    assert set(removed) == {"b1", "b3", "b4"}
    with pytest.raises(UnreachableNode):
        master.tick("b3", timeout=0.3)
    # the rest of the tree still answers
    assert master.tick("b2").state == "CONNECTED"


def test_detach_then_attach_restores_routing(runtime):
    master, nodes, _ = spawn_binary_tree(runtime)
    master.start_connect()
    master.detach_subtree("b1")
    nodes["b2"].attach_subtree(nodes["b1"])
    # the whole moved subtree is reachable again, along the new path
    report = master.tick("b4")
    assert report.round_trip_hops == 6  # m -> b2 -> b1 -> b4 and back


# --------------------------------------------------------------------- outlet


def test_outlet_unhandled_layer_dropped(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    msg = new_message(Layer.SERVICE, Action.REQ, "m", "m", ["S"])
    master.route(msg)
    assert wait_until(lambda: master.drop_counts["unhandled-layer"] == 1)


def test_outlet_invoked_once_per_message(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    calls = []
    master.set_outlet(calls.append)
    msg = new_message(Layer.SERVICE, Action.REQ, "m", "m", ["S"])
    master.route(msg)
    assert wait_until(lambda: len(calls) == 1)
    time.sleep(0.05)
    assert len(calls) == 1
    assert calls[0].correlation_id == msg.correlation_id


def test_transmission_messages_never_reach_outlet(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    calls = []
    master.set_outlet(calls.append)
    master.start_connect()
    master.tick("m")
    time.sleep(0.05)
    assert calls == []


def test_outlet_sees_messages_in_arrival_order(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    calls = []
    master.set_outlet(lambda msg: calls.append(msg.params[0]))
    master.debug_pause_actor()
    late = dataclasses.replace(
        new_message(Layer.SERVICE, Action.REQ, "m", "m", ["late"]), create_time=2_000
    )
    early = dataclasses.replace(
        new_message(Layer.SERVICE, Action.REQ, "m", "m", ["early"]), create_time=1_000
    )
    master.route(late)
    master.route(early)
    assert wait_until(lambda: len(master.delivered) == 2)
    master.debug_resume_actor()
    assert wait_until(lambda: len(calls) == 2)
    assert calls == ["early", "late"]


def test_actor_liveness_all_delivered_messages_processed(runtime):
    master = TransmissionNode.spawn(runtime, NodeRole.MASTER, address="m")
    calls = []
    master.set_outlet(lambda msg: calls.append(msg.correlation_id))
    for _ in range(200):
        master.route(new_message(Layer.SERVICE, Action.REQ, "m", "m", ["S"]))
    assert wait_until(lambda: len(calls) == 200)
