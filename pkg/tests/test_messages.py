import dataclasses
import threading

import pytest
from hypothesis import given, settings, strategies as st

from protonet import (
    Action,
    DEFAULT_TTL,
    Layer,
    Message,
    arrival_key,
    arrival_order,
    hop,
    new_message,
    render_message,
)
from protonet.errors import ActionLayerMismatch, MessageExpired
from protonet.messages import ArrivalQueue, make_reply


def test_layer_has_exactly_three_values():
    assert {layer.value for layer in Layer} == {"TRANSMISSION", "SERVICE", "DOMAIN"}


def test_new_message_defaults():
    msg = new_message(Layer.TRANSMISSION, Action.HELLO, "child", "root")
    assert msg.time_to_live == DEFAULT_TTL == 64
    assert msg.route == ()
    assert msg.need_echo is False
    assert msg.params == ()


def test_req_carries_service_name_first():
    msg = new_message(Layer.SERVICE, Action.REQ, "master", "requester", ["Service1", "3.14"])
    assert msg.params[0] == "Service1"
    assert msg.params == ("Service1", "3.14")


@pytest.mark.parametrize(
    "layer,action",
    [
        (Layer.TRANSMISSION, Action.REG),
        (Layer.TRANSMISSION, Action.REQ),
        (Layer.TRANSMISSION, Action.ACK),
        (Layer.SERVICE, Action.HELLO),
        (Layer.SERVICE, Action.CONFIG),
        (Layer.DOMAIN, Action.REQ),
        (Layer.DOMAIN, Action.TICK),
    ],
)
def test_action_layer_mismatch_rejected(layer, action):
    with pytest.raises(ActionLayerMismatch):
        new_message(layer, action, "a", "b")


def test_message_is_immutable():
    msg = new_message(Layer.TRANSMISSION, Action.TICK, "a", "b")
    with pytest.raises(dataclasses.FrozenInstanceError):
        msg.intend = "c"


def test_hop_decrements_and_records():
    msg = new_message(Layer.TRANSMISSION, Action.HELLO, "x", "y")
    hopped = hop(msg, "A")
    assert hopped.time_to_live == 63
    assert hopped.route == ("A",)
    assert msg.route == ()  # original untouched


def test_hop_boundary_then_expiry():
    msg = dataclasses.replace(
        new_message(Layer.TRANSMISSION, Action.HELLO, "x", "y"), time_to_live=1, route=("A",)
    )
    last = hop(msg, "B")
    assert last.time_to_live == 0
    assert last.route == ("A", "B")
    with pytest.raises(MessageExpired):
        hop(last, "C")


def test_hop_expired_message_rejected():
    msg = dataclasses.replace(
        new_message(Layer.TRANSMISSION, Action.HELLO, "x", "y"), time_to_live=0
    )
    with pytest.raises(MessageExpired):
        hop(msg, "C")


def test_route_length_tracks_ttl_spend():
    msg = new_message(Layer.TRANSMISSION, Action.TICK, "x", "y")
    for i, via in enumerate(["a", "b", "c", "d"], start=1):
        msg = hop(msg, via)
        assert len(msg.route) == DEFAULT_TTL - msg.time_to_live == i


def _msg(create_time: int, creator: str, corr: int) -> Message:
    return Message(
        layer=Layer.TRANSMISSION,
        action=Action.TICK,
        intend="x",
        creator=creator,
        create_time=create_time,
        correlation_id=corr,
    )


def test_arrival_order_primary_key_create_time():
    assert arrival_order(_msg(1, "b", 9), _msg(2, "a", 1)) == -1


def test_arrival_order_tie_breaks_on_creator():
    assert arrival_order(_msg(5, "a", 9), _msg(5, "b", 1)) == -1


def test_arrival_order_tie_breaks_on_correlation():
    assert arrival_order(_msg(5, "a", 1), _msg(5, "a", 2)) == -1


def test_arrival_order_matches_reference_sort():
    import random

    rng = random.Random(42)
    msgs = [
        _msg(rng.randrange(10), rng.choice("abc"), corr) for corr in rng.sample(range(1000), 200)
    ]
    # independent oracle: insertion sort on the explicitly-built composite key
    reference = []
    for m in msgs:
        key = (m.create_time, m.creator, m.correlation_id)
        at = 0
        while at < len(reference) and (
            (reference[at].create_time, reference[at].creator, reference[at].correlation_id)
            <= key
        ):
            at += 1
        reference.insert(at, m)
    assert sorted(msgs, key=arrival_key) == reference


_msg_strategy = st.builds(
    _msg,
    create_time=st.integers(min_value=0, max_value=50),
    creator=st.sampled_from(["a", "b", "c", "d"]),
    corr=st.integers(min_value=0, max_value=30),
)


@settings(max_examples=200, deadline=None)
@given(a=_msg_strategy, b=_msg_strategy, c=_msg_strategy)
def test_arrival_order_is_total(a, b, c):
    # antisymmetric
    assert arrival_order(a, b) == -arrival_order(b, a)
    # zero only on identical keys
    if arrival_order(a, b) == 0:
        assert arrival_key(a) == arrival_key(b)
    # transitive
    if arrival_order(a, b) <= 0 and arrival_order(b, c) <= 0:
        assert arrival_order(a, c) <= 0


def test_correlation_ids_unique_across_threads():
    seen: list[int] = []
    lock = threading.Lock()

    def spawn_many(count):
        local = [
            new_message(Layer.SERVICE, Action.REQ, "m", "r", ["S"]).correlation_id
            for _ in range(count)
        ]
        with lock:
            seen.extend(local)

    threads = [threading.Thread(target=spawn_many, args=(1250,)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(seen) == 10_000
    assert len(set(seen)) == 10_000


def test_make_reply_echoes_correlation_verbatim():
    req = new_message(Layer.SERVICE, Action.REQ, "p", "caller", ["S"], need_echo=True)
    ack = make_reply(req, Action.ACK, ("ok", "1"), creator="p")
    assert ack.correlation_id == req.correlation_id
    assert ack.intend == "caller"
    assert ack.route == ()


def test_render_message_stable_field_order():
    msg = new_message(Layer.SERVICE, Action.REQ, "prov", "caller", ["Service1"])
    msg = hop(msg, "caller")
    line = render_message(msg)
    assert line.startswith("SERVICE/REQ ")
    fields = ["intend=", "creator=", "ttl=", "route=", "params="]
    positions = [line.index(f) for f in fields]
    assert positions == sorted(positions)
    assert "intend=prov" in line and "ttl=63" in line and "route=[caller]" in line
    assert str(msg) == line


class TestArrivalQueue:
    def test_orders_by_arrival_key(self):
        q = ArrivalQueue()
        early, late = _msg(1, "a", 1), _msg(2, "a", 2)
        q.push(late)
        q.push(early)
        assert q.pop() is early
        assert q.pop() is late

    def test_fifo_within_equal_keys(self):
        q = ArrivalQueue()
        first, second = _msg(1, "a", 1), _msg(1, "a", 1)
        q.push(first)
        q.push(second)
        assert q.pop() is first
        assert q.pop() is second

    def test_close_stops_consumption_and_hands_back_leftovers(self):
        q = ArrivalQueue()
        q.push(_msg(1, "a", 1))
        q.close()
        assert q.pop() is None  # closed wins even with items queued
        assert len(q.drain()) == 1
        assert q.drain() == []

    def test_pop_timeout(self):
        q = ArrivalQueue()
        assert q.pop(timeout=0.01) is None
