"""Transmission layer: the tree-shaped connecting network.

Each node runs up to three activities:

* configurer — transient; posts CONFIG to the parent and waits for the ack.
  On the Master it persists as the control activity that drives sweeps,
  registration rounds and shutdown.
* router — sole consumer of the inbound queue; takes matching messages off
  into the delivered list and retransmits the rest.
* actor — sole consumer of the delivered list; executes protocol actions and
  hands non-transmission messages to the layer above through the outlet.

All cross-node interaction is message passing; endpoints are the only thing
shared between nodes.
"""
from __future__ import annotations

import logging
import queue
import threading
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional

from .errors import (
    ConfigTimeout,
    DeliveryError,
    MessageExpired,
    NoSuchChild,
    NotMaster,
    ProtocolError,
    SweepTimeout,
    UnknownAddress,
    UnreachableNode,
)
from .messages import (
    Action,
    Address,
    ArrivalQueue,
    Layer,
    Message,
    action_valid,
    hop,
    make_reply,
    new_message,
)
from .runtime import PendingReplies, Runtime, Waiter

logger = logging.getLogger(__name__)

_CLOSE = object()


class NodeState(Enum):
    INITIALIZING = "INITIALIZING"
    CONFIGURED = "CONFIGURED"
    CONNECTED = "CONNECTED"
    EXITING = "EXITING"
    TERMINATED = "TERMINATED"


_STATE_RANK = {state: i for i, state in enumerate(NodeState)}


class NodeRole(Enum):
    MASTER = "MASTER"
    SERVER = "SERVER"
    ROUTER = "ROUTER"


@dataclass(frozen=True)
class NodeEndpoint:
    """A node's address plus the capability other nodes use to post to it."""

    address: Address
    enqueue: Callable[[Message], None]


class RoutingTable:
    """Parent link, direct children, and next-hop-down shortcuts.

    Descendant entries are learned from CONFIG announcements and REG route
    traces; every entry's next hop is a current child.
    """

    def __init__(self, parent: Optional[NodeEndpoint] = None) -> None:
        self._lock = threading.Lock()
        self._parent = parent
        self._children: dict[Address, NodeEndpoint] = {}
        self._descendants: dict[Address, Address] = {}

    @property
    def parent(self) -> Optional[NodeEndpoint]:
        with self._lock:
            return self._parent

    def set_parent(self, parent: Optional[NodeEndpoint]) -> None:
        with self._lock:
            self._parent = parent

    def add_child(self, endpoint: NodeEndpoint) -> None:
        with self._lock:
            self._children[endpoint.address] = endpoint

    def remove_child(self, address: Address) -> list[Address]:
        """Drop a child and every address routed through it; returns them."""
        with self._lock:
            if address not in self._children:
                raise NoSuchChild(address)
            del self._children[address]
            removed = {address}
            for addr, via in list(self._descendants.items()):
                if via == address or addr == address:
                    del self._descendants[addr]
                    removed.add(addr)
            return sorted(removed)

    def learn(self, address: Address, via: Address) -> bool:
        with self._lock:
            if via not in self._children or address in self._children:
                return False
            self._descendants[address] = via
            return True

    def forget_many(self, addresses: list[Address]) -> None:
        with self._lock:
            for addr in addresses:
                self._descendants.pop(addr, None)

    def next_hop(self, destination: Address) -> Optional[NodeEndpoint]:
        with self._lock:
            ep = self._children.get(destination)
            if ep is not None:
                return ep
            via = self._descendants.get(destination)
            if via is not None and via in self._children:
                return self._children[via]
            return self._parent

    def knows_downward(self, destination: Address) -> bool:
        with self._lock:
            return destination in self._children or destination in self._descendants

    def children_snapshot(self) -> list[NodeEndpoint]:
        with self._lock:
            return list(self._children.values())

    def child_addresses(self) -> list[Address]:
        with self._lock:
            return sorted(self._children)

    def known_addresses(self) -> list[Address]:
        """Children plus learned descendants (for re-announcement on attach)."""
        with self._lock:
            return sorted(set(self._children) | set(self._descendants))


class RouteStatus(Enum):
    DELIVERED = "DELIVERED"
    FORWARDED = "FORWARDED"
    DROPPED = "DROPPED"


@dataclass(frozen=True)
class RouteResult:
    status: RouteStatus
    next_hop: Optional[Address] = None
    reason: Optional[str] = None


@dataclass(frozen=True)
class ConnectReport:
    sweep_id: int
    nodes: int


@dataclass(frozen=True)
class TickReport:
    target: Address
    state: str
    inbound_queued: int
    delivered_queued: int
    round_trip_hops: int


@dataclass(frozen=True)
class ShutdownReport:
    clean: bool
    forced: list[str]


class _SweepState:
    """Per-node HELLO/ECHO bookkeeping; touched only by the actor."""

    __slots__ = ("sid", "pending", "child_sum", "count", "echoed")

    def __init__(self) -> None:
        self.sid = 0
        self.pending: set[Address] = set()
        self.child_sum = 0
        self.count = 0
        self.echoed = False


class TransmissionNode:
    """One node of the connecting network."""

    def __init__(
        self,
        runtime: Runtime,
        role: NodeRole,
        address: Address,
        parent: Optional[NodeEndpoint],
    ) -> None:
        self.runtime = runtime
        self.role = role
        self.address = address
        self.state = NodeState.INITIALIZING
        self.routing = RoutingTable(parent)
        self.inbound: "queue.SimpleQueue[Message]" = queue.SimpleQueue()
        self.delivered = ArrivalQueue()
        self.endpoint = NodeEndpoint(address=address, enqueue=self._enqueue)
        self.drop_counts: Counter[str] = Counter()

        self._pending = PendingReplies()
        self._outlet: Optional[Callable[[Message], None]] = None
        self._term_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

        # handshake
        self._configured = threading.Event()
        self._handshake_corr: Optional[int] = None

        # sweep bookkeeping (non-master side is actor-only; master side is
        # shared between actor and control, hence the lock)
        self._sweep = _SweepState()
        self._sweep_lock = threading.Lock()
        self._master_sweep_sid = 0
        self._master_sweep_pending: set[Address] = set()
        self._master_sweep_total = 0
        self._master_sweep_done = threading.Event()
        self._sweep_counter = 0

        # teardown
        self._exit_pending: set[Address] = set()
        self._exit_done = threading.Event()

        # control activity (master only)
        self._control_queue: "queue.SimpleQueue" = queue.SimpleQueue()

        # test hooks: cleared to suspend an activity mid-protocol
        self._router_gate = threading.Event()
        self._router_gate.set()
        self._actor_gate = threading.Event()
        self._actor_gate.set()

    # ------------------------------------------------------------------ spawn

    @classmethod
    def spawn(
        cls,
        runtime: Runtime,
        role: NodeRole,
        parent: Optional[NodeEndpoint] = None,
        *,
        address: Optional[Address] = None,
        config_timeout: Optional[float] = None,
    ) -> "TransmissionNode":
        if (parent is None) != (role is NodeRole.MASTER):
            raise ValueError("parent must be absent exactly when role is MASTER")
        addr = runtime.allocate_address(address)
        node = cls(runtime, role, addr, parent)
        runtime.register_node(node)
        runtime.trace.record(addr, "spawn", role=role.value)
        node._start_thread(node._router_loop, "router")
        node._start_thread(node._actor_loop, "actor")
        if role is NodeRole.MASTER:
            node._advance_state(NodeState.CONFIGURED)
            node._start_thread(node._control_loop, "control")
            return node
        timeout = config_timeout if config_timeout is not None else runtime.config.config_timeout
        if not node._run_handshake(timeout):
            node.force_terminate()
            node.join_threads(timeout=1.0)
            raise ConfigTimeout(
                f"{addr}: no CONFIG_ACK from {parent.address} within {timeout}s"
            )
        return node

    def _start_thread(self, target: Callable[[], None], name: str) -> threading.Thread:
        thread = threading.Thread(target=target, name=f"{self.address}-{name}", daemon=True)
        self._threads.append(thread)
        thread.start()
        return thread

    def _run_handshake(self, timeout: float) -> bool:
        """Configurer activity: greet the parent, block until acknowledged."""
        outcome: dict[str, bool] = {}

        def configure() -> None:
            outcome["ok"] = self._greet_parent(timeout)

        thread = self._start_thread(configure, "configurer")
        thread.join(timeout + 1.0)
        return bool(outcome.get("ok"))

    def _greet_parent(self, timeout: float) -> bool:
        parent = self.routing.parent
        assert parent is not None
        msg = new_message(
            Layer.TRANSMISSION, Action.CONFIG, parent.address, self.address, ("join",)
        )
        self._handshake_corr = msg.correlation_id
        self._configured.clear()
        self.runtime.trace.record(
            self.address, "config-sent", parent=parent.address, corr=msg.correlation_id
        )
        try:
            self._send_direct(parent, msg)
        except DeliveryError:
            return False
        return self._configured.wait(timeout)

    # -------------------------------------------------------------- endpoints

    def _enqueue(self, msg: Message) -> None:
        if self.state is NodeState.TERMINATED:
            raise DeliveryError(f"{self.address} has terminated")
        self.inbound.put(msg)

    def _transmit(self, msg: Message) -> None:
        """Send a message from this node: route it immediately.

        `route` is thread-safe, so senders (actor, executor, callers) transmit
        in place rather than bouncing through the node's own inbound queue;
        the receiving node's router remains the sole queue consumer.
        """
        self.route(msg)

    def _send_direct(self, endpoint: NodeEndpoint, msg: Message) -> None:
        """One explicit hop into a held endpoint, bypassing the own router.

        Used where routing is impossible (handshake) or must not race the
        node's own teardown (the exit confirmation).
        """
        endpoint.enqueue(hop(msg, self.address))

    # ----------------------------------------------------------------- router

    def _router_loop(self) -> None:
        while True:
            msg = self.inbound.get()
            if msg is _CLOSE:
                break
            self._router_gate.wait()
            if self.state is NodeState.TERMINATED:
                self._count_drop(msg, "terminated")
                continue
            try:
                self.route(msg)
            except Exception:
                logger.exception("%s: router failed on %s", self.address, msg)
        while True:
            try:
                leftover = self.inbound.get_nowait()
            except queue.Empty:
                break
            if leftover is not _CLOSE:
                self._count_drop(leftover, "terminated")

    def route(self, msg: Message) -> RouteResult:
        """Deliver locally, retransmit toward the destination, or drop."""
        if not action_valid(msg.layer, msg.action):
            return self._drop(msg, "invalid-message")
        if msg.intend == self.address:
            self.runtime.trace.record(
                self.address,
                "deliver",
                action=msg.action.value,
                creator=msg.creator,
                corr=msg.correlation_id,
                hops=len(msg.route),
            )
            self.delivered.push(msg)
            return RouteResult(RouteStatus.DELIVERED)
        try:
            hopped = hop(msg, self.address)
        except MessageExpired:
            return self._drop(msg, "expired")
        next_hop = self.routing.next_hop(msg.intend)
        if next_hop is None:
            return self._drop(msg, "unknown-destination")
        try:
            next_hop.enqueue(hopped)
        except DeliveryError:
            return self._drop(hopped, "dead-next-hop")
        self.runtime.trace.record(
            self.address,
            "forward",
            action=msg.action.value,
            to=msg.intend,
            via=next_hop.address,
            corr=msg.correlation_id,
        )
        return RouteResult(RouteStatus.FORWARDED, next_hop=next_hop.address)

    def _count_drop(self, msg: Message, reason: str) -> None:
        self.drop_counts[reason] += 1
        self.runtime.trace.record(
            self.address,
            "drop",
            action=msg.action.value,
            reason=reason,
            corr=msg.correlation_id,
        )
        logger.debug("%s: dropped %s (%s)", self.address, msg, reason)

    def _drop(self, msg: Message, reason: str) -> RouteResult:
        self._count_drop(msg, reason)
        if msg.action is Action.REQ and msg.need_echo:
            # dropped requests must still resolve at the requester
            failure = make_reply(
                msg, Action.ACK, ("error", "unroutable", reason), creator=self.address
            )
            self.route(failure)
        return RouteResult(RouteStatus.DROPPED, reason=reason)

    # ------------------------------------------------------------------ actor

    def _actor_loop(self) -> None:
        while True:
            msg = self.delivered.pop()
            if msg is None:
                break
            self._actor_gate.wait()
            if self.state is NodeState.TERMINATED:
                break
            try:
                self._act(msg)
            except Exception:
                logger.exception("%s: actor failed on %s", self.address, msg)

    def _act(self, msg: Message) -> None:
        if msg.layer is not Layer.TRANSMISSION:
            self.transmission_outlet(msg)
            return
        if msg.action is Action.CONFIG:
            self._on_config(msg)
        elif msg.action is Action.CONFIG_ACK:
            self._on_config_ack(msg)
        elif msg.action is Action.HELLO:
            self._on_hello(msg)
        elif msg.action is Action.ECHO:
            self._on_echo(msg)
        elif msg.action is Action.TICK:
            self._on_tick(msg)
        elif msg.action is Action.EXIT:
            self._on_exit(msg)

    def set_outlet(self, handler: Optional[Callable[[Message], None]]) -> None:
        self._outlet = handler

    def transmission_outlet(self, msg: Message) -> None:
        """Hand a delivered non-transmission message to the layer above."""
        if self._outlet is None:
            self._drop(msg, "unhandled-layer")
            return
        self.runtime.trace.record(
            self.address,
            "outlet",
            action=msg.action.value,
            creator=msg.creator,
            corr=msg.correlation_id,
            t_create=msg.create_time,
        )
        self._outlet(msg)

    # ------------------------------------------------------- CONFIG handshake

    def _on_config(self, msg: Message) -> None:
        tag = msg.params[0] if msg.params else "join"
        if tag == "join":
            via = msg.route[-1] if msg.route else msg.creator
            if via == msg.creator:
                try:
                    child_ep = self.runtime.endpoint_for(msg.creator)
                except UnknownAddress:
                    self._count_drop(msg, "unknown-child")
                    return
                self.routing.add_child(child_ep)
                self.runtime.trace.record(self.address, "config-child", child=msg.creator)
            else:
                if self.routing.learn(msg.creator, via):
                    self.runtime.trace.record(
                        self.address, "config-learn", addr=msg.creator, via=via
                    )
            # teach the ancestors before releasing the child: the announce
            # sits ahead of this node's own later upward traffic, so a
            # completed sweep implies every earlier announce has propagated
            parent = self.routing.parent
            if parent is not None:
                self._transmit(replace(msg, intend=parent.address))
            if via == msg.creator:
                ack = make_reply(msg, Action.CONFIG_ACK, creator=self.address)
                try:
                    self._send_direct(self.runtime.endpoint_for(msg.creator), ack)
                except DeliveryError:
                    self._count_drop(ack, "dead-next-hop")
        elif tag == "detach":
            removed = list(msg.params[1:])
            self.routing.forget_many(removed)
            self.runtime.trace.record(self.address, "config-forget", count=len(removed))
            parent = self.routing.parent
            if parent is not None:
                self._transmit(replace(msg, intend=parent.address))

    def _on_config_ack(self, msg: Message) -> None:
        if msg.correlation_id != self._handshake_corr:
            return
        self._advance_state(NodeState.CONFIGURED)
        self.runtime.trace.record(self.address, "configured", parent=msg.creator)
        self._configured.set()

    # ------------------------------------------------------- HELLO/ECHO sweep

    def _on_hello(self, msg: Message) -> None:
        sid = int(msg.params[1])
        sweep = self._sweep
        self.runtime.trace.record(self.address, "hello", sweep=sid, sender=msg.creator)
        if sid > sweep.sid:
            sweep.sid = sid
            sweep.echoed = False
            sweep.child_sum = 0
            children = self.routing.children_snapshot()
            sweep.pending = {ep.address for ep in children}
            if not sweep.pending:
                self._send_sweep_echo(sid, 1)
                return
            for child in children:
                self._transmit(
                    new_message(
                        Layer.TRANSMISSION,
                        Action.HELLO,
                        child.address,
                        self.address,
                        ("sweep", str(sid)),
                    )
                )
        elif sid == sweep.sid and sweep.echoed:
            # duplicate within the same sweep: echo again, never re-forward
            self._send_sweep_echo(sid, sweep.count)

    def _send_sweep_echo(self, sid: int, count: int) -> None:
        sweep = self._sweep
        sweep.echoed = True
        sweep.count = count
        parent = self.routing.parent
        if parent is None:
            return
        self.runtime.trace.record(self.address, "echo-sent", sweep=sid, count=count)
        self._transmit(
            new_message(
                Layer.TRANSMISSION,
                Action.ECHO,
                parent.address,
                self.address,
                ("sweep", str(sid), str(count)),
            )
        )
        self._advance_state(NodeState.CONNECTED)

    def _on_echo(self, msg: Message) -> None:
        kind = msg.params[0]
        if kind == "sweep":
            self._on_sweep_echo(msg)
        elif kind == "tick":
            hops = int(msg.params[4]) + len(msg.route)
            outcome = ("tick", msg.params[1], msg.params[2], msg.params[3], hops)
            if not self._pending.resolve(msg.correlation_id, outcome):
                self.runtime.trace.record(self.address, "orphan-echo", corr=msg.correlation_id)
        elif kind == "exit":
            self._on_exit_confirm(msg)

    def _on_sweep_echo(self, msg: Message) -> None:
        sid = int(msg.params[1])
        count = int(msg.params[2])
        child = msg.creator
        self.runtime.trace.record(self.address, "echo", sweep=sid, child=child, count=count)
        if self.role is NodeRole.MASTER:
            with self._sweep_lock:
                if sid != self._master_sweep_sid or child not in self._master_sweep_pending:
                    return
                self._master_sweep_pending.discard(child)
                self._master_sweep_total += count
                if not self._master_sweep_pending:
                    self._master_sweep_total += 1  # count the master itself
                    self._master_sweep_done.set()
            return
        sweep = self._sweep
        if sid != sweep.sid or child not in sweep.pending:
            return
        sweep.pending.discard(child)
        sweep.child_sum += count
        if not sweep.pending:
            self._send_sweep_echo(sid, sweep.child_sum + 1)

    def start_connect(self, timeout: Optional[float] = None) -> ConnectReport:
        """Master-driven connectivity sweep; returns the node count."""
        return self._control_submit(lambda: self._drive_sweep(timeout))

    def _drive_sweep(self, timeout: Optional[float]) -> ConnectReport:
        timeout = timeout if timeout is not None else self.runtime.config.sweep_timeout
        self._sweep_counter += 1
        sid = self._sweep_counter
        children = self.routing.children_snapshot()
        with self._sweep_lock:
            self._master_sweep_sid = sid
            self._master_sweep_pending = {ep.address for ep in children}
            self._master_sweep_total = 0
            self._master_sweep_done.clear()
        self.runtime.trace.record(self.address, "sweep-start", sweep=sid)
        if not children:
            self._advance_state(NodeState.CONNECTED)
            self.runtime.trace.record(self.address, "connected", sweep=sid, nodes=1)
            return ConnectReport(sweep_id=sid, nodes=1)
        for child in children:
            self._transmit(
                new_message(
                    Layer.TRANSMISSION,
                    Action.HELLO,
                    child.address,
                    self.address,
                    ("sweep", str(sid)),
                )
            )
        if not self._master_sweep_done.wait(timeout):
            with self._sweep_lock:
                unresponsive = sorted(self._master_sweep_pending)
            raise SweepTimeout(sid, unresponsive)
        self._advance_state(NodeState.CONNECTED)
        with self._sweep_lock:
            total = self._master_sweep_total
        self.runtime.trace.record(self.address, "connected", sweep=sid, nodes=total)
        return ConnectReport(sweep_id=sid, nodes=total)

    # ------------------------------------------------------------------- TICK

    def _on_tick(self, msg: Message) -> None:
        self.runtime.trace.record(self.address, "tick", sender=msg.creator)
        if not msg.need_echo:
            return
        reply = make_reply(
            msg,
            Action.ECHO,
            (
                "tick",
                self.state.name,
                str(self.inbound.qsize()),
                str(len(self.delivered)),
                str(len(msg.route)),
            ),
            creator=self.address,
        )
        self._transmit(reply)

    def tick(self, target: Address, timeout: Optional[float] = None) -> TickReport:
        """Health-check `target`; raises UnreachableNode on timeout."""
        if self.state is not NodeState.CONNECTED:
            raise ProtocolError(f"{self.address}: tick requires a CONNECTED node")
        timeout = timeout if timeout is not None else self.runtime.config.tick_timeout
        msg = new_message(
            Layer.TRANSMISSION, Action.TICK, target, self.address, need_echo=True
        )
        waiter = self._pending.register(msg.correlation_id)
        self.runtime.trace.record(self.address, "tick-sent", target=target, corr=msg.correlation_id)
        self._transmit(msg)
        outcome = waiter.wait(timeout)
        if outcome is None or outcome[0] != "tick":
            self._pending.forget(msg.correlation_id)
            raise UnreachableNode(f"{target} did not answer TICK within {timeout}s")
        return TickReport(
            target=target,
            state=outcome[1],
            inbound_queued=int(outcome[2]),
            delivered_queued=int(outcome[3]),
            round_trip_hops=outcome[4],
        )

    # ------------------------------------------------------------------- EXIT

    def _on_exit(self, msg: Message) -> None:
        if _STATE_RANK[self.state] >= _STATE_RANK[NodeState.EXITING]:
            return
        self._advance_state(NodeState.EXITING)
        self.runtime.trace.record(self.address, "exit", sender=msg.creator)
        children = self.routing.children_snapshot()
        self._exit_pending = {ep.address for ep in children}
        if not self._exit_pending:
            self._finish_exit()
            return
        for child in children:
            self._transmit(
                new_message(
                    Layer.TRANSMISSION, Action.EXIT, child.address, self.address, ("shutdown",)
                )
            )

    def _on_exit_confirm(self, msg: Message) -> None:
        child = msg.creator
        if child not in self._exit_pending:
            return
        self._exit_pending.discard(child)
        self.runtime.trace.record(self.address, "exit-confirm", child=child)
        if not self._exit_pending and self.state is NodeState.EXITING:
            self._finish_exit()

    def _finish_exit(self) -> None:
        self.runtime.trace.record(self.address, "terminated")
        parent = self.routing.parent
        if self.role is not NodeRole.MASTER and parent is not None:
            confirm = new_message(
                Layer.TRANSMISSION, Action.ECHO, parent.address, self.address, ("exit",)
            )
            try:
                self._send_direct(parent, confirm)
            except DeliveryError:
                pass
        self._terminate()
        if self.role is NodeRole.MASTER:
            self._exit_done.set()

    def shutdown(self, timeout: Optional[float] = None) -> ShutdownReport:
        """Master-driven EXIT flood; returns when the Master has terminated."""
        return self._control_submit(lambda: self._drive_shutdown(timeout))

    def _drive_shutdown(self, timeout: Optional[float]) -> ShutdownReport:
        timeout = timeout if timeout is not None else self.runtime.config.teardown_timeout
        self._exit_done.clear()
        self._transmit(
            new_message(
                Layer.TRANSMISSION, Action.EXIT, self.address, self.address, ("shutdown",)
            )
        )
        clean = self._exit_done.wait(timeout)
        forced: list[str] = []
        if not clean:
            for node in self.runtime.nodes():
                if node.state is not NodeState.TERMINATED:
                    forced.append(node.address)
                    node.force_terminate()
        return ShutdownReport(clean=clean, forced=sorted(forced))

    # ---------------------------------------------------------- detach/attach

    def detach_subtree(self, child: Address) -> list[Address]:
        """Cut a child subtree out of the network; returns removed addresses.

        The subtree keeps running and keeps its upward capability so that
        in-flight work it already owns can still be acknowledged; it simply
        becomes unreachable from above.
        """
        if self.state is not NodeState.CONNECTED:
            raise ProtocolError(f"{self.address}: detach requires a CONNECTED node")
        removed = self.routing.remove_child(child)
        self.runtime.trace.record(self.address, "detach", child=child, count=len(removed))
        parent = self.routing.parent
        if parent is not None:
            self._transmit(
                new_message(
                    Layer.TRANSMISSION,
                    Action.CONFIG,
                    parent.address,
                    self.address,
                    ("detach", *removed),
                )
            )
        return removed

    def attach_subtree(
        self, child: "TransmissionNode | NodeEndpoint", timeout: Optional[float] = None
    ) -> None:
        """Adopt an existing (detached) node: it re-runs the CONFIG handshake."""
        if self.state is not NodeState.CONNECTED:
            raise ProtocolError(f"{self.address}: attach requires a CONNECTED node")
        node = child if isinstance(child, TransmissionNode) else self.runtime.node_for(child.address)
        node._reattach(self.endpoint, timeout)

    def _reattach(self, parent: NodeEndpoint, timeout: Optional[float]) -> None:
        timeout = timeout if timeout is not None else self.runtime.config.config_timeout
        self.routing.set_parent(parent)
        if not self._greet_parent(timeout):
            raise ConfigTimeout(f"{self.address}: re-attach to {parent.address} timed out")
        # announce the already-known subtree to the new ancestors
        for addr in self.routing.known_addresses():
            announce = new_message(
                Layer.TRANSMISSION, Action.CONFIG, parent.address, addr, ("join",)
            )
            self._send_direct(parent, announce)

    # ------------------------------------------------------------ termination

    def _terminate(self) -> None:
        with self._term_lock:
            if self.state is NodeState.TERMINATED:
                return
            self.state = NodeState.TERMINATED
        self._router_gate.set()
        self._actor_gate.set()
        for leftover in self.delivered.drain():
            self._count_drop(leftover, "terminated")
        self.delivered.close()
        self.inbound.put(_CLOSE)
        self._pending.drain_all(("dead",))
        self._on_terminate()
        if self.role is NodeRole.MASTER:
            self._control_queue.put(None)

    def _on_terminate(self) -> None:
        """Subclass hook: stop upper-layer activities."""

    def force_terminate(self) -> None:
        if self.state is not NodeState.TERMINATED:
            self.runtime.trace.record(self.address, "terminated", forced=True)
        self._terminate()

    def join_threads(self, timeout: float = 2.0) -> None:
        for thread in self._threads:
            thread.join(timeout)

    # ---------------------------------------------------------------- control

    def _control_loop(self) -> None:
        """Master's persistent configurer: drives sweeps, rounds, teardown."""
        while True:
            item = self._control_queue.get()
            if item is None:
                break
            fn, waiter = item
            try:
                waiter.resolve(("ok", fn()))
            except BaseException as exc:
                waiter.resolve(("error", exc))
            if self.state is NodeState.TERMINATED:
                break
        while True:
            try:
                item = self._control_queue.get_nowait()
            except queue.Empty:
                break
            if item is not None:
                item[1].resolve(("error", ProtocolError(f"{self.address} has terminated")))

    def _control_submit(self, fn: Callable[[], object]):
        if self.role is not NodeRole.MASTER:
            raise NotMaster(f"{self.address} is a {self.role.value}, not the Master")
        if self.state is NodeState.TERMINATED:
            raise ProtocolError(f"{self.address} has terminated")
        waiter = Waiter()
        self._control_queue.put((fn, waiter))
        status, value = waiter.wait(None)
        if status == "error":
            raise value
        return value

    # ------------------------------------------------------------------ misc

    def _advance_state(self, new_state: NodeState) -> None:
        if _STATE_RANK[new_state] > _STATE_RANK[self.state]:
            self.state = new_state

    # test hooks -----------------------------------------------------------

    def debug_pause_router(self) -> None:
        self._router_gate.clear()

    def debug_resume_router(self) -> None:
        self._router_gate.set()

    def debug_pause_actor(self) -> None:
        self._actor_gate.clear()

    def debug_resume_actor(self) -> None:
        self._actor_gate.set()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.address} {self.role.value} {self.state.value}>"
