"""Runtime context shared by every node: address allocation, the trace log,
default timeouts, and teardown of all node threads.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .errors import AddressInUse, UnknownAddress
from .trace import TraceLog

if TYPE_CHECKING:  # pragma: no cover
    from .transmission import NodeEndpoint, TransmissionNode


@dataclass
class RuntimeConfig:
    """Timeouts in seconds; all configurable, 5 s defaults."""

    config_timeout: float = 5.0
    sweep_timeout: float = 5.0
    tick_timeout: float = 5.0
    teardown_timeout: float = 5.0
    registration_timeout: float = 5.0
    request_timeout: float = 30.0


class Runtime:
    """One in-process runtime instance owning a single connecting network."""

    def __init__(self, config: Optional[RuntimeConfig] = None) -> None:
        self.config = config or RuntimeConfig()
        self.trace = TraceLog()
        self._lock = threading.Lock()
        self._nodes: dict[str, "TransmissionNode"] = {}
        self._used_addresses: set[str] = set()
        self._auto_seq = 0
        self._closed = False

    def allocate_address(self, requested: Optional[str] = None) -> str:
        with self._lock:
            if requested is not None:
                if requested in self._used_addresses:
                    raise AddressInUse(requested)
                self._used_addresses.add(requested)
                return requested
            while True:
                self._auto_seq += 1
                candidate = f"n{self._auto_seq:05d}"
                if candidate not in self._used_addresses:
                    self._used_addresses.add(candidate)
                    return candidate

    def register_node(self, node: "TransmissionNode") -> None:
        with self._lock:
            self._nodes[node.address] = node

    def node_for(self, address: str) -> "TransmissionNode":
        with self._lock:
            try:
                return self._nodes[address]
            except KeyError:
                raise UnknownAddress(address) from None

    def endpoint_for(self, address: str) -> "NodeEndpoint":
        return self.node_for(address).endpoint

    def nodes(self) -> list["TransmissionNode"]:
        with self._lock:
            return list(self._nodes.values())

    def close(self) -> None:
        """Force-terminate every node and join its threads. Idempotent."""
        with self._lock:
            if self._closed:
                return
            self._closed = True
            nodes = list(self._nodes.values())
        for node in nodes:
            node.force_terminate()
        for node in nodes:
            node.join_threads(timeout=2.0)

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


class Waiter:
    """Single-resolution slot a caller blocks on while a reply is in flight."""

    __slots__ = ("_event", "outcome")

    def __init__(self) -> None:
        self._event = threading.Event()
        self.outcome: Optional[tuple] = None

    def resolve(self, outcome: tuple) -> bool:
        if self._event.is_set():
            return False
        self.outcome = outcome
        self._event.set()
        return True

    def wait(self, timeout: Optional[float]) -> Optional[tuple]:
        if not self._event.wait(timeout):
            return None
        return self.outcome


class PendingReplies:
    """Correlation-id keyed table of waiters; each resolves at most once."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._waiters: dict[int, Waiter] = {}

    def register(self, correlation_id: int) -> Waiter:
        waiter = Waiter()
        with self._lock:
            self._waiters[correlation_id] = waiter
        return waiter

    def resolve(self, correlation_id: int, outcome: tuple) -> bool:
        with self._lock:
            waiter = self._waiters.pop(correlation_id, None)
        if waiter is None:
            return False
        return waiter.resolve(outcome)

    def forget(self, correlation_id: int) -> None:
        with self._lock:
            self._waiters.pop(correlation_id, None)

    def drain_all(self, outcome: tuple) -> None:
        with self._lock:
            waiters = list(self._waiters.values())
            self._waiters.clear()
        for waiter in waiters:
            waiter.resolve(outcome)

    def __len__(self) -> int:
        with self._lock:
            return len(self._waiters)
