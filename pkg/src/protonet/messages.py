"""Message record, layer/action vocabularies and ordering shared by all layers.

Addresses are plain strings: unique per spawned node within one runtime and
never reused, which the runtime enforces at spawn time.
"""
from __future__ import annotations

import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional, Sequence

from .errors import ActionLayerMismatch, MessageExpired

Address = str

DEFAULT_TTL = 64


class Layer(Enum):
    TRANSMISSION = "TRANSMISSION"
    SERVICE = "SERVICE"
    DOMAIN = "DOMAIN"


class Action(Enum):
    CONFIG = "CONFIG"
    CONFIG_ACK = "CONFIG_ACK"
    HELLO = "HELLO"
    ECHO = "ECHO"
    TICK = "TICK"
    EXIT = "EXIT"
    REG = "REG"
    REQ = "REQ"
    ACK = "ACK"


ACTIONS_BY_LAYER: dict[Layer, frozenset[Action]] = {
    Layer.TRANSMISSION: frozenset(
        {Action.CONFIG, Action.CONFIG_ACK, Action.HELLO, Action.ECHO, Action.TICK, Action.EXIT}
    ),
    Layer.SERVICE: frozenset({Action.REG, Action.REQ, Action.ACK}),
    # The domain layer talks through services; it defines no actions of its own.
    Layer.DOMAIN: frozenset(),
}

_correlation_counter = itertools.count(1)


def next_correlation_id() -> int:
    """Fresh token, unique within the process; pairs requests with replies."""
    return next(_correlation_counter)


def action_valid(layer: Layer, action: Action) -> bool:
    return action in ACTIONS_BY_LAYER[layer]


@dataclass(frozen=True, slots=True)
class Message:
    """A single protocol message.

    Immutable after construction except through `hop`, so instances can be
    handed between threads; ownership is single-consumer (one queue or one
    activity holds a message at a time).
    """

    layer: Layer
    action: Action
    intend: Address
    creator: Address
    need_echo: bool = False
    time_to_live: int = DEFAULT_TTL
    create_time: int = field(default_factory=time.monotonic_ns)
    correlation_id: int = field(default_factory=next_correlation_id)
    route: tuple[Address, ...] = ()
    params: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.time_to_live < 0:
            raise ValueError("time_to_live must be non-negative")

    def __str__(self) -> str:
        return render_message(self)


def new_message(
    layer: Layer,
    action: Action,
    intend: Address,
    creator: Address,
    params: Sequence[str] = (),
    *,
    need_echo: bool = False,
    time_to_live: int = DEFAULT_TTL,
) -> Message:
    """Build a fresh message, rejecting action/layer mismatches."""
    if not action_valid(layer, action):
        raise ActionLayerMismatch(f"{action.value} is not a {layer.value}-layer action")
    return Message(
        layer=layer,
        action=action,
        intend=intend,
        creator=creator,
        need_echo=need_echo,
        time_to_live=time_to_live,
        params=tuple(params),
    )


def make_reply(
    request: Message,
    action: Action,
    params: Sequence[str] = (),
    *,
    creator: Address,
) -> Message:
    """Reply to `request`, echoing its correlation id verbatim."""
    if not action_valid(request.layer, action):
        raise ActionLayerMismatch(f"{action.value} is not a {request.layer.value}-layer action")
    return Message(
        layer=request.layer,
        action=action,
        intend=request.creator,
        creator=creator,
        correlation_id=request.correlation_id,
        params=tuple(params),
    )


def continue_request(request: Message, params: Sequence[str]) -> Message:
    """Forward a pipeline request to its next stage.

    The continuation keeps the original creator, correlation id and echo flag:
    whoever finally completes the chain acknowledges the original requester.
    """
    return Message(
        layer=Layer.SERVICE,
        action=Action.REQ,
        intend=request.creator,  # placeholder; dispatch re-aims it
        creator=request.creator,
        need_echo=request.need_echo,
        correlation_id=request.correlation_id,
        params=tuple(params),
    )


def hop(msg: Message, via: Address) -> Message:
    """Account for one forwarding hop through `via`."""
    if msg.time_to_live <= 0:
        raise MessageExpired(f"message {msg.correlation_id} expired at {via}")
    return replace(msg, time_to_live=msg.time_to_live - 1, route=msg.route + (via,))


def arrival_key(msg: Message) -> tuple[int, Address, int]:
    """Sort key lining up arrived messages: create time, then creator, then token."""
    return (msg.create_time, msg.creator, msg.correlation_id)


def arrival_order(a: Message, b: Message) -> int:
    """-1 if a is processed first, 1 if b is, 0 only for identical keys."""
    ka, kb = arrival_key(a), arrival_key(b)
    return -1 if ka < kb else (1 if ka > kb else 0)


def render_message(msg: Message) -> str:
    """One-line debug rendering with stable field order."""
    return (
        f"{msg.layer.value}/{msg.action.value}"
        f" intend={msg.intend} creator={msg.creator}"
        f" ttl={msg.time_to_live}"
        f" route=[{','.join(msg.route)}]"
        f" params={list(msg.params)!r}"
        f" corr={msg.correlation_id}"
    )


class ArrivalQueue:
    """Priority queue over `arrival_key`, FIFO within equal keys.

    One producer side may have many threads; the consumer is a single
    activity. `pop` blocks until a message arrives or the queue is closed;
    once closed it returns None immediately and discards nothing silently
    (`drain` hands leftovers back to the caller for drop accounting).
    """

    def __init__(self) -> None:
        self._heap: list[tuple[tuple[int, Address, int], int, Message]] = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._closed = False

    def push(self, msg: Message) -> None:
        with self._cond:
            heapq.heappush(self._heap, (arrival_key(msg), next(self._seq), msg))
            self._cond.notify()

    def pop(self, timeout: Optional[float] = None) -> Optional[Message]:
        with self._cond:
            while not self._heap and not self._closed:
                if not self._cond.wait(timeout):
                    return None
            if self._closed:
                return None
            return heapq.heappop(self._heap)[2]

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def drain(self) -> list[Message]:
        with self._cond:
            leftovers = [item[2] for item in self._heap]
            self._heap.clear()
            return leftovers

    def __len__(self) -> int:
        with self._cond:
            return len(self._heap)

    def __iter__(self) -> Iterator[Message]:
        raise TypeError("ArrivalQueue is consume-only")
