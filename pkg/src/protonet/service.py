"""Service layer on top of transmission: descriptions, hierarchical REG
registration, REQ matching/routing with round-robin balancing, execution in
function or worker mode, and ACK correlation for synchronous callers.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Union

from .errors import (
    DuplicateService,
    NoProvider,
    ProtocolError,
    RegistrationTimeout,
    RequestTimeout,
    RouterRegistration,
    ServiceExecutionError,
)
from .messages import (
    Action,
    Address,
    ArrivalQueue,
    Layer,
    Message,
    continue_request,
    make_reply,
    new_message,
)
from .runtime import Runtime, Waiter
from .transmission import NodeEndpoint, NodeRole, NodeState, TransmissionNode

logger = logging.getLogger(__name__)


class ExecutionMode(Enum):
    WORKER = "WORKER"
    FUNCTION = "FUNCTION"


class RequestMode(Enum):
    SYNC = "SYNC"
    ASYNC = "ASYNC"


@dataclass(frozen=True)
class ServiceDescription:
    """Advertises one service: exact-match name, provider, recorded route."""

    name: str
    provider: Address
    route: tuple[Address, ...] = ()
    mode: ExecutionMode = ExecutionMode.FUNCTION
    reentrant: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("service name must be non-empty")

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "provider": self.provider,
                "route": list(self.route),
                "mode": self.mode.value,
                "reentrant": self.reentrant,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, blob: str) -> "ServiceDescription":
        raw = json.loads(blob)
        return cls(
            name=raw["name"],
            provider=raw["provider"],
            route=tuple(raw["route"]),
            mode=ExecutionMode(raw["mode"]),
            reentrant=raw["reentrant"],
        )


@dataclass(frozen=True)
class ServiceRequest:
    """What a handler receives: the call arguments plus request identity."""

    service: str
    args: tuple[str, ...]
    creator: Address
    correlation_id: int
    message: Message


@dataclass(frozen=True)
class Forward:
    """Handler result that forwards the request to the next pipeline stage.

    The continuation keeps the original creator/correlation/echo flag, so the
    stage that finally returns a plain result acknowledges the original
    requester.
    """

    service: str
    params: tuple[str, ...]


ServiceResult = Union[Forward, Sequence[str], str, None]
ServiceHandler = Callable[[ServiceRequest], ServiceResult]


class ServiceRegistry:
    """Per-node map of known descriptions with a round-robin cursor."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, list[ServiceDescription]] = {}
        self._cursor: dict[str, int] = {}

    def match(self, name: str) -> list[ServiceDescription]:
        """Exact, case-sensitive match; all providers for the name."""
        with self._lock:
            return list(self._entries.get(name, ()))

    def select(self, name: str) -> ServiceDescription:
        """Round-robin over the matched list in provider-address order."""
        with self._lock:
            entries = self._entries.get(name)
            if not entries:
                raise NoProvider(name)
            index = self._cursor.get(name, 0) % len(entries)
            self._cursor[name] = (index + 1) % len(entries)
            return entries[index]

    def replace_all(self, descriptions: list[ServiceDescription]) -> None:
        by_key = {(d.name, d.provider): d for d in descriptions}
        entries: dict[str, list[ServiceDescription]] = {}
        for desc in by_key.values():
            entries.setdefault(desc.name, []).append(desc)
        for descs in entries.values():
            descs.sort(key=lambda d: d.provider)
        with self._lock:
            self._entries = entries
            self._cursor = {
                name: self._cursor.get(name, 0) % len(descs)
                for name, descs in entries.items()
            }

    def all_descriptions(self) -> list[ServiceDescription]:
        with self._lock:
            return [d for descs in self._entries.values() for d in descs]

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._entries.values())


class RequestHandle:
    """Tracks one originated request; a SYNC handle resolves exactly once."""

    def __init__(
        self,
        node: "ServiceNode",
        correlation_id: int,
        mode: RequestMode,
        waiter: Optional[Waiter],
    ) -> None:
        self.correlation_id = correlation_id
        self.mode = mode
        self.submitted_at = time.monotonic()
        self._node = node
        self._waiter = waiter

    def wait(self, timeout: Optional[float] = None) -> list[str]:
        """Block until the ACK arrives; raises on failure or timeout."""
        if self._waiter is None:
            raise ProtocolError("request was submitted without need_echo; no ACK will come")
        outcome = self._waiter.wait(timeout)
        if outcome is None:
            self._node._pending.forget(self.correlation_id)
            raise RequestTimeout(
                f"request {self.correlation_id} not acknowledged within {timeout}s"
            )
        kind = outcome[0]
        if kind == "ok":
            return list(outcome[1:])
        if kind == "dead":
            raise ProtocolError("node terminated while the request was pending")
        code, detail = outcome[1], outcome[2] if len(outcome) > 2 else ""
        if code in ("no-provider", "unroutable"):
            raise NoProvider(f"{detail or code} (request {self.correlation_id})")
        raise ServiceExecutionError(detail or code)


class _Worker:
    """Dedicated activity owned by one WORKER-mode service."""

    def __init__(self, node: "ServiceNode", desc: ServiceDescription, handler: ServiceHandler):
        self.queue = ArrivalQueue()
        self._node = node
        self._desc = desc
        self._handler = handler
        self.thread = threading.Thread(
            target=self._loop, name=f"{node.address}-worker-{desc.name}", daemon=True
        )

    def _loop(self) -> None:
        while True:
            msg = self.queue.pop()
            if msg is None:
                return
            if self._desc.reentrant:
                self._node._spawn_execution(self._desc, self._handler, msg)
            else:
                self._node._run_service(self._desc, self._handler, msg)


class ServiceNode(TransmissionNode):
    """A connecting-network node with the service layer installed."""

    def __init__(
        self,
        runtime: Runtime,
        role: NodeRole,
        address: Address,
        parent: Optional[NodeEndpoint],
    ) -> None:
        super().__init__(runtime, role, address, parent)
        self.registry = ServiceRegistry()
        self.service_list = ArrivalQueue()
        self._local: dict[str, tuple[ServiceDescription, ServiceHandler]] = {}
        self._local_lock = threading.Lock()
        self._workers: dict[str, _Worker] = {}
        self._executor_started = False

        self._reg_lock = threading.Lock()
        self._reg_rid = 0
        self._reg_pending: set[Address] = set()
        self._reg_collected: list[ServiceDescription] = []
        self._reg_done = threading.Event()
        self._round_counter = 0

        self.set_outlet(self._service_outlet)

    # ----------------------------------------------------------- registration

    def local_descriptions(self) -> list[ServiceDescription]:
        with self._local_lock:
            return [entry[0] for entry in self._local.values()]

    def register_local(self, desc: ServiceDescription, handler: ServiceHandler) -> None:
        """Add a service this node provides; visible network-wide after the
        next registration round."""
        if self.role is NodeRole.ROUTER:
            raise RouterRegistration(f"{self.address} only transmits messages")
        if desc.provider != self.address:
            raise ValueError(f"description names provider {desc.provider}, node is {self.address}")
        normalized = replace(desc, route=(self.address,))
        with self._local_lock:
            if desc.name in self._local:
                raise DuplicateService(f"({desc.name}, {self.address})")
            self._local[desc.name] = (normalized, handler)
        self.runtime.trace.record(self.address, "service-registered", service=desc.name)
        self._ensure_executor()
        if desc.mode is ExecutionMode.WORKER:
            worker = _Worker(self, normalized, handler)
            self._workers[desc.name] = worker
            self._threads.append(worker.thread)
            worker.thread.start()

    def run_registration(self, timeout: Optional[float] = None) -> int:
        """Master-driven REG round; returns the size of the Master registry."""
        return self._control_submit(lambda: self._drive_registration(timeout))

    def _drive_registration(self, timeout: Optional[float]) -> int:
        timeout = timeout if timeout is not None else self.runtime.config.registration_timeout
        self._round_counter += 1
        rid = self._round_counter
        children = self.routing.children_snapshot()
        with self._reg_lock:
            self._reg_rid = rid
            self._reg_pending = {ep.address for ep in children}
            self._reg_collected = self.local_descriptions()
            self._reg_done.clear()
        self.runtime.trace.record(self.address, "reg-start", round=rid)
        if not children:
            self._complete_registration(rid)
            return len(self.registry)
        for child in children:
            self._transmit(
                new_message(
                    Layer.SERVICE, Action.REG, child.address, self.address, ("round", str(rid))
                )
            )
        if not self._reg_done.wait(timeout):
            with self._reg_lock:
                silent = sorted(self._reg_pending)
            raise RegistrationTimeout(rid, silent)
        return len(self.registry)

    def _on_reg(self, msg: Message) -> None:
        tag = msg.params[0]
        if tag == "round":
            rid = int(msg.params[1])
            children = self.routing.children_snapshot()
            with self._reg_lock:
                self._reg_rid = rid
                self._reg_pending = {ep.address for ep in children}
                self._reg_collected = self.local_descriptions()
            self.runtime.trace.record(self.address, "reg-round", round=rid)
            if not children:
                self._complete_registration(rid)
                return
            for child in children:
                self._transmit(
                    new_message(
                        Layer.SERVICE, Action.REG, child.address, self.address, ("round", str(rid))
                    )
                )
        elif tag == "report":
            rid = int(msg.params[1])
            child = msg.creator
            with self._reg_lock:
                if rid != self._reg_rid or child not in self._reg_pending:
                    self.runtime.trace.record(
                        self.address, "reg-stale", round=rid, child=child
                    )
                    return
                # the description passes through this node: extend its route
                arrived = [
                    replace(d, route=d.route + (self.address,))
                    for d in (ServiceDescription.from_json(blob) for blob in msg.params[2:])
                ]
                self._reg_collected.extend(arrived)
                self._reg_pending.discard(child)
                done = not self._reg_pending
            self.runtime.trace.record(
                self.address, "reg-report", round=rid, child=child, count=len(arrived)
            )
            if done:
                self._complete_registration(rid)

    def _complete_registration(self, rid: int) -> None:
        with self._reg_lock:
            collected = list(self._reg_collected)
        self.registry.replace_all(collected)
        # REG route traces double as routing knowledge
        for desc in collected:
            if len(desc.route) >= 2:
                via = desc.route[-2]
                for addr in desc.route[:-1]:
                    self.routing.learn(addr, via)
        self.runtime.trace.record(
            self.address, "registry-updated", round=rid, count=len(self.registry)
        )
        parent = self.routing.parent
        if parent is None:
            self._reg_done.set()
            return
        blobs = tuple(d.to_json() for d in self.registry.all_descriptions())
        self._transmit(
            new_message(
                Layer.SERVICE,
                Action.REG,
                parent.address,
                self.address,
                ("report", str(rid), *blobs),
            )
        )

    # --------------------------------------------------------------- requests

    def request(
        self,
        name: str,
        params: Sequence[str] = (),
        mode: RequestMode = RequestMode.SYNC,
        timeout: Optional[float] = None,
        *,
        need_echo: Optional[bool] = None,
    ) -> "list[str] | RequestHandle":
        """Request a service by name.

        SYNC blocks until the ACK (or raises); ASYNC returns a handle without
        blocking. `need_echo` defaults to the mode's natural choice; an ASYNC
        request may set it to receive an ACK later through the handle.
        """
        if self.state is not NodeState.CONNECTED:
            raise ProtocolError(f"{self.address}: request requires a CONNECTED node")
        if need_echo is None:
            need_echo = mode is RequestMode.SYNC
        if mode is RequestMode.SYNC and not need_echo:
            raise ValueError("a SYNC request requires an echo")
        timeout = timeout if timeout is not None else self.runtime.config.request_timeout
        msg = new_message(
            Layer.SERVICE,
            Action.REQ,
            self.address,
            self.address,
            (name, *params),
            need_echo=need_echo,
        )
        waiter = self._pending.register(msg.correlation_id) if need_echo else None
        handle = RequestHandle(self, msg.correlation_id, mode, waiter)
        self.runtime.trace.record(
            self.address, "req-sent", service=name, corr=msg.correlation_id, mode=mode.value
        )
        self._dispatch_request(msg)
        if mode is RequestMode.SYNC:
            return handle.wait(timeout)
        return handle

    def _dispatch_request(self, msg: Message) -> None:
        """Place a REQ: execute locally, shortcut down to a provider, or pass
        it one node up toward the Master."""
        name = msg.params[0]
        if self.registry.match(name):
            desc = self.registry.select(name)
            if desc.provider == self.address:
                self.runtime.trace.record(
                    self.address, "req-queued", service=name, corr=msg.correlation_id
                )
                self.service_list.push(msg)
            else:
                self.runtime.trace.record(
                    self.address,
                    "req-forward",
                    service=name,
                    provider=desc.provider,
                    corr=msg.correlation_id,
                )
                self._transmit(replace(msg, intend=desc.provider))
            return
        parent = self.routing.parent
        if parent is not None:
            self.runtime.trace.record(
                self.address, "req-up", service=name, corr=msg.correlation_id
            )
            self._transmit(replace(msg, intend=parent.address))
            return
        # Master with no match anywhere: resolve the caller explicitly
        self.runtime.trace.record(
            self.address, "req-no-provider", service=name, corr=msg.correlation_id
        )
        if msg.need_echo:
            failure = make_reply(
                msg, Action.ACK, ("error", "no-provider", name), creator=self.address
            )
            self._transmit(failure)
        else:
            self._count_drop(msg, "no-provider")

    # -------------------------------------------------------------- execution

    def _ensure_executor(self) -> None:
        with self._local_lock:
            if self._executor_started:
                return
            self._executor_started = True
        self._start_thread(self._executor_loop, "executor")

    def _executor_loop(self) -> None:
        while True:
            msg = self.service_list.pop()
            if msg is None:
                return
            name = msg.params[0]
            with self._local_lock:
                entry = self._local.get(name)
            if entry is None:
                # stale registry pointed here; resolve the caller anyway
                if msg.need_echo:
                    failure = make_reply(
                        msg, Action.ACK, ("error", "no-provider", name), creator=self.address
                    )
                    self._transmit(failure)
                else:
                    self._count_drop(msg, "no-provider")
                continue
            desc, handler = entry
            if desc.mode is ExecutionMode.WORKER:
                self._workers[name].queue.push(msg)
            elif desc.reentrant:
                self._spawn_execution(desc, handler, msg)
            else:
                self._run_service(desc, handler, msg)

    def _spawn_execution(
        self, desc: ServiceDescription, handler: ServiceHandler, msg: Message
    ) -> None:
        thread = threading.Thread(
            target=self._run_service,
            args=(desc, handler, msg),
            name=f"{self.address}-exec-{desc.name}-{msg.correlation_id}",
            daemon=True,
        )
        thread.start()

    def _run_service(
        self, desc: ServiceDescription, handler: ServiceHandler, msg: Message
    ) -> None:
        trace = self.runtime.trace
        trace.record(self.address, "exec-start", service=desc.name, corr=msg.correlation_id)
        call = ServiceRequest(
            service=desc.name,
            args=msg.params[1:],
            creator=msg.creator,
            correlation_id=msg.correlation_id,
            message=msg,
        )
        try:
            result = handler(call)
        except Exception as exc:
            trace.record(
                self.address,
                "exec-error",
                service=desc.name,
                corr=msg.correlation_id,
                error=f"{type(exc).__name__}",
            )
            logger.warning("%s: handler for %s failed", self.address, desc.name, exc_info=True)
            if msg.need_echo:
                failure = make_reply(
                    msg,
                    Action.ACK,
                    ("error", "handler-failed", f"{type(exc).__name__}: {exc}"),
                    creator=self.address,
                )
                self._transmit(failure)
            return
        trace.record(self.address, "exec-end", service=desc.name, corr=msg.correlation_id)
        if isinstance(result, Forward):
            continuation = continue_request(msg, (result.service, *result.params))
            trace.record(
                self.address,
                "req-continue",
                service=result.service,
                corr=msg.correlation_id,
            )
            self._dispatch_request(continuation)
            return
        if msg.need_echo:
            payload = _normalize_result(result)
            ack = make_reply(msg, Action.ACK, ("ok", *payload), creator=self.address)
            self._transmit(ack)

    # ------------------------------------------------------------ ACK / outlet

    def _on_ack(self, msg: Message) -> None:
        if msg.params and msg.params[0] == "ok":
            outcome: tuple = ("ok", *msg.params[1:])
        else:
            code = msg.params[1] if len(msg.params) > 1 else "error"
            detail = msg.params[2] if len(msg.params) > 2 else ""
            outcome = ("error", code, detail)
        resolved = self._pending.resolve(msg.correlation_id, outcome)
        self.runtime.trace.record(
            self.address,
            "ack",
            corr=msg.correlation_id,
            status=msg.params[0] if msg.params else "",
            resolved=resolved,
        )

    def _service_outlet(self, msg: Message) -> None:
        if msg.layer is not Layer.SERVICE:
            self._count_drop(msg, "unhandled-layer")
            return
        if msg.action is Action.REG:
            self._on_reg(msg)
        elif msg.action is Action.REQ:
            self._dispatch_request(msg)
        elif msg.action is Action.ACK:
            self._on_ack(msg)

    def _on_terminate(self) -> None:
        self.service_list.close()
        for worker in self._workers.values():
            worker.queue.close()


def match_service(registry: ServiceRegistry, name: str) -> list[ServiceDescription]:
    return registry.match(name)


def select_provider(registry: ServiceRegistry, name: str) -> ServiceDescription:
    return registry.select(name)


def _normalize_result(result: ServiceResult) -> tuple[str, ...]:
    if result is None:
        return ()
    if isinstance(result, str):
        return (result,)
    return tuple(result)
