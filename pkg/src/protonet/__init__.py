"""protonet: an in-process protocol-programming runtime.

Spawned nodes join a tree-shaped connecting network and communicate only via
protocol messages; domain services are registered, discovered, routed and
executed through the protocol stack.
"""

from . import errors
from .messages import (
    Action,
    Address,
    DEFAULT_TTL,
    Layer,
    Message,
    arrival_key,
    arrival_order,
    hop,
    new_message,
    render_message,
)
from .runtime import Runtime, RuntimeConfig
from .service import (
    ExecutionMode,
    Forward,
    RequestHandle,
    RequestMode,
    ServiceDescription,
    ServiceNode,
    ServiceRegistry,
    ServiceRequest,
    match_service,
    select_provider,
)
from .transmission import (
    ConnectReport,
    NodeEndpoint,
    NodeRole,
    NodeState,
    RouteResult,
    RouteStatus,
    RoutingTable,
    ShutdownReport,
    TickReport,
    TransmissionNode,
)

__all__ = [
    "Action",
    "Address",
    "ConnectReport",
    "DEFAULT_TTL",
    "ExecutionMode",
    "Forward",
    "Layer",
    "Message",
    "NodeEndpoint",
    "NodeRole",
    "NodeState",
    "RequestHandle",
    "RequestMode",
    "RouteResult",
    "RouteStatus",
    "RoutingTable",
    "Runtime",
    "RuntimeConfig",
    "ServiceDescription",
    "ServiceNode",
    "ServiceRegistry",
    "ServiceRequest",
    "ShutdownReport",
    "TickReport",
    "TransmissionNode",
    "arrival_key",
    "arrival_order",
    "errors",
    "hop",
    "match_service",
    "new_message",
    "render_message",
    "select_provider",
]

__version__ = "0.1.0"
