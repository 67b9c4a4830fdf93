"""Exception types raised by the runtime."""


class ProtocolError(Exception):
    """Base class for all runtime errors."""


class ActionLayerMismatch(ProtocolError):
    """Message action is not valid for the message layer."""


class MessageExpired(ProtocolError):
    """Message hop budget is exhausted; the caller must drop it."""


class AddressInUse(ProtocolError):
    """Requested node address was already allocated in this runtime."""


class UnknownAddress(ProtocolError):
    """No node with this address exists in the runtime."""


class DeliveryError(ProtocolError):
    """Enqueue to a node failed (the node has terminated)."""


class ConfigTimeout(ProtocolError):
    """CONFIG handshake with the parent did not complete in time."""


class SweepTimeout(ProtocolError):
    """HELLO/ECHO sweep did not complete; names the silent subtrees."""

    def __init__(self, sweep_id: int, unresponsive: list[str]):
        self.sweep_id = sweep_id
        self.unresponsive = unresponsive
        super().__init__(
            f"sweep {sweep_id} timed out; unresponsive subtrees: {unresponsive}"
        )


class UnreachableNode(ProtocolError):
    """TICK target did not answer within the timeout."""


class NoSuchChild(ProtocolError):
    """Detach was asked to remove an address that is not a current child."""


class NotMaster(ProtocolError):
    """Operation may only be driven from the Master node."""


class RouterRegistration(ProtocolError):
    """Routers forward messages only; they cannot provide services."""


class DuplicateService(ProtocolError):
    """A (name, provider) pair was registered twice."""


class RegistrationTimeout(ProtocolError):
    """REG round did not complete; names the silent subtrees."""

    def __init__(self, round_id: int, unresponsive: list[str]):
        self.round_id = round_id
        self.unresponsive = unresponsive
        super().__init__(
            f"registration round {round_id} timed out; silent subtrees: {unresponsive}"
        )


class NoProvider(ProtocolError):
    """No provider matched the requested service name anywhere on the path."""


class ServiceExecutionError(ProtocolError):
    """The provider's handler raised; the failure was returned in the ACK."""


class RequestTimeout(ProtocolError):
    """A synchronous request was not acknowledged within the timeout."""
