"""Shared helpers: random trees, path oracles, trace polling."""
from __future__ import annotations

import random
import time

import pytest

from protonet import NodeRole, Runtime, ServiceNode


@pytest.fixture
def runtime():
    rt = Runtime()
    yield rt
    rt.close()


def build_random_tree(rt: Runtime, n: int, seed: int, router_share: float = 0.2):
    """Random recursive tree (uniform parent choice keeps depth ~log n).

    Returns (nodes, parent_of); parent_of maps child address -> parent address
    and is the ground truth the routing oracles walk.
    """
    rng = random.Random(seed)
    master = ServiceNode.spawn(rt, NodeRole.MASTER, address="n0000")
    nodes = [master]
    parent_of: dict[str, str] = {}
    for i in range(1, n):
        parent = nodes[rng.randrange(i)]
        role = NodeRole.ROUTER if rng.random() < router_share else NodeRole.SERVER
        node = ServiceNode.spawn(rt, role, parent.endpoint, address=f"n{i:04d}")
        parent_of[node.address] = parent.address
        nodes.append(node)
    return nodes, parent_of


def ancestor_path(parent_of: dict[str, str], addr: str) -> list[str]:
    """addr up to the root, inclusive."""
    path = [addr]
    while addr in parent_of:
        addr = parent_of[addr]
        path.append(addr)
    return path


def tree_path_length(parent_of: dict[str, str], a: str, b: str) -> int:
    """Brute-force unique tree path length between two addresses."""
    up_a = ancestor_path(parent_of, a)
    position = {addr: i for i, addr in enumerate(up_a)}
    steps = 0
    cursor = b
    while cursor not in position:
        cursor = parent_of[cursor]
        steps += 1
    return steps + position[cursor]


def wait_until(predicate, timeout: float = 5.0, interval: float = 0.002) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
