"""Declarative topologies: JSON config records, seeded random trees, and the
text/JSON dumps the CLI prints. Tests and the CLI share this module.

Config schema: a JSON list of node records
    {"id": str, "role": "master"|"server"|"router", "parent": str|null,
     "services": [{"name": str, "fmi": int}, ...]}
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .runtime import Runtime, RuntimeConfig
from .service import ExecutionMode, ServiceDescription, ServiceNode
from .transmission import NodeRole

_ROLE_NAMES = {role.value.lower(): role for role in NodeRole}


class ConfigError(ValueError):
    """Topology config did not validate."""


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    fmi: int


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: NodeRole
    parent: Optional[str]
    services: tuple[ServiceSpec, ...] = ()


_NODE_KEYS = {"id", "role", "parent", "services"}
_SERVICE_KEYS = {"name", "fmi"}


def parse_specs(records: list) -> list[NodeSpec]:
    if not isinstance(records, list) or not records:
        raise ConfigError("config must be a non-empty JSON list of node records")
    specs: list[NodeSpec] = []
    seen: set[str] = set()
    for record in records:
        if not isinstance(record, dict):
            raise ConfigError(f"node record must be an object: {record!r}")
        unknown = set(record) - _NODE_KEYS
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} in node record {record.get('id')!r}")
        try:
            node_id = record["id"]
            role_name = record["role"]
        except KeyError as missing:
            raise ConfigError(f"node record missing {missing}") from None
        if not isinstance(node_id, str) or not node_id:
            raise ConfigError(f"node id must be a non-empty string: {node_id!r}")
        if node_id in seen:
            raise ConfigError(f"duplicate node id {node_id!r}")
        seen.add(node_id)
        role = _ROLE_NAMES.get(str(role_name).lower())
        if role is None:
            raise ConfigError(f"unknown role {role_name!r} for node {node_id!r}")
        parent = record.get("parent")
        services = []
        for svc in record.get("services", []):
            if not isinstance(svc, dict) or set(svc) - _SERVICE_KEYS or "name" not in svc:
                raise ConfigError(f"bad service record {svc!r} on node {node_id!r}")
            fmi = svc.get("fmi", 1)
            if not isinstance(fmi, int) or fmi < 1:
                raise ConfigError(f"service fmi must be a positive integer: {svc!r}")
            services.append(ServiceSpec(name=svc["name"], fmi=fmi))
        specs.append(NodeSpec(id=node_id, role=role, parent=parent, services=tuple(services)))
    _validate_tree(specs)
    return specs


def _validate_tree(specs: list[NodeSpec]) -> None:
    ids = {s.id for s in specs}
    masters = [s for s in specs if s.role is NodeRole.MASTER]
    if len(masters) != 1:
        raise ConfigError(f"exactly one master required, found {len(masters)}")
    for spec in specs:
        if spec.role is NodeRole.MASTER:
            if spec.parent is not None:
                raise ConfigError(f"master {spec.id!r} must have parent null")
        else:
            if spec.parent is None:
                raise ConfigError(f"node {spec.id!r} needs a parent")
            if spec.parent not in ids:
                raise ConfigError(f"node {spec.id!r} names unknown parent {spec.parent!r}")
        if spec.role is NodeRole.ROUTER and spec.services:
            raise ConfigError(f"router {spec.id!r} cannot provide services")
    # reject cycles by checking that every node reaches the master
    parents = {s.id: s.parent for s in specs}
    for spec in specs:
        hops, cursor = 0, spec.id
        while parents[cursor] is not None:
            cursor = parents[cursor]
            hops += 1
            if hops > len(specs):
                raise ConfigError(f"parent chain from {spec.id!r} does not reach the master")


def load_config(source: Union[str, Path]) -> list[NodeSpec]:
    try:
        records = json.loads(Path(source).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {source}: {exc}") from exc
    return parse_specs(records)


def demo_specs() -> list[NodeSpec]:
    """The small evaluation topology: a master and three burn servers."""
    return [
        NodeSpec("master", NodeRole.MASTER, None),
        NodeSpec("s1", NodeRole.SERVER, "master", (ServiceSpec("Service1", 1_000_000),)),
        NodeSpec("s2", NodeRole.SERVER, "master", (ServiceSpec("Service2", 2_000_000),)),
        NodeSpec("s3", NodeRole.SERVER, "master", (ServiceSpec("Service3", 1_000_000),)),
    ]


def random_tree_specs(
    seed: int, n: int, router_share: float = 0.2
) -> list[NodeSpec]:
    """Seeded random tree: node 0 is the master, parents drawn uniformly from
    earlier nodes (keeps depth logarithmic, well inside the hop budget)."""
    if n < 1:
        raise ConfigError("a tree needs at least one node")
    rng = random.Random(seed)
    specs = [NodeSpec("n0000", NodeRole.MASTER, None)]
    for i in range(1, n):
        parent = f"n{rng.randrange(i):04d}"
        role = NodeRole.ROUTER if rng.random() < router_share else NodeRole.SERVER
        specs.append(NodeSpec(f"n{i:04d}", role, parent))
    return specs


@dataclass
class BuiltNetwork:
    runtime: Runtime
    master: ServiceNode
    nodes: dict[str, ServiceNode] = field(default_factory=dict)

    def close(self) -> None:
        self.runtime.close()

    def __enter__(self) -> "BuiltNetwork":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def build_network(
    specs: list[NodeSpec], runtime_config: Optional[RuntimeConfig] = None
) -> BuiltNetwork:
    """Spawn the configured tree; burn services run as plain FUNCTION services."""
    from .benchmark import FmiWorkload, fmi_burn  # deferred: pulls in the JIT

    order = _spawn_order(specs)
    runtime = Runtime(runtime_config)
    nodes: dict[str, ServiceNode] = {}
    master: Optional[ServiceNode] = None
    try:
        for spec in order:
            parent_ep = nodes[spec.parent].endpoint if spec.parent is not None else None
            node = ServiceNode.spawn(runtime, spec.role, parent_ep, address=spec.id)
            nodes[spec.id] = node
            if spec.role is NodeRole.MASTER:
                master = node
            for svc in spec.services:
                workload = FmiWorkload(svc.fmi)

                def burner(call, _w=workload):
                    value = fmi_burn(_w.fmi_count, start=float(call.args[0]) if call.args else 1.0)
                    return (repr(value), *call.args[1:])

                node.register_local(
                    ServiceDescription(name=svc.name, provider=spec.id, mode=ExecutionMode.FUNCTION),
                    burner,
                )
    except Exception:
        runtime.close()
        raise
    assert master is not None
    return BuiltNetwork(runtime=runtime, master=master, nodes=nodes)


def _spawn_order(specs: list[NodeSpec]) -> list[NodeSpec]:
    by_id = {s.id: s for s in specs}
    placed: set[str] = set()
    order: list[NodeSpec] = []

    def place(spec: NodeSpec) -> None:
        if spec.id in placed:
            return
        if spec.parent is not None:
            place(by_id[spec.parent])
        placed.add(spec.id)
        order.append(spec)

    for spec in specs:
        place(spec)
    return order


def bring_up(
    specs: list[NodeSpec], runtime_config: Optional[RuntimeConfig] = None
) -> BuiltNetwork:
    """Build, connect, and run one registration round."""
    net = build_network(specs, runtime_config)
    try:
        net.master.start_connect()
        net.master.run_registration()
    except Exception:
        net.close()
        raise
    return net


# ------------------------------------------------------------------- dumps


def topology_dump(net: BuiltNetwork) -> dict:
    nodes = []
    for address in sorted(net.nodes):
        node = net.nodes[address]
        parent = node.routing.parent
        nodes.append(
            {
                "address": address,
                "role": node.role.value,
                "state": node.state.value,
                "parent": parent.address if parent is not None else None,
                "children": node.routing.child_addresses(),
            }
        )
    return {"nodes": nodes}


def topology_text(dump: dict) -> str:
    by_addr = {entry["address"]: entry for entry in dump["nodes"]}
    roots = [e for e in dump["nodes"] if e["parent"] is None or e["parent"] not in by_addr]
    lines: list[str] = []

    def walk(entry: dict, depth: int) -> None:
        lines.append(
            f"{'  ' * depth}{entry['address']} [{entry['role']}] {entry['state']}"
        )
        for child in entry["children"]:
            if child in by_addr:
                walk(by_addr[child], depth + 1)

    for root in roots:
        walk(root, 0)
    return "\n".join(lines)


def registry_dump(net: BuiltNetwork) -> dict:
    nodes = []
    for address in sorted(net.nodes):
        node = net.nodes[address]
        entries = [
            {
                "name": d.name,
                "provider": d.provider,
                "route": list(d.route),
                "mode": d.mode.value,
                "reentrant": d.reentrant,
            }
            for d in sorted(node.registry.all_descriptions(), key=lambda d: (d.name, d.provider))
        ]
        nodes.append({"address": address, "registry": entries})
    return {"nodes": nodes}


def registry_text(dump: dict) -> str:
    lines = []
    for entry in dump["nodes"]:
        lines.append(f"{entry['address']}:")
        if not entry["registry"]:
            lines.append("  (empty)")
        for desc in entry["registry"]:
            lines.append(
                f"  {desc['name']} provider={desc['provider']}"
                f" route={'>'.join(desc['route'])}"
                f" mode={desc['mode']} reentrant={desc['reentrant']}"
            )
    return "\n".join(lines)


def tick_all(net: BuiltNetwork, timeout: Optional[float] = None) -> list[dict]:
    reports = []
    for address in sorted(net.nodes):
        try:
            report = net.master.tick(address, timeout)
            reports.append(
                {
                    "address": address,
                    "ok": True,
                    "state": report.state,
                    "round_trip_hops": report.round_trip_hops,
                }
            )
        except Exception as exc:
            reports.append({"address": address, "ok": False, "error": str(exc)})
    return reports
