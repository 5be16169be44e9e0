"""Radial low-voltage network model and backward-forward sweep power flow.

All electrical quantities are per-unit on the topology's base power and base
voltage. Loads follow the consumer convention: positive ``P + jQ`` is drawn
from the grid, so a PV infeed shows up as negative demand.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

TOLERANCE = 1e-8
MAX_ITERATIONS = 100


class TopologyError(ValueError):
    pass


class CycleDetected(TopologyError):
    def __init__(self, line: "Line"):
        super().__init__(f"line {line.from_bus}-{line.to_bus} closes a cycle")
        self.line = line


class DisconnectedBus(TopologyError):
    def __init__(self, bus: int):
        super().__init__(f"bus {bus} is not reachable from the slack bus")
        self.bus = bus


class DuplicateLine(TopologyError):
    def __init__(self, a: int, b: int):
        super().__init__(f"more than one line between buses {a} and {b}")
        self.buses = (a, b)


class NonConvergence(RuntimeError):
    def __init__(self, residual: float, iterations: int, context: str = ""):
        msg = f"power flow did not converge after {iterations} iterations (residual {residual:.3e})"
        if context:
            msg = f"{msg}; {context}"
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations
        self.context = context


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class NetworkTopology:
    """Bus count, lines and bases. ``parent`` is filled in by :func:`validate_topology`."""

    bus_count: int
    lines: tuple[Line, ...]
    base_voltage: float = 400.0
    base_power: float = 100.0
    parent: tuple[int, ...] | None = field(default=None, compare=False)

    @property
    def validated(self) -> bool:
        return self.parent is not None

    def feeder_heads(self) -> list[int]:
        """Buses directly connected to the slack, in ascending order."""
        return sorted(ln.to_bus for ln in self._require().lines if ln.from_bus == 0)

    def feeder_of(self) -> list[int]:
        """Feeder head of every bus (0 for the slack itself)."""
        parent = self._require().parent
        heads = [0] * self.bus_count
        for bus in range(1, self.bus_count):
            b = bus
            while parent[b] != 0:
                b = parent[b]
            heads[bus] = b
        return heads

    def _require(self) -> "NetworkTopology":
        if not self.validated:
            raise TopologyError("topology has not been validated")
        return self


def validate_topology(topology: NetworkTopology) -> NetworkTopology:
    """Check that the lines form a spanning tree rooted at bus 0.

    Returns a copy with every line oriented parent -> child, lines ordered by a
    breadth-first walk from the slack (neighbours visited in ascending id) and
    ``parent[b]`` set for every bus (``parent[0] == -1``).
    """
    n = topology.bus_count
    if n < 1:
        raise TopologyError("a topology needs at least the slack bus")
    seen_pairs: set[tuple[int, int]] = set()
    adjacency: dict[int, list[tuple[int, Line]]] = {b: [] for b in range(n)}
    for ln in topology.lines:
        a, b = ln.from_bus, ln.to_bus
        if a == b:
            raise TopologyError(f"line {a}-{b} connects a bus to itself")
        if not (0 <= a < n and 0 <= b < n):
            raise TopologyError(f"line {a}-{b} references an unknown bus")
        if not (np.isfinite(ln.r) and np.isfinite(ln.x)) or ln.r < 0:
            raise TopologyError(f"line {a}-{b} has invalid impedance r={ln.r}, x={ln.x}")
        key = (min(a, b), max(a, b))
        if key in seen_pairs:
            raise DuplicateLine(*key)
        seen_pairs.add(key)
        adjacency[a].append((b, ln))
        adjacency[b].append((a, ln))

    parent = [-1] * n
    visited = {0}
    used: set[int] = set()
    oriented: list[Line] = []
    queue = deque([0])
    while queue:
        bus = queue.popleft()
        for nb, ln in sorted(adjacency[bus], key=lambda item: item[0]):
            if id(ln) in used:
                continue
            used.add(id(ln))
            if nb in visited:
                raise CycleDetected(ln)
            visited.add(nb)
            parent[nb] = bus
            oriented.append(Line(bus, nb, ln.r, ln.x))
            queue.append(nb)
    for bus in range(n):
        if bus not in visited:
            raise DisconnectedBus(bus)
    return replace(topology, lines=tuple(oriented), parent=tuple(parent))


def topology_fingerprint(topology: NetworkTopology) -> str:
    """Stable hash of bases and (oriented) lines."""
    topo = topology if topology.validated else validate_topology(topology)
    payload = json.dumps(topology_to_dict(topo), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PowerFlowResult:
    voltages: np.ndarray       # complex, per bus
    line_currents: np.ndarray  # complex, per line in topology order
    losses: complex
    iterations: int
    residual: float
    slack_power: complex = 0j  # power delivered by the slack into the grid


@dataclass(frozen=True)
class BatchPowerFlowResult:
    """Power flow solved for many independent load snapshots at once (rows)."""

    voltages: np.ndarray       # (T, buses) complex
    line_currents: np.ndarray  # (T, lines) complex
    losses: np.ndarray         # (T,) complex
    iterations: int
    residual: float
    slack_power: np.ndarray    # (T,) complex

    def row(self, t: int) -> PowerFlowResult:
        return PowerFlowResult(
            voltages=self.voltages[t].copy(),
            line_currents=self.line_currents[t].copy(),
            losses=complex(self.losses[t]),
            iterations=self.iterations,
            residual=self.residual,
            slack_power=complex(self.slack_power[t]),
        )


def _subtree_matrix(topology: NetworkTopology) -> np.ndarray:
    """Branch-injection matrix: entry (line, bus-1) is 1 if the bus lies downstream of the line."""
    n = topology.bus_count
    m = len(topology.lines)
    line_of_bus = {ln.to_bus: k for k, ln in enumerate(topology.lines)}
    mat = np.zeros((m, n - 1))
    for bus in range(1, n):
        node = bus
        while node != 0:
            mat[line_of_bus[node], bus - 1] = 1.0
            node = topology.parent[node]
    return mat


def solve_power_flow_batch(
    topology: NetworkTopology,
    loads: np.ndarray,
    slack_voltage: float = 1.0,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
) -> BatchPowerFlowResult:
    """Backward-forward sweep on a (T, buses) array of complex bus demands.

    Column 0 (slack) is ignored. Iteration stops once the largest voltage
    update over all rows and buses drops below ``tol``.
    """
    topo = topology if topology.validated else validate_topology(topology)
    s = np.atleast_2d(np.asarray(loads, dtype=complex))
    if s.shape[1] != topo.bus_count:
        raise ValueError(f"expected {topo.bus_count} bus demands, got {s.shape[1]}")
    rows = s.shape[0]
    v0 = complex(slack_voltage)
    if topo.bus_count == 1:
        return BatchPowerFlowResult(
            voltages=np.full((rows, 1), v0),
            line_currents=np.zeros((rows, 0), complex),
            losses=np.zeros(rows, complex),
            iterations=1,
            residual=0.0,
            slack_power=np.zeros(rows, complex),
        )

    subtree = _subtree_matrix(topo)
    z = np.array([ln.z for ln in topo.lines])
    demand = s[:, 1:]
    v = np.full(demand.shape, v0)
    residual = np.inf
    line_currents = np.zeros((rows, len(z)), complex)
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            bus_currents = np.conj(demand / v)
            # backward sweep: accumulate downstream injections into each branch
            line_currents = bus_currents @ subtree.T
            # forward sweep: subtract drops along the path from the slack
            v_new = v0 - (line_currents * z) @ subtree
            delta = np.abs(v_new - v)
            residual = float(delta.max()) if np.all(np.isfinite(delta)) else np.inf
            v = v_new
            if residual < tol:
                break
            if not np.isfinite(residual):
                break
    if not residual < tol:
        bad = np.where(~np.isfinite(delta).all(axis=1) | (delta.max(axis=1) >= tol))[0]
        ctx = f"rows {bad[:5].tolist()}" if rows > 1 else ""
        raise NonConvergence(residual, it, ctx)

    # currents consistent with the final voltages
    line_currents = np.conj(demand / v) @ subtree.T
    losses = (np.abs(line_currents) ** 2 * z).sum(axis=1)
    voltages = np.concatenate([np.full((rows, 1), v0), v], axis=1)
    from_slack = np.array([ln.from_bus == 0 for ln in topo.lines])
    slack_power = v0 * np.conj(line_currents[:, from_slack].sum(axis=1))
    return BatchPowerFlowResult(voltages, line_currents, losses, it, residual, slack_power)


def solve_power_flow(
    topology: NetworkTopology,
    loads: Sequence[complex] | np.ndarray,
    slack_voltage: float = 1.0,
) -> PowerFlowResult:
    """Solve one snapshot. ``loads[b]`` is the complex demand at bus b; ``loads[0]`` is ignored."""
    topo = topology if topology.validated else validate_topology(topology)
    batch = solve_power_flow_batch(topo, np.asarray(loads, dtype=complex)[None, :], slack_voltage)
    return batch.row(0)


def substation_channel_names(topology: NetworkTopology) -> list[str]:
    names = ["p_total", "q_total", "i_slack", "v_slack"]
    for head in topology.feeder_heads():
        names += [f"p_feeder{head}", f"q_feeder{head}"]
    return names


def aggregate_substation_batch(result: BatchPowerFlowResult, topology: NetworkTopology) -> np.ndarray:
    """Substation channels per row, columns as in :func:`substation_channel_names`."""
    v0 = result.voltages[:, :1]
    heads = topology.feeder_heads()
    line_index = {ln.to_bus: k for k, ln in enumerate(topology.lines)}
    cols = [line_index[h] for h in heads]
    feeder_i = result.line_currents[:, cols] if cols else np.zeros((len(v0), 0), complex)
    feeder_s = v0 * np.conj(feeder_i)
    total_i = feeder_i.sum(axis=1)
    total_s = v0[:, 0] * np.conj(total_i)
    out = np.empty((len(v0), 4 + 2 * len(heads)))
    out[:, 0] = total_s.real
    out[:, 1] = total_s.imag
    out[:, 2] = np.abs(total_i)
    out[:, 3] = np.abs(v0[:, 0])
    out[:, 4::2] = feeder_s.real
    out[:, 5::2] = feeder_s.imag
    return out


def aggregate_substation(result: PowerFlowResult, topology: NetworkTopology) -> dict[str, float]:
    """Substation record for a single solved snapshot, keyed by channel name."""
    batch = BatchPowerFlowResult(
        voltages=result.voltages[None, :],
        line_currents=result.line_currents[None, :],
        losses=np.array([result.losses]),
        iterations=result.iterations,
        residual=result.residual,
        slack_power=np.array([result.slack_power]),
    )
    row = aggregate_substation_batch(batch, topology)[0]
    return dict(zip(substation_channel_names(topology), row.tolist()))


# --- serialization ---------------------------------------------------------

def topology_to_dict(topology: NetworkTopology) -> dict:
    return {
        "base_voltage_v": topology.base_voltage,
        "base_power_kva": topology.base_power,
        "buses": [{"id": b} for b in range(topology.bus_count)],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "r_pu": ln.r, "x_pu": ln.x}
            for ln in topology.lines
        ],
    }


def topology_from_dict(data: dict) -> NetworkTopology:
    """Parse the grid-file layout and validate it."""
    ids = sorted(int(b["id"]) for b in data["buses"])
    if ids != list(range(len(ids))):
        raise TopologyError("bus ids must be 0..n-1 without gaps")
    lines = tuple(
        Line(int(ln["from"]), int(ln["to"]), float(ln["r_pu"]), float(ln["x_pu"]))
        for ln in data["lines"]
    )
    topo = NetworkTopology(
        bus_count=len(ids),
        lines=lines,
        base_voltage=float(data.get("base_voltage_v", 400.0)),
        base_power=float(data.get("base_power_kva", 100.0)),
    )
    return validate_topology(topo)


def random_radial_topology(
    buses: int,
    feeders: int,
    seed: int,
    r_range: tuple[float, float] = (0.02, 0.06),
    x_over_r: tuple[float, float] = (0.6, 1.0),
    base_voltage: float = 400.0,
    base_power: float = 100.0,
) -> NetworkTopology:
    """Random radial grid: ``feeders`` lines leave the slack, remaining buses hang off earlier ones.

    New buses attach preferentially to the tail of a feeder so that the result
    looks like LV street feeders rather than a star.
    """
    if buses < 2:
        raise ValueError("need at least 2 buses")
    feeders = max(1, min(feeders, buses - 1))
    rng = np.random.default_rng(seed)
    lines = []
    tails = []
    members: list[list[int]] = []
    for b in range(1, feeders + 1):
        lines.append((0, b))
        tails.append(b)
        members.append([b])
    for b in range(feeders + 1, buses):
        f = int(rng.integers(feeders))
        if rng.random() < 0.7:
            par = tails[f]
        else:
            par = int(rng.choice(members[f]))
        lines.append((par, b))
        tails[f] = b
        members[f].append(b)
    out = []
    for a, b in lines:
        r = float(rng.uniform(*r_range))
        x = r * float(rng.uniform(*x_over_r))
        out.append(Line(a, b, round(r, 6), round(x, 6)))
    return validate_topology(NetworkTopology(buses, tuple(out), base_voltage, base_power))
