"""Grid data model, admittance assembly, power flow, and partitioning.

Buses are numbered 1..n contiguously.  Branches are series r + jx elements;
bus shunts enter through ``b_shunt``.  Loads are given as consumed (p, q) in
per unit on the system base.  Generator-kind buses hold their dispatch as a
negative load (p_load = -P_dispatch), so the scheduled net injection at any
bus is always -p_load - j q_load and one schema covers every bus kind.
Classical machine data (m, d, xd_p) lives in the generator table; every
slack or generator bus hosts exactly one machine.

The power flow is a polar Newton-Raphson with PV treatment of generator
buses and a single slack.  ``make_partition`` splits the bus set into an
internal study system and the external remainder, deriving the tie branches
that cross the boundary and the internal boundary buses (ports).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from neudye.errors import NumericalError, ValidationError

BUS_KINDS = ("slack", "generator", "load")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_set: float = 1.0
    p_load: float = 0.0
    q_load: float = 0.0
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    bus: int
    m: float
    d: float
    xd_p: float


@dataclass
class GridModel:
    f_base: float
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]

    def __post_init__(self) -> None:
        self.validate()

    # -- structure ---------------------------------------------------------

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def omega_s(self) -> float:
        return 2.0 * np.pi * self.f_base

    def bus_index(self, bus_id: int) -> int:
        if not 1 <= bus_id <= self.n_buses:
            raise ValidationError(f"bus id {bus_id} outside 1..{self.n_buses}")
        return bus_id - 1

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index(bus_id)]

    def validate(self) -> None:
        if self.f_base <= 0:
            raise ValidationError("f_base must be positive")
        ids = [b.id for b in self.buses]
        if ids != list(range(1, len(ids) + 1)):
            raise ValidationError("bus ids must be 1..n contiguous and ordered")
        if len(ids) > 1:
            adj: dict[int, list[int]] = {i: [] for i in ids}
            for br in self.branches:
                if br.from_bus in adj and br.to_bus in adj:
                    adj[br.from_bus].append(br.to_bus)
                    adj[br.to_bus].append(br.from_bus)
            seen_ids = {ids[0]}
            stack = [ids[0]]
            while stack:
                for nb in adj[stack.pop()]:
                    if nb not in seen_ids:
                        seen_ids.add(nb)
                        stack.append(nb)
            if len(seen_ids) != len(ids):
                raise ValidationError("branch graph is disconnected")
        slack = [b for b in self.buses if b.kind == "slack"]
        for b in self.buses:
            if b.kind not in BUS_KINDS:
                raise ValidationError(f"bus {b.id}: unknown kind {b.kind!r}")
            if b.kind in ("slack", "generator") and b.v_set <= 0:
                raise ValidationError(f"bus {b.id}: v_set must be positive")
            if b.kind in ("slack", "generator") and b.q_load != 0.0:
                raise ValidationError(
                    f"bus {b.id}: q_load must be 0 at {b.kind} buses"
                )
            if b.kind == "slack" and b.p_load != 0.0:
                raise ValidationError("slack bus must have p_load = 0")
        if len(slack) != 1:
            raise ValidationError(f"need exactly one slack bus, found {len(slack)}")
        seen = set()
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in set(ids):
                    raise ValidationError(f"branch references unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise ValidationError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
            if br.x <= 0:
                raise ValidationError(
                    f"branch {br.from_bus}-{br.to_bus}: x must be positive"
                )
            if br.r < 0:
                raise ValidationError(
                    f"branch {br.from_bus}-{br.to_bus}: r must be nonnegative"
                )
        gen_buses = [g.bus for g in self.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise ValidationError("at most one generator per bus")
        for g in self.generators:
            b = self.bus(g.bus)
            if b.kind == "load":
                raise ValidationError(f"generator at load bus {g.bus}")
            if g.m <= 0 or g.xd_p <= 0 or g.d < 0:
                raise ValidationError(
                    f"generator at bus {g.bus}: need m > 0, xd_p > 0, d >= 0"
                )
            seen.add(g.bus)
        for b in self.buses:
            if b.kind in ("slack", "generator") and b.id not in seen:
                raise ValidationError(f"{b.kind} bus {b.id} has no generator entry")

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "f_base": self.f_base,
            "buses": [
                {
                    "id": b.id,
                    "kind": b.kind,
                    "v_set": b.v_set,
                    "p_load": b.p_load,
                    "q_load": b.q_load,
                    "b_shunt": b.b_shunt,
                }
                for b in self.buses
            ],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x}
                for br in self.branches
            ],
            "generators": [
                {"bus": g.bus, "m": g.m, "d": g.d, "xd_p": g.xd_p}
                for g in self.generators
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GridModel":
        try:
            buses = [
                Bus(
                    id=int(b["id"]),
                    kind=str(b["kind"]),
                    v_set=float(b.get("v_set", 1.0)),
                    p_load=float(b.get("p_load", 0.0)),
                    q_load=float(b.get("q_load", 0.0)),
                    b_shunt=float(b.get("b_shunt", 0.0)),
                )
                for b in doc["buses"]
            ]
            branches = [
                Branch(
                    from_bus=int(br["from"]),
                    to_bus=int(br["to"]),
                    r=float(br["r"]),
                    x=float(br["x"]),
                )
                for br in doc["branches"]
            ]
            generators = [
                Generator(
                    bus=int(g["bus"]),
                    m=float(g["m"]),
                    d=float(g["d"]),
                    xd_p=float(g["xd_p"]),
                )
                for g in doc["generators"]
            ]
            f_base = float(doc["f_base"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed grid document: {exc}") from exc
        return cls(f_base=f_base, buses=buses, branches=branches,
                   generators=generators)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "GridModel":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


@dataclass(frozen=True)
class FaultScenario:
    """Bolted three-phase fault applied at a bus and later cleared.

    The fault is a large shunt conductance ``fault_admittance`` inserted at
    ``fault_bus`` between t_fault and t_clear.
    """

    fault_bus: int
    t_fault: float
    t_clear: float
    fault_admittance: float = 1.0e4

    def __post_init__(self) -> None:
        if self.t_fault < 0 or self.t_clear <= self.t_fault:
            raise ValidationError("need 0 <= t_fault < t_clear")
        if self.fault_admittance <= 0:
            raise ValidationError("fault_admittance must be positive")

    def to_json_dict(self) -> dict:
        return {
            "fault_bus": self.fault_bus,
            "t_fault": self.t_fault,
            "t_clear": self.t_clear,
            "fault_admittance": self.fault_admittance,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FaultScenario":
        try:
            return cls(
                fault_bus=int(doc["fault_bus"]),
                t_fault=float(doc["t_fault"]),
                t_clear=float(doc["t_clear"]),
                fault_admittance=float(doc.get("fault_admittance", 1.0e4)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed scenario: {exc}") from exc

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "FaultScenario":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


@dataclass(frozen=True)
class Partition:
    """Internal/external split with the derived boundary structure.

    ``tie_branches`` are indices into ``grid.branches`` for branches with one
    end in each region, in branch-list order; tie k (1-based) is
    ``tie_branches[k-1]``.  ``ports`` lists the internal endpoint of each tie
    in the same order, so |ports| = |ties| and a bus repeats if it terminates
    several ties.
    """

    internal: tuple[int, ...]
    external: tuple[int, ...]
    tie_branches: tuple[int, ...]
    ports: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {"internal": list(self.internal)}

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, grid: GridModel, path: str) -> "Partition":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        try:
            internal = [int(i) for i in doc["internal"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed partition: {exc}") from exc
        return make_partition(grid, internal)


def make_partition(grid: GridModel, internal_buses: Sequence[int]) -> Partition:
    """Split the grid and derive tie branches and ports.

    The internal set must be a nonempty proper subset of the buses.  Ties
    are branches with exactly one internal endpoint, in branch-list order;
    port k is the internal endpoint of tie k.
    """
    internal = sorted(set(int(b) for b in internal_buses))
    if not internal:
        raise ValidationError("internal bus set is empty")
    all_ids = set(b.id for b in grid.buses)
    unknown = set(internal) - all_ids
    if unknown:
        raise ValidationError(f"internal buses not in grid: {sorted(unknown)}")
    if set(internal) == all_ids:
        raise ValidationError("internal set must leave at least one external bus")
    internal_set = set(internal)
    external = sorted(all_ids - internal_set)
    ties = []
    ports = []
    for idx, br in enumerate(grid.branches):
        f_in = br.from_bus in internal_set
        t_in = br.to_bus in internal_set
        if f_in != t_in:
            ties.append(idx)
            ports.append(br.from_bus if f_in else br.to_bus)
    if not ties:
        raise ValidationError("partition has no tie branches")
    return Partition(
        internal=tuple(internal),
        external=tuple(external),
        tie_branches=tuple(ties),
        ports=tuple(ports),
    )


def build_ybus(
    grid: GridModel,
    fault: FaultScenario | None = None,
    active: bool = True,
    bus_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Assemble the complex bus admittance matrix.

    With an active fault, the fault admittance enters the fault bus diagonal
    as a pure conductance.  With ``bus_ids`` given, only branches with both
    ends inside the subset are included and the matrix is indexed in the
    order of ``bus_ids`` (shunts of the selected buses are kept).
    """
    if bus_ids is None:
        bus_ids = [b.id for b in grid.buses]
    bus_ids = list(bus_ids)
    pos = {bid: k for k, bid in enumerate(bus_ids)}
    if len(pos) != len(bus_ids):
        raise ValidationError("duplicate ids in bus subset")
    n = len(bus_ids)
    y = np.zeros((n, n), dtype=complex)
    for br in grid.branches:
        if br.from_bus in pos and br.to_bus in pos:
            i, j = pos[br.from_bus], pos[br.to_bus]
            ys = br.y_series
            y[i, i] += ys
            y[j, j] += ys
            y[i, j] -= ys
            y[j, i] -= ys
    for bid in bus_ids:
        b = grid.bus(bid)
        y[pos[bid], pos[bid]] += 1j * b.b_shunt
    if fault is not None and active:
        if fault.fault_bus not in pos:
            raise ValidationError(
                f"fault bus {fault.fault_bus} outside modeled region"
            )
        y[pos[fault.fault_bus], pos[fault.fault_bus]] += fault.fault_admittance
    return y


@dataclass
class PowerFlowSolution:
    v: np.ndarray            # complex bus voltages, grid order
    s_inj: np.ndarray        # complex net injections, grid order
    s_gen: np.ndarray        # complex machine outputs, generator order
    iterations: int
    mismatch: float


def solve_power_flow(
    grid: GridModel, tol: float = 1.0e-10, max_iters: int = 50
) -> PowerFlowSolution:
    """Polar Newton-Raphson power flow.

    Unknowns are the angles at all non-slack buses and the magnitudes at
    load buses.  Scheduled injections come from the load columns
    (generation as negative load).  Raises NumericalError when the mismatch
    does not drop below ``tol`` within ``max_iters``.
    """
    n = grid.n_buses
    y = build_ybus(grid)
    kinds = [b.kind for b in grid.buses]
    slack = kinds.index("slack")
    pv = [i for i, k in enumerate(kinds) if k == "generator"]
    pq = [i for i, k in enumerate(kinds) if k == "load"]
    ang_idx = [i for i in range(n) if i != slack]
    mag_idx = list(pq)

    s_sched = np.array(
        [complex(-b.p_load, -b.q_load) for b in grid.buses], dtype=complex
    )
    theta = np.zeros(n)
    vm = np.array([b.v_set if b.kind != "load" else 1.0 for b in grid.buses])

    mismatch = np.inf
    for it in range(max_iters + 1):
        v = vm * np.exp(1j * theta)
        i_inj = y @ v
        s = v * np.conj(i_inj)
        dp = s_sched.real[ang_idx] - s.real[ang_idx]
        dq = s_sched.imag[mag_idx] - s.imag[mag_idx]
        f = np.concatenate([dp, dq])
        mismatch = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch < tol:
            s_gen = np.array(
                [s[grid.bus_index(g.bus)] for g in grid.generators], dtype=complex
            )
            return PowerFlowSolution(
                v=v, s_inj=s, s_gen=s_gen, iterations=it, mismatch=mismatch
            )
        if it == max_iters:
            break
        # complex-form jacobian of S(theta, |V|)
        dv_dth = 1j * np.diag(v)
        ds_dth = dv_dth @ np.conj(np.diag(i_inj)) - 1j * np.diag(v) @ np.conj(
            y @ np.diag(v)
        )
        e = v / vm
        ds_dvm = np.diag(v) @ np.conj(y @ np.diag(e)) + np.diag(np.conj(i_inj)) @ np.diag(e)
        jac = np.block(
            [
                [ds_dth.real[np.ix_(ang_idx, ang_idx)], ds_dvm.real[np.ix_(ang_idx, mag_idx)]],
                [ds_dth.imag[np.ix_(mag_idx, ang_idx)], ds_dvm.imag[np.ix_(mag_idx, mag_idx)]],
            ]
        )
        try:
            step = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"power flow jacobian singular: {exc}") from exc
        theta[ang_idx] += step[: len(ang_idx)]
        vm[mag_idx] += step[len(ang_idx):]
        if np.any(vm <= 0):
            raise NumericalError("power flow produced nonpositive voltage magnitude")

    raise NumericalError(
        f"power flow did not converge: mismatch {mismatch:.3e} after {max_iters} iterations"
    )


def electrical_distance_matrix(grid: GridModel) -> dict[int, dict[int, float]]:
    """Adjacency map bus -> neighbor -> reactance weight.

    Parallel branches between the same pair combine like parallel reactances
    (reciprocal sum), matching the series-impedance view of closeness.
    """
    adj: dict[int, dict[int, float]] = {b.id: {} for b in grid.buses}
    for br in grid.branches:
        w = abs(br.x)
        prev = adj[br.from_bus].get(br.to_bus)
        if prev is None:
            adj[br.from_bus][br.to_bus] = w
            adj[br.to_bus][br.from_bus] = w
        else:
            comb = 1.0 / (1.0 / prev + 1.0 / w)
            adj[br.from_bus][br.to_bus] = comb
            adj[br.to_bus][br.from_bus] = comb
    return adj
