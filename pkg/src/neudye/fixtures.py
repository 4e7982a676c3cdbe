"""Built-in desk-scale study systems.

Three fixtures cover the test surface: a ten-bus two-area system with two
tie lines (the workhorse for boundary-learning studies), a nine-bus
three-machine system, and a small four-bus grid whose external side is
replaced by a synthetic linear port model with a known admittance coupling
so identification results can be checked against ground truth.

The internal regions are dispatched to import power over the ties.  With
the boundary current frozen, an importing region keeps a restoring torque
on its common angle mode, so the frozen-boundary equilibrium is a stable
point; exporting regions lose that property and drift away from any
roundoff-level disturbance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from neudye.errors import ValidationError
from neudye.grid import (
    Branch,
    Bus,
    Generator,
    GridModel,
    Partition,
    make_partition,
    solve_power_flow,
)
from neudye.simulator import (
    FaultScenario,
    SimConfig,
    Trajectory,
    affine_deriv,
    boundary_equilibrium,
    coupled_trajectory,
    internal_region,
    pack_complex,
    regime_schedule,
    simulate_coupled,
)
from neudye import neuralnet

FIXTURE_NAMES = ("two-area-4m", "nine-bus-3m", "linear-port-synth")


def port_feature_channels(partition: Partition) -> list[str]:
    """Port-voltage channel names in tie order, the default net input."""
    out = []
    for k in range(1, len(partition.tie_branches) + 1):
        out += [f"port{k}.v.re", f"port{k}.v.im"]
    return out


def two_area_4m() -> tuple[GridModel, Partition]:
    """Ten-bus, four-machine, two-area system joined by two tie lines.

    Area 1 (buses 1-7, machines at 1 and 2) is the internal region; it
    imports roughly 0.5 pu from area 2 (buses 8-10).  Seven internal buses
    leave room for fault placements the training protocol never saw.
    """
    buses = [
        Bus(1, "generator", v_set=1.03, p_load=-1.2),
        Bus(2, "generator", v_set=1.02, p_load=-1.0),
        Bus(3, "load", p_load=0.5, q_load=0.1),
        Bus(4, "load", p_load=0.45, q_load=0.12),
        Bus(5, "load", p_load=0.7, q_load=0.2),
        Bus(6, "load", p_load=0.65, q_load=0.18),
        Bus(7, "load", p_load=0.4, q_load=0.1),
        Bus(8, "load", p_load=0.9, q_load=0.2),
        Bus(9, "generator", v_set=1.02, p_load=-0.8),
        Bus(10, "slack", v_set=1.0),
    ]
    branches = [
        Branch(1, 3, 0.002, 0.06),
        Branch(2, 4, 0.002, 0.06),
        Branch(3, 4, 0.010, 0.11),
        Branch(3, 5, 0.008, 0.09),
        Branch(4, 6, 0.008, 0.095),
        Branch(5, 6, 0.012, 0.13),
        Branch(5, 7, 0.006, 0.07),
        Branch(6, 7, 0.009, 0.10),
        Branch(7, 8, 0.012, 0.22),
        Branch(6, 8, 0.014, 0.24),
        Branch(8, 9, 0.004, 0.08),
        Branch(8, 10, 0.004, 0.08),
        Branch(9, 10, 0.010, 0.12),
    ]
    generators = [
        Generator(bus=1, m=13.0, d=9.0, xd_p=0.25),
        Generator(bus=2, m=12.0, d=8.0, xd_p=0.25),
        Generator(bus=9, m=12.0, d=8.0, xd_p=0.25),
        Generator(bus=10, m=22.0, d=12.0, xd_p=0.20),
    ]
    grid = GridModel(f_base=60.0, buses=buses, branches=branches,
                     generators=generators)
    partition = make_partition(grid, [1, 2, 3, 4, 5, 6, 7])
    return grid, partition


def nine_bus_3m() -> tuple[GridModel, Partition]:
    """Nine-bus, three-machine system; the region around machine 3 is
    internal, reached through two tie lines with distinct port buses."""
    buses = [
        Bus(1, "slack", v_set=1.04),
        Bus(2, "generator", v_set=1.025, p_load=-1.63),
        Bus(3, "generator", v_set=1.025, p_load=-0.85),
        Bus(4, "load"),
        Bus(5, "load", p_load=1.25, q_load=0.5),
        Bus(6, "load", p_load=0.9, q_load=0.3),
        Bus(7, "load"),
        Bus(8, "load", p_load=1.0, q_load=0.35),
        Bus(9, "load"),
    ]
    branches = [
        Branch(1, 4, 0.0, 0.0576),
        Branch(2, 7, 0.0, 0.0625),
        Branch(3, 9, 0.0, 0.0586),
        Branch(4, 5, 0.010, 0.085),
        Branch(4, 6, 0.017, 0.092),
        Branch(5, 7, 0.032, 0.161),
        Branch(6, 9, 0.039, 0.170),
        Branch(7, 8, 0.0085, 0.072),
        Branch(8, 9, 0.0119, 0.1008),
    ]
    generators = [
        Generator(bus=1, m=47.28, d=10.0, xd_p=0.0608),
        Generator(bus=2, m=12.80, d=5.0, xd_p=0.1198),
        Generator(bus=3, m=6.02, d=2.0, xd_p=0.1813),
    ]
    grid = GridModel(f_base=60.0, buses=buses, branches=branches,
                     generators=generators)
    partition = make_partition(grid, [3, 8, 9])
    return grid, partition


@dataclass(frozen=True)
class LinearExternal:
    """Ground-truth linear port model: the boundary current splits as
    i_tie = i_cs + d @ v_p with the continuous part driven by the affine
    system d(i_cs)/dt = a @ i_cs + b @ v_p + c (interleaved re/im blocks).

    x_eq is the equilibrium i_cs; c is chosen so the power-flow operating
    point of the host grid is an exact fixed point.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    x_eq: np.ndarray

    @property
    def n_ports(self) -> int:
        return self.d.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "d": [[{"re": float(v.real), "im": float(v.imag)} for v in row]
                  for row in self.d],
            "x_eq": self.x_eq.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "LinearExternal":
        try:
            d = np.asarray(
                [[complex(v["re"], v["im"]) for v in row] for row in doc["d"]]
            )
            return cls(
                a=np.asarray(doc["a"], dtype=float),
                b=np.asarray(doc["b"], dtype=float),
                c=np.asarray(doc["c"], dtype=float),
                d=d,
                x_eq=np.asarray(doc["x_eq"], dtype=float),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed linear external: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LinearExternal":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def exact_net(self, partition: Partition) -> neuralnet.NeuralEquivalence:
        """Single affine layer reproducing the ground-truth map exactly."""
        n = 2 * self.n_ports
        w = np.concatenate([self.a, self.b], axis=1)
        theta = np.concatenate([w.ravel(), self.c])
        return neuralnet.NeuralEquivalence(
            layer_sizes=[2 * n, n],
            activation="tanh",
            feature_spec=port_feature_channels(partition),
            theta=theta,
        )


def linear_port_synth() -> tuple[GridModel, Partition, LinearExternal]:
    """Four-bus host grid plus a synthetic linear external port model.

    The grid's external side (buses 3-4) only serves to pin down a
    consistent operating point; ground-truth runs replace it with the
    returned LinearExternal, whose admittance coupling d is known exactly.
    """
    buses = [
        Bus(1, "generator", v_set=1.03, p_load=-0.55),
        Bus(2, "load", p_load=0.75, q_load=0.2),
        Bus(3, "load", p_load=0.5, q_load=0.15),
        Bus(4, "slack", v_set=1.0),
    ]
    branches = [
        Branch(1, 2, 0.005, 0.10),
        Branch(1, 3, 0.015, 0.30),
        Branch(2, 4, 0.018, 0.35),
        Branch(3, 4, 0.008, 0.15),
    ]
    generators = [
        Generator(bus=1, m=8.0, d=5.0, xd_p=0.25),
        Generator(bus=4, m=12.0, d=6.0, xd_p=0.20),
    ]
    grid = GridModel(f_base=60.0, buses=buses, branches=branches,
                     generators=generators)
    partition = make_partition(grid, [1, 2])
    # stable spiral blocks; time constants well above the default step
    a = np.array([
        [-2.0, 5.0, 0.0, 0.0],
        [-5.0, -2.0, 0.0, 0.0],
        [0.0, 0.0, -3.5, 8.0],
        [0.0, 0.0, -8.0, -3.5],
    ])
    b = np.array([
        [0.60, -0.30, 0.20, 0.10],
        [0.25, 0.55, -0.15, 0.20],
        [-0.10, 0.20, 0.45, -0.25],
        [0.15, -0.20, 0.30, 0.50],
    ])
    d = np.array([
        [-0.22 + 3.1j, 0.04 - 0.55j],
        [0.04 - 0.55j, -0.18 + 2.6j],
    ])
    pf = solve_power_flow(grid)
    vp0, it0 = boundary_equilibrium(grid, partition, pf)
    x_eq = pack_complex(it0 - d @ vp0)
    z_eq = pack_complex(vp0)
    c = -(a @ x_eq) - (b @ z_eq)
    lin = LinearExternal(a=a, b=b, c=c, d=d, x_eq=x_eq)
    return grid, partition, lin


def simulate_full_linear(grid: GridModel, partition: Partition,
                         lin: LinearExternal,
                         scenario: FaultScenario | None,
                         cfg: SimConfig) -> Trajectory:
    """Reference run: internal physics coupled to the exact linear external.

    This is the ground truth that hybrid runs with an identified port model
    are compared against; it exercises the same coupled stepping core, so
    agreement isolates the quality of the identified (d, net) pair.
    """
    pf, region = internal_region(grid, partition, d_fold=lin.d)
    selector = region.compile_selector(port_feature_channels(partition))
    vp0, it0 = boundary_equilibrium(grid, partition, pf)
    u0 = pack_complex(it0 - lin.d @ vp0)
    x0 = np.concatenate([region.delta0, np.zeros(region.n_mach)])
    schedule = regime_schedule([scenario], cfg.n_steps, cfg.dt)
    run = simulate_coupled(region, selector, affine_deriv(lin.a, lin.b, lin.c),
                           x0[None], u0[None], schedule, cfg)
    return coupled_trajectory(grid, partition, run, d_matrix=lin.d,
                              scenario=scenario, kind="full-linear")


def get_fixture(name: str):
    """Resolve a fixture by CLI name.

    Returns (grid, partition, extra) where extra is the LinearExternal for
    the synthetic-port fixture and None otherwise.
    """
    if name == "two-area-4m":
        grid, partition = two_area_4m()
        return grid, partition, None
    if name == "nine-bus-3m":
        grid, partition = nine_bus_3m()
        return grid, partition, None
    if name == "linear-port-synth":
        return linear_port_synth()
    raise ValidationError(
        f"unknown fixture {name!r}; expected one of {', '.join(FIXTURE_NAMES)}"
    )
