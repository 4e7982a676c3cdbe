"""Machine dynamics coupled to the algebraic network, with exact jacobians.

Machines are classical second-order models: constant EMF magnitude behind
transient reactance, swing equation in per unit,

    d(delta)/dt = omega_s * omega_dev
    d(omega_dev)/dt = (p_mech - p_elec - d * omega_dev) / m

with p_elec = Re{E'<delta * conj((E'<delta - V_bus) / (j xd_p))}.  Loads at
load-kind buses fold into the admittance matrix as constant impedances at
their power-flow voltage; machines enter as Norton pairs (E'<delta/(j xd_p)
source current, 1/(j xd_p) shunt), so every regime's network equation is a
single linear solve Y_aug V = I(x) + scatter(u).

``u`` is the boundary injection state as an interleaved real vector
[re1, im1, re2, im2, ...], one pair per tie; tie k injects at the region bus
``ports[k-1]`` (several ties may share a bus).  Eliminating V yields the
reduced field P~(x, u) and the feature map z(x, u); RegionDae precomputes
per regime the inverse-admittance columns that make both jacobians small
dense products.  State-dependent operations broadcast over leading batch
axes, and the regime argument may carry stacked per-batch matrices.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from neudye.errors import NumericalError, ValidationError
from neudye.grid import FaultScenario, GridModel, Partition, PowerFlowSolution, build_ybus

COND_LIMIT = 1.0e12


@dataclass
class MachineState:
    """Rotor angles (rad, unwrapped) and speed deviations (pu)."""

    delta: np.ndarray
    omega_dev: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.delta, self.omega_dev])

    @classmethod
    def unpack(cls, x: np.ndarray) -> "MachineState":
        g = x.shape[-1] // 2
        return cls(delta=x[..., :g], omega_dev=x[..., g:])


@dataclass
class AlgebraicState:
    """Complex bus voltages of a modeled region, region bus order."""

    bus_voltages: np.ndarray
    residual: float = 0.0


@dataclass
class TieInjection:
    """Complex boundary currents, one per tie, oriented external->internal."""

    currents: np.ndarray

    def pack(self) -> np.ndarray:
        out = np.empty(self.currents.shape[:-1] + (2 * self.currents.shape[-1],))
        out[..., 0::2] = self.currents.real
        out[..., 1::2] = self.currents.imag
        return out

    @classmethod
    def unpack(cls, u: np.ndarray) -> "TieInjection":
        return cls(currents=u[..., 0::2] + 1j * u[..., 1::2])


@dataclass
class MachineInit:
    """Equilibrium machine data in grid generator order."""

    delta0: np.ndarray
    omega0: np.ndarray
    emf: np.ndarray
    p_mech: np.ndarray


def init_states(grid: GridModel, pf: PowerFlowSolution) -> MachineInit:
    """Initialize classical machines from a solved power flow.

    E'<delta = V + j xd_p conj(S_gen)/conj(V); p_mech is the electrical
    power evaluated through the machine equations themselves so the
    power-flow point is an exact equilibrium of the integrator.
    """
    g = len(grid.generators)
    delta0 = np.zeros(g)
    emf = np.zeros(g)
    p_mech = np.zeros(g)
    for k, gen in enumerate(grid.generators):
        v = pf.v[grid.bus_index(gen.bus)]
        if abs(v) < 1.0e-6:
            raise ValidationError(
                f"generator at bus {gen.bus}: terminal voltage is zero"
            )
        e = v + 1j * gen.xd_p * np.conj(pf.s_gen[k]) / np.conj(v)
        delta0[k] = np.angle(e)
        emf[k] = abs(e)
        scale = emf[k] / gen.xd_p
        c_hat = scale * (np.sin(delta0[k]) + 1j * np.cos(delta0[k]))
        p_mech[k] = (c_hat * v).real
    return MachineInit(delta0=delta0, omega0=np.zeros(g), emf=emf, p_mech=p_mech)


# ---------------------------------------------------------------------------
# channel grammar

_CHANNEL_RE = re.compile(
    r"^(gen|bus|port|tie|tiecs|line)(\d+)\.(delta|omega|v\.re|v\.im|i\.re|i\.im)$"
)

_CHANNEL_QUANTITIES = {
    "gen": ("delta", "omega"),
    "bus": ("v.re", "v.im"),
    "port": ("v.re", "v.im"),
    "tie": ("i.re", "i.im"),
    "tiecs": ("i.re", "i.im"),
    "line": ("i.re", "i.im"),
}


def parse_channel(name: str) -> tuple[str, int, str]:
    """Split a channel name into (family, 1-based index, quantity)."""
    m = _CHANNEL_RE.match(name)
    if not m:
        raise ValidationError(f"unknown channel name {name!r}")
    fam, idx, quant = m.group(1), int(m.group(2)), m.group(3)
    if quant not in _CHANNEL_QUANTITIES[fam]:
        raise ValidationError(f"channel {name!r}: {fam} has no quantity {quant}")
    return fam, idx, quant


# ---------------------------------------------------------------------------
# compiled feature selector


class CompiledSelector:
    """Feature channels resolved against a region.

    Each row resolves to one of
      ('x', i)          machine state component
      ('u', i)          boundary state component
      ('v', w, part)    Re or Im of a fixed complex functional of V
    covering machine states, boundary injections, bus/port voltages, and
    line currents.  Values and jacobians evaluate in vectorized form.
    """

    def __init__(self, region: "RegionDae", channels: list[str]):
        self.channels = list(channels)
        self.region = region
        rows = [region._resolve_channel(name) for name in channels]
        self.size = len(rows)
        self._x_rows = [(r, spec[1]) for r, spec in enumerate(rows) if spec[0] == "x"]
        self._u_rows = [(r, spec[1]) for r, spec in enumerate(rows) if spec[0] == "u"]
        v_rows = [(r, spec[1], spec[2]) for r, spec in enumerate(rows) if spec[0] == "v"]
        self._v_idx = np.array([r for r, _, _ in v_rows], dtype=int)
        self._v_re = np.array([part == "re" for _, _, part in v_rows], dtype=bool)
        n = len(region.bus_ids)
        self._wv = np.zeros((len(v_rows), n), dtype=complex)
        for j, (_, w, _) in enumerate(v_rows):
            self._wv[j] = w
        m = 2 * region.n_mach
        t2 = 2 * region.n_ties
        self._zx_const = np.zeros((self.size, m))
        self._zu_const = np.zeros((self.size, t2))
        for r, i in self._x_rows:
            self._zx_const[r, i] = 1.0
        for r, i in self._u_rows:
            self._zu_const[r, i] = 1.0


class _Regime:
    """Per-switching-state network factorization and derived blocks."""

    def __init__(self, region: "RegionDae", y: np.ndarray):
        self.y = y
        cond = np.linalg.cond(y)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise NumericalError(
                f"network matrix singular or near singular (cond ~ {cond:.3e})"
            )
        self.yinv = np.linalg.inv(y)
        self.w_mach = self.yinv[:, region.mach_loc]          # (n, g)
        self.w_port = self.yinv[:, region.port_loc]          # (n, t)
        self.wm = self.w_mach[region.mach_loc, :]            # (g, g)
        self.wp = self.w_port[region.mach_loc, :]            # (g, t)
        self._sel_cache: dict[int, tuple] = {}

    def selector_blocks(self, sel: CompiledSelector) -> tuple:
        """Constant per-regime pieces of the feature jacobians.

        Returns (a_m, zu_v): a_m (sv, g) complex couples voltage features to
        machine angles; zu_v (sv, 2t) real is the constant feature/u block.
        """
        key = id(sel)
        hit = self._sel_cache.get(key)
        if hit is not None:
            return hit
        a_m = sel._wv @ self.w_mach
        a_p = sel._wv @ self.w_port                           # (sv, t) complex
        sv = sel._wv.shape[0]
        zu_v = np.zeros((sv, 2 * a_p.shape[1]))
        re = sel._v_re[:, None] if sv else np.zeros((0, 1), dtype=bool)
        zu_v[:, 0::2] = np.where(re, a_p.real, a_p.imag)
        zu_v[:, 1::2] = np.where(re, -a_p.imag, a_p.real)
        out = (a_m, zu_v)
        self._sel_cache[key] = out
        return out


class RegimeStack:
    """Per-batch-row regime matrices gathered for vectorized stepping.

    Quacks like _Regime for the vectorized RegionDae methods: attributes
    carry a leading batch axis so matmul/broadcast rules do the fan-out.
    """

    def __init__(self, regimes: list[_Regime], sel: CompiledSelector | None = None):
        self.y = np.stack([r.y for r in regimes])
        self.yinv = np.stack([r.yinv for r in regimes])
        self.w_mach = np.stack([r.w_mach for r in regimes])
        self.w_port = np.stack([r.w_port for r in regimes])
        self.wm = np.stack([r.wm for r in regimes])
        self.wp = np.stack([r.wp for r in regimes])
        self._blocks = None
        if sel is not None:
            parts = [r.selector_blocks(sel) for r in regimes]
            self._blocks = (
                np.stack([p[0] for p in parts]),
                np.stack([p[1] for p in parts]),
            )

    def selector_blocks(self, sel: CompiledSelector) -> tuple:
        if self._blocks is None:
            raise ValidationError("regime stack built without a selector")
        return self._blocks


class RegionDae:
    """A bus subset with its machines, boundary ports, and load model.

    ``d_fold`` subtracts a complex t x t matrix from the port block of the
    admittance matrix (driving-port coupling).  Regimes compile lazily per
    fault placement and are cached on the region.
    """

    def __init__(
        self,
        grid: GridModel,
        pf: PowerFlowSolution,
        bus_ids=None,
        ports: tuple[int, ...] = (),
        d_fold: np.ndarray | None = None,
    ):
        self.grid = grid
        self.pf = pf
        if bus_ids is None:
            bus_ids = [b.id for b in grid.buses]
        self.bus_ids = tuple(sorted(bus_ids))
        self.pos = {bid: k for k, bid in enumerate(self.bus_ids)}
        self.omega_s = grid.omega_s
        n = len(self.bus_ids)

        init = init_states(grid, pf)
        sel = [k for k, gen in enumerate(grid.generators) if gen.bus in self.pos]
        self.gen_gidx = tuple(sel)
        self.n_mach = len(sel)
        self.mach_loc = np.array(
            [self.pos[grid.generators[k].bus] for k in sel], dtype=int
        )
        self.minv = np.array([1.0 / grid.generators[k].m for k in sel])
        self.damp = np.array([grid.generators[k].d for k in sel])
        self.xdp = np.array([grid.generators[k].xd_p for k in sel])
        self.emf = init.emf[sel]
        self.p_mech = init.p_mech[sel]
        self.delta0 = init.delta0[sel]
        self.nscale = self.emf / self.xdp

        for p in ports:
            if p not in self.pos:
                raise ValidationError(f"port bus {p} outside the region")
        self.ports = tuple(ports)
        self.n_ties = len(self.ports)
        self.port_loc = np.array([self.pos[p] for p in self.ports], dtype=int)
        # dense scatter of per-tie complex injections onto region buses
        scatter = np.zeros((n, self.n_ties))
        for j, loc in enumerate(self.port_loc):
            scatter[loc, j] += 1.0
        self._scatter = scatter

        self.d_fold = None if d_fold is None else np.asarray(d_fold, dtype=complex)
        if self.d_fold is not None and self.d_fold.shape != (self.n_ties, self.n_ties):
            raise ValidationError(
                f"d_fold must be ({self.n_ties}, {self.n_ties}), "
                f"got {self.d_fold.shape}"
            )

        y = build_ybus(grid, bus_ids=list(self.bus_ids))
        for bid in self.bus_ids:
            b = grid.bus(bid)
            if b.kind == "load" and (b.p_load != 0.0 or b.q_load != 0.0):
                v0 = abs(pf.v[grid.bus_index(bid)])
                y[self.pos[bid], self.pos[bid]] += complex(b.p_load, -b.q_load) / v0**2
        for k, loc in enumerate(self.mach_loc):
            y[loc, loc] += 1.0 / (1j * self.xdp[k])
        if self.d_fold is not None:
            np.add.at(y, (self.port_loc[:, None], self.port_loc[None, :]),
                      -self.d_fold)
        self._y_base = y
        self._regimes: dict = {}

    # -- regimes -----------------------------------------------------------

    def regime(self, fault_bus: int | None = None,
               fault_admittance: float = 1.0e4) -> _Regime:
        key = (fault_bus, fault_admittance)
        hit = self._regimes.get(key)
        if hit is not None:
            return hit
        y = self._y_base.copy()
        if fault_bus is not None:
            if fault_bus not in self.pos:
                raise ValidationError(
                    f"fault bus {fault_bus} outside modeled region"
                )
            y[self.pos[fault_bus], self.pos[fault_bus]] += fault_admittance
        reg = _Regime(self, y)
        self._regimes[key] = reg
        return reg

    def scenario_regime(self, scenario: FaultScenario | None) -> _Regime:
        if scenario is None:
            return self.regime(None)
        return self.regime(scenario.fault_bus, scenario.fault_admittance)

    # -- channel resolution --------------------------------------------------

    def u_channels(self, source: bool = False) -> list[str]:
        fam = "tiecs" if source else "tie"
        out = []
        for k in range(1, self.n_ties + 1):
            out.append(f"{fam}{k}.i.re")
            out.append(f"{fam}{k}.i.im")
        return out

    def _resolve_channel(self, name: str):
        fam, idx, quant = parse_channel(name)
        n = len(self.bus_ids)
        if fam == "gen":
            if idx - 1 not in self.gen_gidx:
                raise ValidationError(f"channel {name!r}: machine not in region")
            k = self.gen_gidx.index(idx - 1)
            return ("x", k if quant == "delta" else self.n_mach + k)
        if fam == "bus":
            if idx not in self.pos:
                raise ValidationError(f"channel {name!r}: bus not in region")
            w = np.zeros(n, dtype=complex)
            w[self.pos[idx]] = 1.0
            return ("v", w, quant[-2:])
        if fam == "port":
            if not 1 <= idx <= self.n_ties:
                raise ValidationError(f"channel {name!r}: region has no port {idx}")
            w = np.zeros(n, dtype=complex)
            w[self.port_loc[idx - 1]] = 1.0
            return ("v", w, quant[-2:])
        if fam in ("tie", "tiecs"):
            if not 1 <= idx <= self.n_ties:
                raise ValidationError(f"channel {name!r}: region has no tie {idx}")
            return ("u", 2 * (idx - 1) + (0 if quant.endswith("re") else 1))
        if fam == "line":
            if not 1 <= idx <= len(self.grid.branches):
                raise ValidationError(f"channel {name!r}: no such branch")
            br = self.grid.branches[idx - 1]
            if br.from_bus not in self.pos or br.to_bus not in self.pos:
                raise ValidationError(
                    f"channel {name!r}: branch endpoints not both in region"
                )
            w = np.zeros(n, dtype=complex)
            w[self.pos[br.from_bus]] = br.y_series
            w[self.pos[br.to_bus]] = -br.y_series
            return ("v", w, quant[-2:])
        raise ValidationError(f"unknown channel name {name!r}")

    def compile_selector(self, channels: list[str]) -> CompiledSelector:
        return CompiledSelector(self, channels)

    def tie_current_weights(self, partition: Partition) -> np.ndarray:
        """Complex weights mapping full-grid V to tie currents into InSys.

        Requires the region to contain both tie endpoints (the full grid).
        """
        n = len(self.bus_ids)
        internal = set(partition.internal)
        w = np.zeros((len(partition.tie_branches), n), dtype=complex)
        for k, bidx in enumerate(partition.tie_branches):
            br = self.grid.branches[bidx]
            if br.from_bus not in self.pos or br.to_bus not in self.pos:
                raise ValidationError("tie endpoints not both in region")
            p = br.from_bus if br.from_bus in internal else br.to_bus
            e = br.to_bus if p == br.from_bus else br.from_bus
            w[k, self.pos[e]] += br.y_series
            w[k, self.pos[p]] -= br.y_series
        return w

    # -- vectorized physics --------------------------------------------------

    def norton(self, delta: np.ndarray) -> np.ndarray:
        """Machine Norton source currents E'<delta / (j xd_p), complex (..., g)."""
        return self.nscale * (np.sin(delta) - 1j * np.cos(delta))

    def _chat(self, delta: np.ndarray) -> np.ndarray:
        # p_elec = Re{chat * V_machine_bus}
        return self.nscale * (np.sin(delta) + 1j * np.cos(delta))

    def injections(self, delta: np.ndarray, u: np.ndarray) -> np.ndarray:
        n = len(self.bus_ids)
        lead = np.broadcast_shapes(delta.shape[:-1], u.shape[:-1])
        inj = np.zeros(lead + (n,), dtype=complex)
        if self.n_mach:
            inj[..., self.mach_loc] = np.broadcast_to(
                self.norton(delta), lead + (self.n_mach,)
            )
        if self.n_ties:
            uc = u[..., 0::2] + 1j * u[..., 1::2]
            inj += uc @ self._scatter.T
        return inj

    def solve(self, regime, delta: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Region bus voltages, complex (..., n)."""
        inj = self.injections(delta, u)
        return (regime.yinv @ inj[..., None])[..., 0]

    def pe(self, delta: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Electrical power per machine from region voltages (..., n)."""
        return (self._chat(delta) * v[..., self.mach_loc]).real

    def rhs(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Machine vector field from states and solved voltages."""
        g = self.n_mach
        delta, omega = x[..., :g], x[..., g:]
        lead = np.broadcast_shapes(x.shape[:-1], v.shape[:-1])
        out = np.empty(lead + (2 * g,))
        out[..., :g] = self.omega_s * omega
        out[..., g:] = (self.p_mech - self.pe(delta, v) - self.damp * omega) * self.minv
        return out

    def rhs_u(self, regime, x: np.ndarray, u: np.ndarray):
        """Reduced vector field P~(x, u); returns (dxdt, v)."""
        v = self.solve(regime, x[..., :self.n_mach], u)
        return self.rhs(x, v), v

    def jacobians(self, regime, x: np.ndarray, u: np.ndarray,
                  v: np.ndarray | None = None):
        """(J_x, J_u) of the reduced field, (..., m, m) and (..., m, 2t)."""
        g = self.n_mach
        m = 2 * g
        t2 = 2 * self.n_ties
        delta = x[..., :g]
        if v is None:
            v = self.solve(regime, delta, u)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        jx = np.zeros(lead + (m, m))
        ju = np.zeros(lead + (m, t2))
        if g == 0:
            return jx, ju
        chat = self._chat(delta)
        dchat = self.nscale * (np.cos(delta) - 1j * np.sin(delta))
        di = self.nscale * np.exp(1j * delta)          # d(norton)/d(delta)
        vm = v[..., self.mach_loc]
        # dpe/ddelta: coupling through the network solve plus the direct term
        dpe_dd = (chat[..., :, None] * regime.wm * di[..., None, :]).real
        idx = np.arange(g)
        direct = (dchat * vm).real
        dpe_dd[..., idx, idx] += direct
        base = chat[..., :, None] * regime.wp          # (..., g, t) complex
        dpe_du = np.empty(lead + (g, t2))
        dpe_du[..., 0::2] = base.real
        dpe_du[..., 1::2] = -base.imag
        jx[..., :g, g:] = self.omega_s * np.eye(g)
        jx[..., g:, :g] = -self.minv[:, None] * dpe_dd
        jx[..., g:, g:] = -np.diag(self.minv * self.damp)
        ju[..., g:, :] = -self.minv[:, None] * dpe_du
        return jx, ju

    def features(self, sel: CompiledSelector, regime, x: np.ndarray,
                 u: np.ndarray, v: np.ndarray | None = None) -> np.ndarray:
        """Feature vector z (..., s)."""
        if v is None:
            v = self.solve(regime, x[..., :self.n_mach], u)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], v.shape[:-1])
        z = np.zeros(lead + (sel.size,))
        for r, i in sel._x_rows:
            z[..., r] = x[..., i]
        for r, i in sel._u_rows:
            z[..., r] = u[..., i]
        if len(sel._v_idx):
            c = v @ sel._wv.T
            z[..., sel._v_idx] = np.where(sel._v_re, c.real, c.imag)
        return z

    def feature_jacobians(self, sel: CompiledSelector, regime,
                          x: np.ndarray, u: np.ndarray):
        """(Z_x, Z_u), (..., s, m) and (..., s, 2t)."""
        g = self.n_mach
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        zx = np.broadcast_to(sel._zx_const, lead + sel._zx_const.shape).copy()
        zu = np.broadcast_to(sel._zu_const, lead + sel._zu_const.shape).copy()
        if len(sel._v_idx):
            a_m, zu_v = regime.selector_blocks(sel)
            zu[..., sel._v_idx, :] += zu_v
            if g:
                di = self.nscale * np.exp(1j * x[..., None, :g])   # (..., 1, g)
                block = a_m * di                                    # (..., sv, g)
                vals = np.where(sel._v_re[:, None], block.real, block.imag)
                zx[..., sel._v_idx, :g] += vals
        return zx, zu


# ---------------------------------------------------------------------------
# public functional wrappers


def solve_network(region: RegionDae, x: np.ndarray,
                  tie_injections: TieInjection | np.ndarray | None = None,
                  scenario: FaultScenario | None = None) -> AlgebraicState:
    """Solve the region network equations; asserts the linear-solve residual."""
    if tie_injections is None:
        u = np.zeros(2 * region.n_ties)
    elif isinstance(tie_injections, TieInjection):
        u = tie_injections.pack()
    else:
        u = np.asarray(tie_injections, dtype=float)
    regime = region.scenario_regime(scenario)
    v = region.solve(regime, x[..., :region.n_mach], u)
    inj = region.injections(x[..., :region.n_mach], u)
    res = float(np.max(np.abs((regime.y @ v[..., None])[..., 0] - inj))) if v.size else 0.0
    if res > 1.0e-10:
        raise NumericalError(f"network solve residual {res:.3e} exceeds 1e-10")
    return AlgebraicState(bus_voltages=v, residual=res)


def rhs_internal(region: RegionDae, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Machine vector field given already-solved voltages."""
    return region.rhs(x, v)


def eliminated_jacobians(region: RegionDae, x: np.ndarray, u: np.ndarray,
                         selector: CompiledSelector | None = None,
                         scenario: FaultScenario | None = None):
    """Jacobians of the reduced field and feature map after eliminating V.

    Returns (dP~/dx_in, dP~/dx_ex, dz/dx_in, dz/dx_ex); the z blocks are
    None when no selector is given.
    """
    regime = region.scenario_regime(scenario)
    jx, ju = region.jacobians(regime, x, u)
    if selector is None:
        return jx, ju, None, None
    zx, zu = region.feature_jacobians(selector, regime, x, u)
    return jx, ju, zx, zu
