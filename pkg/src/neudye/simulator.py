"""Trapezoidal time-domain engines and the Trajectory interchange format.

Three integration modes share one convention: differential states advance
from sample k to k+1 with the admittance matrix of the fault window that
step k falls in (k_fault <= k < k_clear, switch instants snapped to the
sample grid), so the emitted sample at a switching instant is the
pre-switch algebraic state and the jump lands on the following sample.

* simulate_full: every machine in the grid, iterated alternating solution
  (frozen-voltage per-machine trapezoidal corrector, then network re-solve,
  repeated to tolerance).
* simulate_coupled: internal machines solved implicitly (Newton on the
  reduced field), boundary states advanced by explicit trapezoidal (Heun)
  on a supplied derivative callable.  Runs batched over scenarios with a
  leading axis; this single code path backs the PI hybrid, the DP hybrid,
  the linear-fixture reference run, and training forwards, so a trained
  model is tested by exactly the arithmetic it was trained through.

Diverged runs (state norm past ``divergence_threshold``) come back flagged
and truncated, not raised; corrector failure in simulate_full raises.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from neudye import neuralnet
from neudye.dynamics import (
    CompiledSelector,
    RegimeStack,
    RegionDae,
    init_states,
    parse_channel,
)
from neudye.errors import NumericalError, ValidationError
from neudye.grid import FaultScenario, GridModel, Partition, PowerFlowSolution, solve_power_flow


@dataclass
class SimConfig:
    """Integration settings shared by all simulators."""

    dt: float = 0.005
    t_end: float = 5.0
    newton_tol: float = 1.0e-9
    max_newton_iters: int = 50
    divergence_threshold: float = 1.0e3

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.t_end <= self.dt:
            raise ValidationError("t_end must exceed dt")
        if self.newton_tol <= 0 or self.divergence_threshold <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_newton_iters < 1:
            raise ValidationError("max_newton_iters must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def to_json_dict(self) -> dict:
        return {
            "dt": self.dt,
            "t_end": self.t_end,
            "newton_tol": self.newton_tol,
            "max_newton_iters": self.max_newton_iters,
            "divergence_threshold": self.divergence_threshold,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SimConfig":
        try:
            return cls(
                dt=float(doc["dt"]),
                t_end=float(doc["t_end"]),
                newton_tol=float(doc.get("newton_tol", 1.0e-9)),
                max_newton_iters=int(doc.get("max_newton_iters", 50)),
                divergence_threshold=float(doc.get("divergence_threshold", 1.0e3)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed simulation config: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "SimConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


@dataclass
class Trajectory:
    """Uniformly sampled named-channel time series."""

    dt: float
    t0: float
    channels: list[str]
    data: np.ndarray
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        if self.dt <= 0:
            raise ValidationError("trajectory dt must be positive")
        if len(set(self.channels)) != len(self.channels):
            raise ValidationError("duplicate channel names")
        if self.data.ndim != 2 or self.data.shape[1] != len(self.channels):
            raise ValidationError("data shape does not match channel list")
        if self.data.shape[0] < 2:
            raise ValidationError("trajectory needs at least two rows")
        if not self.diverged and not np.all(np.isfinite(self.data)):
            raise ValidationError("non-finite samples in a run not flagged diverged")
        for name in self.channels:
            parse_channel(name)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.data.shape[0])

    def column(self, channel: str) -> np.ndarray:
        try:
            return self.data[:, self.channels.index(channel)]
        except ValueError:
            raise ValidationError(f"trajectory has no channel {channel!r}") from None

    def values(self, channels: list[str]) -> np.ndarray:
        idx = []
        for c in channels:
            if c not in self.channels:
                raise ValidationError(f"trajectory has no channel {c!r}")
            idx.append(self.channels.index(c))
        return self.data[:, idx]

    def complex_pair(self, base: str) -> np.ndarray:
        return self.column(base + ".re") + 1j * self.column(base + ".im")

    def sample_index(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        if not 0 <= k < self.n_samples:
            raise ValidationError(f"time {t} outside trajectory range")
        return k

    def save(self, path: str) -> None:
        header = "t," + ",".join(self.channels)
        tcol = self.t[:, None]
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in np.hstack([tcol, self.data]):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        side = {
            "dt": self.dt,
            "t0": self.t0,
            "diverged": self.diverged,
            "meta": self.meta,
        }
        with open(path + ".meta.json", "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Trajectory":
        with open(path) as fh:
            header = fh.readline().strip()
        cols = header.split(",")
        if not cols or cols[0] != "t":
            raise ValidationError(f"{path}: expected a 't,<channel>...' header")
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if raw.shape[1] != len(cols):
            raise ValidationError(f"{path}: row width does not match header")
        side_path = path + ".meta.json"
        if os.path.exists(side_path):
            with open(side_path) as fh:
                side = json.load(fh)
            dt = float(side["dt"])
            t0 = float(side["t0"])
            diverged = bool(side.get("diverged", False))
            meta = dict(side.get("meta", {}))
        else:
            if raw.shape[0] < 2:
                raise ValidationError(f"{path}: too few rows to infer dt")
            dt = float(raw[1, 0] - raw[0, 0])
            t0 = float(raw[0, 0])
            diverged = not np.all(np.isfinite(raw[:, 1:]))
            meta = {}
        return cls(dt=dt, t0=t0, channels=cols[1:], data=raw[:, 1:],
                   diverged=diverged, meta=meta)


def scenario_of(traj: Trajectory) -> FaultScenario | None:
    doc = traj.meta.get("scenario")
    return None if doc is None else FaultScenario.from_json_dict(doc)


def grid_of(traj: Trajectory) -> GridModel:
    """Rebuild the source grid stored alongside a simulated trajectory."""
    doc = traj.meta.get("grid")
    if doc is None:
        raise ValidationError(
            "trajectory metadata carries no grid; re-simulate or attach one"
        )
    return GridModel.from_json_dict(doc)


# ---------------------------------------------------------------------------
# generic trapezoidal core


def implicit_trap_step(f, jac, x: np.ndarray, h: float,
                       tol: float = 1.0e-12, max_iters: int = 50) -> np.ndarray:
    """One trapezoidal step x+ = x + (h/2)(f(x) + f(x+)), Newton-solved.

    ``f`` maps a state vector to its derivative; ``jac`` returns df/dx.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    y = x + h * f0
    eye = np.eye(x.size)
    # at least one correction: accepting the raw predictor would quietly
    # degrade the step to explicit Euler whenever its residual is tiny
    for it in range(max_iters):
        r = y - x - 0.5 * h * (f0 + np.asarray(f(y), dtype=float))
        if not np.all(np.isfinite(r)):
            raise NumericalError("trapezoidal corrector produced non-finite residual")
        if it > 0 and np.max(np.abs(r)) < tol:
            return y
        j = eye - 0.5 * h * np.asarray(jac(y), dtype=float)
        y = y - np.linalg.solve(j, r)
    raise NumericalError("trapezoidal corrector failed to converge")


# ---------------------------------------------------------------------------
# channel schemas


def full_channels(grid: GridModel, partition: Partition | None = None) -> list[str]:
    """Channel list of a full-system run: machines, buses, then boundary."""
    ch = []
    for k in range(1, len(grid.generators) + 1):
        ch += [f"gen{k}.delta", f"gen{k}.omega"]
    for b in grid.buses:
        ch += [f"bus{b.id}.v.re", f"bus{b.id}.v.im"]
    if partition is not None:
        nt = len(partition.tie_branches)
        for k in range(1, nt + 1):
            ch += [f"tie{k}.i.re", f"tie{k}.i.im"]
        for k in range(1, nt + 1):
            ch += [f"port{k}.v.re", f"port{k}.v.im"]
    return ch


def hybrid_channels(grid: GridModel, partition: Partition) -> list[str]:
    """Fixed channel schema of any hybrid run on (grid, partition)."""
    internal = set(partition.internal)
    ch = []
    for k, gen in enumerate(grid.generators, start=1):
        if gen.bus in internal:
            ch += [f"gen{k}.delta", f"gen{k}.omega"]
    for bid in partition.internal:
        ch += [f"bus{bid}.v.re", f"bus{bid}.v.im"]
    nt = len(partition.tie_branches)
    for k in range(1, nt + 1):
        ch += [f"tie{k}.i.re", f"tie{k}.i.im"]
    for k in range(1, nt + 1):
        ch += [f"port{k}.v.re", f"port{k}.v.im"]
    return ch


# ---------------------------------------------------------------------------
# fault-window bookkeeping


def fault_steps(scenario: FaultScenario | None, dt: float) -> tuple[int, int]:
    """Snap the fault window to step indices; step k is faulted iff kf <= k < kc."""
    if scenario is None:
        return (0, 0)
    kf = int(round(scenario.t_fault / dt))
    kc = int(round(scenario.t_clear / dt))
    if kc <= kf:
        raise ValidationError(
            f"fault window [{scenario.t_fault}, {scenario.t_clear}] shorter "
            f"than one step at dt={dt}"
        )
    return kf, kc


def regime_schedule(scenarios: list, n_steps: int, dt: float,
                    k_offset: int = 0) -> list[tuple]:
    """Per-step tuple of per-scenario regime keys (None = healthy network)."""
    windows = []
    for sc in scenarios:
        if sc is None:
            windows.append((0, 0, None))
        else:
            kf, kc = fault_steps(sc, dt)
            windows.append((kf, kc, (sc.fault_bus, sc.fault_admittance)))
    schedule = []
    for k in range(n_steps):
        kg = k_offset + k
        schedule.append(tuple(
            key if kf <= kg < kc else None for kf, kc, key in windows
        ))
    return schedule


def _regime_of(region: RegionDae, key):
    return region.regime(None) if key is None else region.regime(*key)


def _schedule_view(region: RegionDae, keys: tuple, sel: CompiledSelector, cache: dict):
    hit = cache.get(keys)
    if hit is not None:
        return hit
    if all(k == keys[0] for k in keys):
        view = _regime_of(region, keys[0])
    else:
        view = RegimeStack([_regime_of(region, k) for k in keys], sel)
    cache[keys] = view
    return view


# ---------------------------------------------------------------------------
# full-system reference simulation


def _full_step(region: RegionDae, regime, x: np.ndarray, h: float,
               tol: float, max_iters: int):
    """Alternating solution of one trapezoidal step; returns (x_next, v_next)."""
    g = region.n_mach
    u0 = np.zeros(0)
    delta_n, omega_n = x[:g], x[g:]
    v = region.solve(regime, delta_n, u0)
    pe_n = region.pe(delta_n, v)
    f_del = region.omega_s * omega_n
    f_omg = (region.p_mech - pe_n - region.damp * omega_n) * region.minv
    delta = delta_n + h * f_del
    omega = omega_n + h * f_omg
    a12 = -0.5 * h * region.omega_s
    a22 = 1.0 + 0.5 * h * region.minv * region.damp
    for _ in range(max_iters):
        prev_d, prev_o = delta.copy(), omega.copy()
        vm = v[region.mach_loc]
        # frozen-voltage machine corrector, one 2x2 Newton per machine;
        # always correct at least once so tiny-residual steps stay implicit
        for it in range(max_iters):
            pe = (region._chat(delta) * vm).real
            r1 = delta - delta_n - 0.5 * h * (f_del + region.omega_s * omega)
            r2 = omega - omega_n - 0.5 * h * (
                f_omg + (region.p_mech - pe - region.damp * omega) * region.minv
            )
            res = max(np.max(np.abs(r1)), np.max(np.abs(r2)))
            if not np.isfinite(res):
                raise NumericalError("machine corrector produced non-finite residual")
            if it > 0 and res < tol:
                break
            dpe = (region.nscale * (np.cos(delta) - 1j * np.sin(delta)) * vm).real
            a21 = 0.5 * h * region.minv * dpe
            det = a22 - a12 * a21
            delta = delta - (r1 * a22 - a12 * r2) / det
            omega = omega - (r2 - a21 * r1) / det
        else:
            raise NumericalError("machine corrector failed to converge")
        v = region.solve(regime, delta, u0)
        change = max(np.max(np.abs(delta - prev_d)), np.max(np.abs(omega - prev_o)))
        if change < tol:
            return np.concatenate([delta, omega]), v
    raise NumericalError("alternating corrector failed to converge")


def simulate_full(grid: GridModel, scenario: FaultScenario | None,
                  cfg: SimConfig, partition: Partition | None = None) -> Trajectory:
    """Reference trapezoidal simulation of the complete physics system.

    With a partition supplied, tie currents and port voltages are emitted in
    addition to machine and bus channels.
    """
    pf = solve_power_flow(grid)
    region = RegionDae(grid, pf)
    g = region.n_mach
    x = np.concatenate([region.delta0, np.zeros(g)])
    h = cfg.dt
    n_steps = cfg.n_steps
    kf, kc = fault_steps(scenario, h)
    tie_w = None
    port_loc = None
    if partition is not None:
        tie_w = region.tie_current_weights(partition)
        port_loc = np.array(
            [region.pos[p] for p in partition.ports], dtype=int
        )

    channels = full_channels(grid, partition)
    data = np.empty((n_steps + 1, len(channels)))
    base = region.regime(None)
    v = region.solve(base, x[:g], np.zeros(0))
    data[0] = _full_row(x, v, g, tie_w, port_loc)
    diverged = False
    diverged_step = None
    rows = 1
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            key = None
            if scenario is not None and kf <= k < kc:
                key = (scenario.fault_bus, scenario.fault_admittance)
            regime = _regime_of(region, key)
            try:
                x, v = _full_step(region, regime, x, h, cfg.newton_tol,
                                  cfg.max_newton_iters)
            except NumericalError as exc:
                raise NumericalError(f"step {k}: {exc}") from exc
            data[k + 1] = _full_row(x, v, g, tie_w, port_loc)
            rows = k + 2
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > cfg.divergence_threshold:
                diverged = True
                diverged_step = k + 1
                break
    meta = {
        "kind": "full",
        "scenario": None if scenario is None else scenario.to_json_dict(),
        "diverged_step": diverged_step,
        "grid": grid.to_json_dict(),
    }
    return Trajectory(dt=h, t0=0.0, channels=channels, data=data[:rows],
                      diverged=diverged, meta=meta)


def _full_row(x, v, g, tie_w, port_loc):
    parts = [np.empty(2 * g)]
    parts[0][0::2] = x[:g]
    parts[0][1::2] = x[g:]
    vv = np.empty(2 * v.size)
    vv[0::2] = v.real
    vv[1::2] = v.imag
    parts.append(vv)
    if tie_w is not None:
        it = tie_w @ v
        tt = np.empty(2 * it.size)
        tt[0::2] = it.real
        tt[1::2] = it.imag
        parts.append(tt)
        vp = v[port_loc]
        pp = np.empty(2 * vp.size)
        pp[0::2] = vp.real
        pp[1::2] = vp.imag
        parts.append(pp)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# coupled physics + boundary-state engine (shared by hybrids and training)


@dataclass
class CoupledRun:
    """Dense record of a batched coupled integration.

    Arrays carry (sample, scenario, ...) axes; ``us``/``xs`` hold boundary
    and machine states, ``vs`` the solved region voltages, ``u_preds`` the
    Heun predictor points, ``z_a``/``z_b`` the feature vectors at the two
    derivative evaluations of each step.  ``active[k]`` marks rows still
    healthy at sample k; a row's first failed sample is ``diverged_step``
    (-1 when it never failed).  Records everything the discrete adjoint
    needs to retrace the exact arithmetic backward.
    """

    dt: float
    xs: np.ndarray
    us: np.ndarray
    vs: np.ndarray
    u_preds: np.ndarray
    z_a: np.ndarray
    z_b: np.ndarray
    hiddens: np.ndarray | None
    active: np.ndarray
    schedule: list
    n_filled: int
    diverged: np.ndarray
    diverged_step: np.ndarray
    region: RegionDae
    selector: CompiledSelector

    @property
    def n_scen(self) -> int:
        return self.xs.shape[1]


def net_deriv(model: neuralnet.NeuralEquivalence):
    """Adapt a NeuralEquivalence to the engine's derivative callable."""

    def fn(u, z, hidden, k):
        return neuralnet.forward(model, u, z, hidden)

    return fn


def affine_deriv(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Derivative callable du/dt = a·u + b·z + c (real interleaved blocks)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)

    def fn(u, z, hidden, k):
        return u @ a.T + z @ b.T + c, None

    return fn


def _bad_rows(threshold, *arrays):
    bad = None
    for arr in arrays:
        finite = np.isfinite(arr).all(axis=-1)
        over = np.zeros(finite.shape, dtype=bool)
        with np.errstate(invalid="ignore"):
            if arr.size:
                over = np.nanmax(np.abs(arr), axis=-1) > threshold
        b = ~finite | over
        bad = b if bad is None else (bad | b)
    return bad


def _newton_trap_batch(region, regime, x, f_n, u_pred, h, tol, max_iters, active):
    """Implicit trapezoidal machine step, batched with per-row failure masks."""
    m = x.shape[-1]
    s = x.shape[0]
    y = x + h * f_n
    y[~active] = x[~active]
    ok = active.copy()
    eye = np.eye(m)
    # rows take at least one correction so a small-residual predictor does
    # not silently pass through as an explicit Euler step
    for it in range(max_iters):
        f_y, v = region.rhs_u(regime, y, u_pred)
        r = y - x - 0.5 * h * (f_n + f_y)
        finite = np.isfinite(r).all(axis=-1)
        ok &= finite
        r[~ok] = 0.0
        res = np.abs(r).max(axis=-1)
        conv = res < tol
        if it > 0 and np.all(conv):
            return y, ok
        jx, _ = region.jacobians(regime, y, u_pred, v=v)
        j = eye - 0.5 * h * jx
        jbad = ~np.isfinite(j).reshape(s, -1).all(axis=-1)
        ok &= ~jbad
        hold = ~ok if it == 0 else (conv | ~ok)
        j[hold] = eye
        r[hold] = 0.0
        y = y - np.linalg.solve(j, r[..., None])[..., 0]
    f_y, _ = region.rhs_u(regime, y, u_pred)
    r = y - x - 0.5 * h * (f_n + f_y)
    r[~ok] = 0.0
    with np.errstate(invalid="ignore"):
        ok &= np.isfinite(r).all(axis=-1) & (np.abs(r).max(axis=-1) < tol)
    return y, ok


def simulate_coupled(region: RegionDae, selector: CompiledSelector, deriv,
                     x0: np.ndarray, u0: np.ndarray, schedule: list,
                     cfg: SimConfig, hidden0: np.ndarray | None = None) -> CoupledRun:
    """March the coupled internal-physics / boundary-state system.

    ``deriv(u, z, hidden, k) -> (du_dt, hidden_new)`` supplies the boundary
    derivative.  One step: evaluate at (u_n, z(x_n,u_n)); Heun-predict u;
    Newton-solve the implicit trapezoidal machine update against the
    predictor; evaluate at the predictor; Heun-correct u.  Rows that blow up
    or fail the corrector freeze in place and are marked inactive.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    u0 = np.atleast_2d(np.asarray(u0, dtype=float))
    s, m = x0.shape
    t2 = u0.shape[1]
    n_steps = len(schedule)
    if n_steps < 1:
        raise ValidationError("empty regime schedule")
    if u0.shape[0] != s:
        raise ValidationError("x0/u0 scenario counts differ")
    h = cfg.dt
    n = len(region.bus_ids)
    g = region.n_mach

    xs = np.empty((n_steps + 1, s, m))
    us = np.empty((n_steps + 1, s, t2))
    vs = np.empty((n_steps + 1, s, n), dtype=complex)
    u_preds = np.empty((n_steps, s, t2))
    sdim = selector.size
    z_as = np.empty((n_steps, s, sdim))
    z_bs = np.empty((n_steps, s, sdim))
    hiddens = None
    hidden = None
    if hidden0 is not None:
        hidden = np.atleast_2d(np.asarray(hidden0, dtype=float))
        hiddens = np.empty((n_steps + 1, s, hidden.shape[1]))
        hiddens[0] = hidden
    act_hist = np.empty((n_steps + 1, s), dtype=bool)

    active = np.ones(s, dtype=bool)
    diverged_step = np.full(s, -1, dtype=int)
    x_cur, u_cur = x0.copy(), u0.copy()
    xs[0], us[0] = x_cur, u_cur
    vs[0] = region.solve(region.regime(None), x_cur[:, :g], u_cur)
    act_hist[0] = active
    cache: dict = {}
    thr = cfg.divergence_threshold
    filled = 1

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            regime = _schedule_view(region, schedule[k], selector, cache)
            v_a = region.solve(regime, x_cur[:, :g], u_cur)
            z_a = region.features(selector, regime, x_cur, u_cur, v=v_a)
            f_n = region.rhs(x_cur, v_a)
            f_n[~active] = 0.0
            du_a, hidden_new = deriv(u_cur, z_a, hidden, k)
            u_pred = u_cur + h * np.where(active[:, None], du_a, 0.0)
            x_next, ok = _newton_trap_batch(
                region, regime, x_cur, f_n, u_pred, h,
                cfg.newton_tol, cfg.max_newton_iters, active,
            )
            v_b = region.solve(regime, x_next[:, :g], u_pred)
            z_b = region.features(selector, regime, x_next, u_pred, v=v_b)
            du_b, _ = deriv(u_pred, z_b, hidden, k)
            u_next = u_cur + 0.5 * h * np.where(active[:, None], du_a + du_b, 0.0)

            bad = _bad_rows(thr, x_next, u_next) | ~ok
            newly = active & bad
            diverged_step[newly] = k + 1

            xs[k + 1], us[k + 1] = x_next, u_next
            u_preds[k], z_as[k], z_bs[k] = u_pred, z_a, z_b
            vs[k + 1] = region.solve(regime, x_next[:, :g], u_next)
            active = active & ~bad
            act_hist[k + 1] = active
            if hiddens is not None:
                hidden = np.where(active[:, None], hidden_new, hidden)
                hiddens[k + 1] = hidden

            # freeze failed rows at their last healthy sample
            x_cur = np.where(active[:, None], x_next, x_cur)
            u_cur = np.where(active[:, None], u_next, u_cur)
            filled = k + 2
            if not active.any():
                break

    return CoupledRun(
        dt=h,
        xs=xs[:filled],
        us=us[:filled],
        vs=vs[:filled],
        u_preds=u_preds[: filled - 1],
        z_a=z_as[: filled - 1],
        z_b=z_bs[: filled - 1],
        hiddens=None if hiddens is None else hiddens[:filled],
        active=act_hist[:filled],
        schedule=schedule[: filled - 1],
        n_filled=filled,
        diverged=diverged_step >= 0,
        diverged_step=diverged_step,
        region=region,
        selector=selector,
    )


# ---------------------------------------------------------------------------
# hybrid assembly


def internal_region(grid: GridModel, partition: Partition,
                    pf: PowerFlowSolution | None = None,
                    d_fold: np.ndarray | None = None) -> tuple[PowerFlowSolution, RegionDae]:
    if pf is None:
        pf = solve_power_flow(grid)
    region = RegionDae(grid, pf, bus_ids=partition.internal,
                       ports=partition.ports, d_fold=d_fold)
    return pf, region


def boundary_equilibrium(grid: GridModel, partition: Partition,
                         pf: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    """Equilibrium (port voltages, tie currents), tie order, external->internal."""
    internal = set(partition.internal)
    vp = np.empty(len(partition.tie_branches), dtype=complex)
    it = np.empty(len(partition.tie_branches), dtype=complex)
    for k, bidx in enumerate(partition.tie_branches):
        br = grid.branches[bidx]
        p = br.from_bus if br.from_bus in internal else br.to_bus
        e = br.to_bus if p == br.from_bus else br.from_bus
        v_p = pf.v[grid.bus_index(p)]
        v_e = pf.v[grid.bus_index(e)]
        vp[k] = v_p
        it[k] = br.y_series * (v_e - v_p)
    return vp, it


def pack_complex(c: np.ndarray) -> np.ndarray:
    out = np.empty(c.shape[:-1] + (2 * c.shape[-1],))
    out[..., 0::2] = c.real
    out[..., 1::2] = c.imag
    return out


def unpack_complex(u: np.ndarray) -> np.ndarray:
    return u[..., 0::2] + 1j * u[..., 1::2]


def coupled_trajectory(grid: GridModel, partition: Partition, run: CoupledRun,
                       d_matrix: np.ndarray | None = None, scenario=None,
                       kind: str = "hybrid", row: int = 0) -> Trajectory:
    """Emit one scenario row of a CoupledRun as a hybrid-schema Trajectory."""
    region = run.region
    channels = hybrid_channels(grid, partition)
    g = region.n_mach
    xs = run.xs[:, row, :]
    us = run.us[:, row, :]
    vs = run.vs[:, row, :]
    n_rows = xs.shape[0]
    parts = np.empty((n_rows, len(channels)))
    ofs = 0
    parts[:, ofs: ofs + 2 * g: 2] = xs[:, :g]
    parts[:, ofs + 1: ofs + 2 * g: 2] = xs[:, g:]
    ofs += 2 * g
    nb = len(region.bus_ids)
    parts[:, ofs: ofs + 2 * nb: 2] = vs.real
    parts[:, ofs + 1: ofs + 2 * nb: 2] = vs.imag
    ofs += 2 * nb
    nt = region.n_ties
    vp = vs[:, region.port_loc]
    icur = unpack_complex(us)
    itie = icur if d_matrix is None else icur + vp @ np.asarray(d_matrix).T
    parts[:, ofs: ofs + 2 * nt: 2] = itie.real
    parts[:, ofs + 1: ofs + 2 * nt: 2] = itie.imag
    ofs += 2 * nt
    parts[:, ofs: ofs + 2 * nt: 2] = vp.real
    parts[:, ofs + 1: ofs + 2 * nt: 2] = vp.imag
    diverged = bool(run.diverged[row])
    step = int(run.diverged_step[row])
    meta = {
        "kind": kind,
        "scenario": None if scenario is None else scenario.to_json_dict(),
        "diverged_step": step if diverged else None,
        "grid": grid.to_json_dict(),
    }
    return Trajectory(dt=run.dt, t0=0.0, channels=channels, data=parts,
                      diverged=diverged, meta=meta)


def simulate_hybrid_pi(grid: GridModel, partition: Partition,
                       model: neuralnet.NeuralEquivalence,
                       scenario: FaultScenario | None, cfg: SimConfig) -> Trajectory:
    """Closed-loop run: internal physics + neural tie-current state."""
    pf, region = internal_region(grid, partition)
    nt = region.n_ties
    if model.layer_sizes[-1] != 2 * nt or model.n_ex != 2 * nt:
        raise ValidationError(
            f"model state dimension must be {2 * nt} for this partition"
        )
    selector = region.compile_selector(model.feature_spec)
    vp0, it0 = boundary_equilibrium(grid, partition, pf)
    u0 = pack_complex(it0)
    x0 = np.concatenate([region.delta0, np.zeros(region.n_mach)])
    hidden0 = np.zeros((1, model.n_hidden)) if model.recurrent else None
    schedule = regime_schedule([scenario], cfg.n_steps, cfg.dt)
    run = simulate_coupled(region, selector, net_deriv(model),
                           x0[None], u0[None], schedule, cfg, hidden0)
    return coupled_trajectory(grid, partition, run, scenario=scenario,
                              kind="hybrid-pi")


def simulate_hybrid_dp(grid: GridModel, partition: Partition, dp,
                       scenario: FaultScenario | None, cfg: SimConfig) -> Trajectory:
    """Closed-loop run with the Norton interface: -D folded at the ports,
    continuous source current advanced by the net."""
    d = np.asarray(dp.d_matrix, dtype=complex)
    nt = len(partition.tie_branches)
    if d.shape != (nt, nt):
        raise ValidationError(f"d_matrix must be ({nt}, {nt}), got {d.shape}")
    if tuple(dp.port_order) != tuple(partition.ports):
        raise ValidationError("dp model port order does not match the partition")
    model = dp.net
    if model.layer_sizes[-1] != 2 * nt or model.n_ex != 2 * nt:
        raise ValidationError(
            f"dp net state dimension must be {2 * nt} for this partition"
        )
    pf, region = internal_region(grid, partition, d_fold=d)
    selector = region.compile_selector(model.feature_spec)
    vp0, it0 = boundary_equilibrium(grid, partition, pf)
    u0 = pack_complex(it0 - d @ vp0)
    x0 = np.concatenate([region.delta0, np.zeros(region.n_mach)])
    hidden0 = np.zeros((1, model.n_hidden)) if model.recurrent else None
    schedule = regime_schedule([scenario], cfg.n_steps, cfg.dt)
    run = simulate_coupled(region, selector, net_deriv(model),
                           x0[None], u0[None], schedule, cfg, hidden0)
    return coupled_trajectory(grid, partition, run, d_matrix=d,
                              scenario=scenario, kind="hybrid-dp")


# ---------------------------------------------------------------------------
# boundary-channel derivation for datasets recorded without a partition


def derive_boundary_channels(traj: Trajectory, grid: GridModel,
                             partition: Partition) -> Trajectory:
    """Append tie/port channels computed from bus voltages when missing."""
    nt = len(partition.tie_branches)
    wanted = []
    for k in range(1, nt + 1):
        wanted += [f"tie{k}.i.re", f"tie{k}.i.im"]
    for k in range(1, nt + 1):
        wanted += [f"port{k}.v.re", f"port{k}.v.im"]
    if all(c in traj.channels for c in wanted):
        return traj
    internal = set(partition.internal)
    cols = [traj.data]
    names = list(traj.channels)
    new = np.empty((traj.n_samples, 4 * nt))
    for k, bidx in enumerate(partition.tie_branches):
        br = grid.branches[bidx]
        p = br.from_bus if br.from_bus in internal else br.to_bus
        e = br.to_bus if p == br.from_bus else br.from_bus
        v_p = traj.complex_pair(f"bus{p}.v")
        v_e = traj.complex_pair(f"bus{e}.v")
        it = br.y_series * (v_e - v_p)
        new[:, 2 * k] = it.real
        new[:, 2 * k + 1] = it.imag
        new[:, 2 * nt + 2 * k] = v_p.real
        new[:, 2 * nt + 2 * k + 1] = v_p.imag
    cols.append(new)
    names += wanted
    return Trajectory(dt=traj.dt, t0=traj.t0, channels=names,
                      data=np.hstack(cols), diverged=traj.diverged,
                      meta=dict(traj.meta))
