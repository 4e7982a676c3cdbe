"""Driving-port decomposition of the boundary equivalent.

The tie current into the study system splits into an instantaneous
algebraic response to the port voltage and a slowly varying source term:

    i_tie(t) = i_cs(t) + D @ v_p(t)

Network switches (fault application, fault clearing) step the port voltage
within a single sample while every dynamic state holds still, so the
current jump across a switch is the algebraic response alone.  Stacking
those jumps identifies D by least squares; subtracting ``D @ v_p`` from the
measured tie current leaves a continuous remainder that a small network can
learn as an ODE state.  At test time ``-D`` folds into the internal
admittance matrix as a constant shunt and the network advances only the
source current, which keeps the coupled interface free of algebraic loops.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from neudye import neuralnet, training
from neudye.errors import NumericalError, ValidationError
from neudye.grid import GridModel, Partition
from neudye.simulator import Trajectory

__all__ = [
    "DpModel",
    "PortEvent",
    "collect_port_events",
    "estimate_d_matrix",
    "extract_continuous_component",
    "train_dp_neudye",
]


# ---------------------------------------------------------------------------
# model artifact


@dataclass
class DpModel:
    """Port admittance matrix plus the net that drives the source current.

    ``port_order`` pins the boundary bus ordering the matrix was estimated
    under; simulation refuses a partition whose ports disagree.
    """

    d_matrix: np.ndarray
    net: neuralnet.NeuralEquivalence
    port_order: tuple[int, ...]

    def __post_init__(self) -> None:
        self.d_matrix = np.asarray(self.d_matrix, dtype=complex)
        self.port_order = tuple(int(b) for b in self.port_order)
        n_p = len(self.port_order)
        if n_p == 0:
            raise ValidationError("dp model needs at least one port")
        if self.d_matrix.shape != (n_p, n_p):
            raise ValidationError(
                f"d_matrix must be ({n_p}, {n_p}), got {self.d_matrix.shape}")
        if not np.all(np.isfinite(self.d_matrix)):
            raise ValidationError("d_matrix has non-finite entries")
        if self.net.n_ex != 2 * n_p or self.net.layer_sizes[-1] != 2 * n_p:
            raise ValidationError(
                f"dp net must carry {2 * n_p} state components for "
                f"{n_p} ports")
        if list(self.net.feature_spec) != _port_voltage_channels(n_p):
            raise ValidationError(
                "dp net features must be exactly the port voltages")

    @property
    def n_ports(self) -> int:
        return len(self.port_order)

    def to_json_dict(self) -> dict:
        return {
            "d": [[{"re": float(z.real), "im": float(z.imag)} for z in row]
                  for row in self.d_matrix],
            "net": self.net.to_json_dict(),
            "ports": list(self.port_order),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DpModel":
        want = {"d", "net", "ports"}
        if set(doc) != want:
            raise ValidationError(
                f"dp model document must have keys {sorted(want)}, "
                f"got {sorted(doc)}")
        d = np.array([[complex(cell["re"], cell["im"]) for cell in row]
                      for row in doc["d"]], dtype=complex)
        return cls(d_matrix=d,
                   net=neuralnet.NeuralEquivalence.from_json_dict(doc["net"]),
                   port_order=tuple(doc["ports"]))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "DpModel":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


@dataclass
class PortEvent:
    """Boundary jumps across the single sample step straddling one switch."""

    t_event: float
    dv: np.ndarray
    di: np.ndarray

    def __post_init__(self) -> None:
        self.dv = np.atleast_1d(np.asarray(self.dv, dtype=complex))
        self.di = np.atleast_1d(np.asarray(self.di, dtype=complex))
        if self.dv.ndim != 1 or self.dv.shape != self.di.shape:
            raise ValidationError("event dv and di must be vectors of equal length")
        if not (np.all(np.isfinite(self.dv)) and np.all(np.isfinite(self.di))):
            raise ValidationError("event jumps contain non-finite values")


# ---------------------------------------------------------------------------
# channel access


def _port_voltage_channels(n_p: int) -> list[str]:
    out = []
    for k in range(1, n_p + 1):
        out += [f"port{k}.v.re", f"port{k}.v.im"]
    return out


def _port_count(channels) -> int:
    n = 0
    while f"port{n + 1}.v.re" in channels:
        n += 1
    return n


def _complex_block(traj: Trajectory, stems: list[str]) -> np.ndarray:
    """Re/im channel pairs as one complex (n_samples, len(stems)) array."""
    cols = [traj.column(s + ".re") + 1j * traj.column(s + ".im")
            for s in stems]
    return np.stack(cols, axis=1)


def _boundary_blocks(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    n_p = _port_count(traj.channels)
    if n_p == 0:
        raise ValidationError("trajectory carries no port voltage channels")
    v = _complex_block(traj, [f"port{k}.v" for k in range(1, n_p + 1)])
    i = _complex_block(traj, [f"tie{k}.i" for k in range(1, n_p + 1)])
    return v, i


# ---------------------------------------------------------------------------
# D identification


def collect_port_events(trajectories: list, scenarios: list) -> list:
    """Extract the boundary jumps at every switching instant.

    Each faulted scenario contributes two events, fault application and
    fault clearing, differenced across the one sample step that straddles
    the switch.  A switching instant off the sample grid is snapped to the
    nearest sample with a warning.  ``None`` scenarios contribute nothing.
    """
    if len(trajectories) != len(scenarios):
        raise ValidationError("one scenario per trajectory required")
    events = []
    for traj, scn in zip(trajectories, scenarios):
        if scn is None:
            continue
        v, i = _boundary_blocks(traj)
        for t_sw in (scn.t_fault, scn.t_clear):
            pos = (t_sw - traj.t0) / traj.dt
            k = int(round(pos))
            if abs(pos - k) > 1e-9:
                warnings.warn(
                    f"switching instant t={t_sw} off the sample grid; "
                    f"snapped to t={traj.t0 + k * traj.dt}")
            if not 0 <= k < traj.n_samples - 1:
                raise ValidationError(
                    f"switching instant t={t_sw} outside the trajectory")
            events.append(PortEvent(t_event=traj.t0 + k * traj.dt,
                                    dv=v[k + 1] - v[k],
                                    di=i[k + 1] - i[k]))
    return events


def estimate_d_matrix(events: list) -> np.ndarray:
    """Least-squares port admittance from stacked switch jumps.

    Solves ``di = D @ dv`` over all events via the pseudoinverse of the
    column-stacked voltage jumps; with exactly n_p independent events this
    reduces to a plain matrix inverse.
    """
    if not events:
        raise ValidationError("no port events to estimate from")
    n_p = events[0].dv.size
    if any(ev.dv.size != n_p for ev in events):
        raise ValidationError("events disagree on the number of ports")
    if len(events) < n_p:
        raise ValidationError(
            f"need at least {n_p} events for {n_p} ports, got {len(events)}")
    dv = np.stack([ev.dv for ev in events], axis=1)
    di = np.stack([ev.di for ev in events], axis=1)
    sv = np.linalg.svd(dv, compute_uv=False)
    tol = sv[0] * max(dv.shape) * np.finfo(float).eps
    rank = int(np.sum(sv > tol))
    if rank < n_p:
        raise NumericalError(
            f"voltage jumps excite only rank {rank} of {n_p} ports; "
            f"singular values {np.array2string(sv, precision=3)}")
    return di @ np.linalg.pinv(dv)


def extract_continuous_component(trajectory: Trajectory,
                                 d_matrix: np.ndarray) -> Trajectory:
    """Append source-current channels ``tiecs<k>.i.re/.im``.

    The source current is the measured tie current minus the algebraic
    response ``D @ v_p``, evaluated sample by sample.
    """
    d = np.asarray(d_matrix, dtype=complex)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValidationError("d_matrix must be square")
    n_p = d.shape[0]
    if _port_count(trajectory.channels) != n_p:
        raise ValidationError(
            f"trajectory has {_port_count(trajectory.channels)} ports, "
            f"d_matrix expects {n_p}")
    v = _complex_block(trajectory, [f"port{k}.v" for k in range(1, n_p + 1)])
    i = _complex_block(trajectory, [f"tie{k}.i" for k in range(1, n_p + 1)])
    ics = i - v @ d.T
    names = []
    cols = []
    for k in range(n_p):
        names += [f"tiecs{k + 1}.i.re", f"tiecs{k + 1}.i.im"]
        cols += [ics[:, k].real, ics[:, k].imag]
    for name in names:
        if name in trajectory.channels:
            raise ValidationError(f"channel {name!r} already present")
    return Trajectory(dt=trajectory.dt, t0=trajectory.t0,
                      channels=list(trajectory.channels) + names,
                      data=np.concatenate(
                          [trajectory.data, np.stack(cols, axis=1)], axis=1),
                      diverged=trajectory.diverged,
                      meta=dict(trajectory.meta))


# ---------------------------------------------------------------------------
# training


def train_dp_neudye(grid: GridModel, partition: Partition, dataset,
                    d_matrix: np.ndarray, cfg: training.TrainConfig,
                    rnn: bool = False,
                    model: neuralnet.NeuralEquivalence | None = None
                    ) -> training.TrainReport:
    """Fit the source-current net against measured boundary series.

    The dataset must be pre-processed by :func:`extract_continuous_component`
    so every trajectory carries ``tiecs`` channels.  Port voltages enter the
    rollout as recorded data rather than from a network solve, so each
    iteration is a bare state integration; the closed loop only forms at
    test time when ``-D`` folds into the internal admittance matrix.
    """
    expected = "dp-rnn" if rnn else "dp"
    if cfg.variant != expected:
        raise ValidationError(
            f"train_dp_neudye with rnn={rnn} expects variant {expected!r}")
    n_p = len(partition.ports)
    d = np.asarray(d_matrix, dtype=complex)
    if d.shape != (n_p, n_p) or not np.all(np.isfinite(d)):
        raise ValidationError(f"d_matrix must be finite with shape ({n_p}, {n_p})")
    bus_ids = {bus.id for bus in grid.buses}
    if not set(partition.internal) <= bus_ids:
        raise ValidationError("partition names buses the grid does not have")
    feature_spec = _port_voltage_channels(n_p)
    u_ch = training.tie_channels(partition, source=True)
    win = training.prepare_windows(dataset, cfg, u_ch,
                                   feature_channels=feature_spec)
    if model is None:
        net = training._init_model(cfg, len(u_ch), feature_spec, recurrent=rnn)
        training._freeze_normalization(net, win, cfg.dt)
    else:
        if bool(model.recurrent) != rnn:
            raise ValidationError("warm-start model recurrence disagrees with rnn flag")
        net = model
    training._check_model_dims(net, win)
    problem = training._TeacherProblem(net, win, cfg)
    report = training._optimize(net, problem, cfg)
    report.model = DpModel(d_matrix=d, net=net, port_order=partition.ports)
    return report
