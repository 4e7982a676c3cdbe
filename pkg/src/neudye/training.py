"""Continuous-time training of boundary equivalents.

The closed-loop loss measures state mismatch at sample instants while the
network is embedded inside the hybrid integrator, so gradients must travel
through the implicit machine update, the network solve, and the boundary
Heun update together.  Rather than discretizing the continuous adjoint
equations separately, the backward pass here is the exact discrete adjoint
of the recorded forward arithmetic: each reverse step pulls cotangents
through the Heun correction, the two derivative evaluations, the feature
map, and the trapezoidal Newton solve (via one transposed linear solve per
step), adding weighted observation jumps at every sample.  The result
matches central finite differences of the loss to solver precision, which
is the normative check; see grad_check.

Three problem flavors share the optimizer loop:

* closed loop ("pi"): machines and boundary states co-integrated, loss on
  both; this is the training mode whose forward is bit-identical to
  simulate_hybrid_pi.
* teacher forced ("ex_only"): the boundary state rolls out open loop
  against measured feature channels; used by the port-model trainers.
* discrete baseline: pointwise regression of trapezoidal-averaged network
  outputs onto measured difference quotients, no integration at all.

The recurrent flavor treats the hidden state as an exogenous input: the
recurrent matrix receives per-cell gradients, but no cotangent flows
backward through time.

Divergence handling keeps the optimizer alive: a scenario whose forward
blows up contributes a large sentinel loss and a zero gradient; training
aborts only after ten consecutive iterations in which every scenario in
the batch diverged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from neudye import neuralnet
from neudye.dynamics import RegionDae
from neudye.errors import NumericalError, ValidationError
from neudye.grid import GridModel, Partition
from neudye.simulator import (
    CoupledRun,
    SimConfig,
    Trajectory,
    _schedule_view,
    grid_of,
    internal_region,
    regime_schedule,
    scenario_of,
    simulate_coupled,
)

OPTIMIZERS = ("sgd", "adam")
VARIANTS = ("pi", "dp", "dp-rnn", "discrete")
LOSS_VARIANTS = ("ex_only", "pi")

# sentinel loss for a diverged forward pass; large against any real loss
# yet finite so histories stay plottable
DIVERGED_LOSS = 1.0e9

# implicit solves during training run tighter than plain simulation so the
# loss is smooth enough for finite-difference validation of the adjoint
TRAIN_NEWTON_TOL = 1.0e-12


@dataclass
class TrainConfig:
    """Optimization settings plus the architecture they apply to."""

    lr: float = 1.0e-3
    optimizer: str = "adam"
    max_iters: int = 3000
    tol: float = 1.0e-8
    batch: int = 0
    window_s: float = 3.0
    dt: float = 0.005
    seed: int = 42
    arch: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    variant: str = "pi"
    eta_weights: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.tol <= 0 or self.dt <= 0:
            raise ValidationError("lr, tol and dt must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.activation not in neuralnet.ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.max_iters < 0 or self.batch < 0:
            raise ValidationError("max_iters and batch must be nonnegative")
        if self.window < 2:
            raise ValidationError("window must span at least 2 steps")
        if any(int(w) < 1 for w in self.arch):
            raise ValidationError("hidden layer widths must be positive")
        if self.eta_weights is not None:
            self.eta_weights = np.asarray(self.eta_weights, dtype=float)
            if self.eta_weights.shape != (self.window,):
                raise ValidationError(
                    f"eta_weights must have length {self.window}"
                )
            if np.any(self.eta_weights < 0):
                raise ValidationError("eta_weights must be nonnegative")

    @property
    def window(self) -> int:
        """Training-window length in steps."""
        return int(round(self.window_s / self.dt))

    @property
    def eta(self) -> np.ndarray:
        if self.eta_weights is None:
            return np.ones(self.window)
        return self.eta_weights

    def to_json_dict(self) -> dict:
        return {
            "lr": self.lr,
            "optimizer": self.optimizer,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "batch": self.batch,
            "window_s": self.window_s,
            "dt": self.dt,
            "seed": self.seed,
            "arch": [int(w) for w in self.arch],
            "activation": self.activation,
            "variant": self.variant,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainConfig":
        keys = {"lr", "optimizer", "max_iters", "tol", "batch", "window_s",
                "dt", "seed", "arch", "activation", "variant"}
        missing = keys - set(doc)
        if missing:
            raise ValidationError(f"train config missing keys: {sorted(missing)}")
        extra = set(doc) - keys
        if extra:
            raise ValidationError(f"train config has unknown keys: {sorted(extra)}")
        return cls(
            lr=float(doc["lr"]),
            optimizer=str(doc["optimizer"]),
            max_iters=int(doc["max_iters"]),
            tol=float(doc["tol"]),
            batch=int(doc["batch"]),
            window_s=float(doc["window_s"]),
            dt=float(doc["dt"]),
            seed=int(doc["seed"]),
            arch=[int(w) for w in doc["arch"]],
            activation=str(doc["activation"]),
            variant=str(doc["variant"]),
        )


@dataclass
class AdjointState:
    """Adjoint variables at the window start.

    ``lambda_`` adjoins the boundary (external) states, ``mu`` the internal
    machine states, and ``g`` accumulates the loss gradient with respect to
    the flat parameter vector.  Batch runs keep a leading scenario axis on
    ``lambda_`` and ``mu``; ``g`` is always a single flat vector.
    """

    lambda_: np.ndarray
    mu: np.ndarray
    g: np.ndarray


@dataclass
class TrainReport:
    """Optimization trace plus the final model.

    ``iter_seconds`` holds measured wall time and is deliberately left out
    of the JSON form so that repeated runs serialize byte-identically.
    """

    loss_history: list[float]
    grad_norm_history: list[float]
    iter_seconds: list[float]
    model: neuralnet.NeuralEquivalence
    converged: bool
    meta: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.loss_history)

    def to_json_dict(self) -> dict:
        return {
            "loss_history": [float(v) for v in self.loss_history],
            "grad_norm_history": [float(v) for v in self.grad_norm_history],
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "model": self.model.to_json_dict(),
            "meta": {k: self.meta[k] for k in sorted(self.meta)},
        }


# ---------------------------------------------------------------------------
# window extraction


@dataclass
class WindowSet:
    """Measured targets for one training window across scenarios.

    Arrays are (scenario, sample, channel) with sample 0 the initial
    condition; ``schedule`` lists per-step admittance regimes aligned the
    same way the simulators align them.
    """

    u_hat: np.ndarray
    x_hat: np.ndarray | None
    z_hat: np.ndarray | None
    k0: int
    n_steps: int
    eta: np.ndarray
    schedule: list
    scenarios: list
    partition: Partition

    @property
    def n_scen(self) -> int:
        return self.u_hat.shape[0]

    def subset(self, idx) -> "WindowSet":
        idx = list(idx)
        return WindowSet(
            u_hat=self.u_hat[idx],
            x_hat=None if self.x_hat is None else self.x_hat[idx],
            z_hat=None if self.z_hat is None else self.z_hat[idx],
            k0=self.k0,
            n_steps=self.n_steps,
            eta=self.eta,
            schedule=[tuple(keys[i] for i in idx) for keys in self.schedule],
            scenarios=[self.scenarios[i] for i in idx],
            partition=self.partition,
        )


def tie_channels(partition: Partition, source: bool = False) -> list[str]:
    fam = "tiecs" if source else "tie"
    out = []
    for k in range(1, len(partition.tie_branches) + 1):
        out += [f"{fam}{k}.i.re", f"{fam}{k}.i.im"]
    return out


def machine_channels(grid: GridModel, partition: Partition) -> list[str]:
    """delta/omega channel names of internal machines, state order."""
    internal = set(partition.internal)
    gidx = [i for i, gen in enumerate(grid.generators) if gen.bus in internal]
    names = [f"gen{i + 1}.delta" for i in gidx]
    names += [f"gen{i + 1}.omega" for i in gidx]
    return names


def _columns(traj: Trajectory, names: list[str], lo: int, hi: int) -> np.ndarray:
    missing = [c for c in names if c not in traj.channels]
    if missing:
        raise ValidationError(f"trajectory lacks channels: {missing}")
    idx = [traj.channels.index(c) for c in names]
    return np.asarray(traj.data)[lo:hi, idx]


def prepare_windows(dataset, cfg: TrainConfig, u_channels: list[str],
                    x_channels: list[str] | None = None,
                    feature_channels: list[str] | None = None) -> WindowSet:
    """Cut one training window out of every trajectory in the dataset.

    Windows start 0.1 s before the fault (at the first sample for unfaulted
    runs) so each covers the pre-fault hold, the fault-on interval, and the
    post-fault swing.  Batched stepping needs a shared time base, so all
    scenarios must share a fault instant and the trajectory step must equal
    the training step.
    """
    if not dataset:
        raise ValidationError("empty training dataset")
    n = cfg.window
    u_rows, x_rows, z_rows, scenarios = [], [], [], []
    part0 = None
    k0 = None
    for traj, part in dataset:
        if traj.diverged:
            raise ValidationError("cannot train on a diverged trajectory")
        if abs(traj.dt - cfg.dt) > 1e-12:
            raise ValidationError(
                f"trajectory dt {traj.dt} differs from training dt {cfg.dt}"
            )
        if part0 is None:
            part0 = part
        elif (part.internal, part.tie_branches) != (part0.internal,
                                                    part0.tie_branches):
            raise ValidationError("dataset mixes different partitions")
        scn = scenario_of(traj)
        start = 0
        if scn is not None:
            start = max(0, int(round((scn.t_fault - 0.1 - traj.t0) / traj.dt)))
        if k0 is None:
            k0 = start
        elif start != k0:
            raise ValidationError(
                "batched windows need a common fault instant across scenarios"
            )
        if k0 + n + 1 > traj.data.shape[0]:
            raise ValidationError(
                f"window of {n} steps from sample {k0} does not fit a "
                f"trajectory with {traj.data.shape[0]} samples"
            )
        u_rows.append(_columns(traj, u_channels, k0, k0 + n + 1))
        if x_channels is not None:
            x_rows.append(_columns(traj, x_channels, k0, k0 + n + 1))
        if feature_channels is not None:
            z_rows.append(_columns(traj, feature_channels, k0, k0 + n + 1))
        scenarios.append(scn)
    schedule = regime_schedule(scenarios, n, cfg.dt, k_offset=k0)
    return WindowSet(
        u_hat=np.stack(u_rows),
        x_hat=np.stack(x_rows) if x_rows else None,
        z_hat=np.stack(z_rows) if z_rows else None,
        k0=k0,
        n_steps=n,
        eta=cfg.eta,
        schedule=schedule,
        scenarios=scenarios,
        partition=part0,
    )


# ---------------------------------------------------------------------------
# closed-loop (coupled) forward and its exact discrete adjoint


def _train_sim_config(cfg: TrainConfig, n: int) -> SimConfig:
    return SimConfig(dt=cfg.dt, t_end=(n + 1) * cfg.dt,
                     newton_tol=TRAIN_NEWTON_TOL, max_newton_iters=60)


def _net_deriv(model: neuralnet.NeuralEquivalence, theta: np.ndarray,
               hidden_replay: np.ndarray | None = None):
    # a replay sequence pins the recurrent state to recorded values, which
    # makes the loss the exact function the truncated adjoint differentiates
    if hidden_replay is None:
        def fn(u, z, hidden, k):
            return neuralnet.forward(model, u, z, hidden, theta)
    else:
        def fn(u, z, hidden, k):
            return neuralnet.forward(model, u, z, hidden_replay[k], theta)
    return fn


def coupled_forward(region: RegionDae, selector, model,
                    win: WindowSet, cfg: TrainConfig,
                    theta: np.ndarray | None = None,
                    hidden_replay: np.ndarray | None = None) -> CoupledRun:
    """Closed-loop window integration from the measured initial condition."""
    if win.x_hat is None:
        raise ValidationError("closed-loop training needs machine channels")
    th = model.theta if theta is None else theta
    x0 = win.x_hat[:, 0]
    u0 = win.u_hat[:, 0]
    hidden0 = np.zeros((win.n_scen, model.n_hidden)) if model.recurrent else None
    simcfg = _train_sim_config(cfg, win.n_steps)
    return simulate_coupled(region, selector,
                            _net_deriv(model, th, hidden_replay),
                            x0, u0, win.schedule, simcfg, hidden0)


def _coupled_loss(run: CoupledRun, win: WindowSet, variant: str):
    """Mean per-scenario window loss; diverged rows get the sentinel."""
    s = win.n_scen
    flags = run.diverged.copy()
    per = np.full(s, DIVERGED_LOSS)
    live = ~flags
    if run.n_filled == win.n_steps + 1 and live.any():
        ue = run.us[1:].transpose(1, 0, 2) - win.u_hat[:, 1:]
        terms = 0.5 * np.einsum("sk,skc,skc->s", np.broadcast_to(
            win.eta, (s, win.n_steps)), ue, ue)
        if variant == "pi":
            xe = run.xs[1:].transpose(1, 0, 2) - win.x_hat[:, 1:]
            terms = terms + 0.5 * np.einsum("sk,skc,skc->s", np.broadcast_to(
                win.eta, (s, win.n_steps)), xe, xe)
        per[live] = terms[live]
    return float(per.mean()), flags


def _vjp_rows(w: np.ndarray, jac: np.ndarray) -> np.ndarray:
    # cotangent pullback w^T J for a batch of jacobians (s, out, in)
    return np.einsum("so,soi->si", w, jac)


def _coupled_backward(model, run: CoupledRun, win: WindowSet,
                      variant: str, theta: np.ndarray) -> AdjointState:
    """Exact reverse sweep of coupled_forward's arithmetic."""
    region, selector = run.region, run.selector
    s = win.n_scen
    n = win.n_steps
    h = run.dt
    live = ~run.diverged
    weight = live.astype(float)[:, None] / s
    g = np.zeros(model.n_params)
    nu = win.u_hat.shape[-1]
    nx = win.x_hat.shape[-1]
    if run.n_filled != n + 1 or not live.any():
        return AdjointState(lambda_=np.zeros((s, nu)),
                            mu=np.zeros((s, nx)), g=g)

    eta = win.eta
    both = variant == "pi"
    bar_u = weight * eta[n - 1] * (run.us[n] - win.u_hat[:, n])
    bar_x = np.zeros((s, nx))
    if both:
        bar_x = weight * eta[n - 1] * (run.xs[n] - win.x_hat[:, n])
    cache: dict = {}
    for k in range(n - 1, -1, -1):
        regime = _schedule_view(region, run.schedule[k], selector, cache)
        x_n, u_n = run.xs[k], run.us[k]
        x_1 = run.xs[k + 1]
        u_pred = run.u_preds[k]
        hidden = None if run.hiddens is None else run.hiddens[k]

        # u_{k+1} = u_k + h/2 (a + b)
        bar_a = 0.5 * h * bar_u
        bar_b = 0.5 * h * bar_u
        bar_u0 = bar_u.copy()

        # b = net(u_pred, z_b, hidden)
        _, _, cache_b = neuralnet.forward_cached(model, u_pred, run.z_b[k],
                                                 hidden, theta)
        gu_b, gz_b, gt_b = neuralnet.vjp(model, cache_b, bar_b)
        g += gt_b
        bar_upred = gu_b

        # z_b = F(x_{k+1}, u_pred)
        zx_b, zu_b = region.feature_jacobians(selector, regime, x_1, u_pred)
        bar_x1 = bar_x + _vjp_rows(gz_b, zx_b)
        bar_upred = bar_upred + _vjp_rows(gz_b, zu_b)

        # x_{k+1} = x_k + h/2 (f(x_k,u_k) + f(x_{k+1},u_pred))
        j1, k1 = region.jacobians(regime, x_1, u_pred)
        j0, k0j = region.jacobians(regime, x_n, u_n)
        a_t = np.swapaxes(np.eye(nx) - 0.5 * h * j1, -1, -2)
        w = np.linalg.solve(a_t, bar_x1[..., None])[..., 0]
        bar_x0 = w + 0.5 * h * _vjp_rows(w, j0)
        bar_u0 = bar_u0 + 0.5 * h * _vjp_rows(w, k0j)
        bar_upred = bar_upred + 0.5 * h * _vjp_rows(w, k1)

        # u_pred = u_k + h a
        bar_u0 = bar_u0 + bar_upred
        bar_a = bar_a + h * bar_upred

        # a = net(u_k, z_a, hidden)
        _, _, cache_a = neuralnet.forward_cached(model, u_n, run.z_a[k],
                                                 hidden, theta)
        gu_a, gz_a, gt_a = neuralnet.vjp(model, cache_a, bar_a)
        g += gt_a
        bar_u0 = bar_u0 + gu_a

        # z_a = F(x_k, u_k)
        zx_a, zu_a = region.feature_jacobians(selector, regime, x_n, u_n)
        bar_x0 = bar_x0 + _vjp_rows(gz_a, zx_a)
        bar_u0 = bar_u0 + _vjp_rows(gz_a, zu_a)

        # observation jump at interior sample k
        if k >= 1:
            bar_u0 = bar_u0 + weight * eta[k - 1] * (u_n - win.u_hat[:, k])
            if both:
                bar_x0 = bar_x0 + weight * eta[k - 1] * (x_n - win.x_hat[:, k])
        bar_u, bar_x = bar_u0, bar_x0

    return AdjointState(lambda_=bar_u, mu=bar_x, g=g)


# ---------------------------------------------------------------------------
# teacher-forced rollout and its adjoint


@dataclass
class TeacherRun:
    """Dense record of an open-loop boundary rollout."""

    dt: float
    us: np.ndarray
    u_preds: np.ndarray
    hiddens: np.ndarray | None
    diverged: np.ndarray
    n_filled: int


def _stage_a_shift(win: WindowSet) -> np.ndarray:
    """Bool (n, s): read the k+1 sample for the stage-a feature of step k.

    The forward engine evaluates both trapezoid stages of a step under the
    step's own regime, but the recorded sample at a switch instant still
    belongs to the outgoing regime.  The first post-switch sample is the
    closest recorded stand-in, so switch-straddling steps read it for both
    stages; everywhere else stage a reads its own sample.
    """
    n, s = win.n_steps, win.n_scen
    shift = np.zeros((n, s), dtype=bool)
    prev: tuple = (None,) * s
    for k in range(n):
        keys = win.schedule[k]
        shift[k] = [keys[j] != prev[j] for j in range(s)]
        prev = keys
    return shift


def teacher_forward(model, win: WindowSet, cfg: TrainConfig,
                    theta: np.ndarray | None = None,
                    hidden_replay: np.ndarray | None = None) -> TeacherRun:
    """Heun rollout of the boundary state against measured features."""
    if win.z_hat is None:
        raise ValidationError("teacher-forced training needs feature channels")
    th = model.theta if theta is None else theta
    s, n = win.n_scen, win.n_steps
    nu = win.u_hat.shape[-1]
    h = cfg.dt
    us = np.empty((n + 1, s, nu))
    u_preds = np.empty((n, s, nu))
    hiddens = None
    hidden = None
    if model.recurrent:
        hidden = np.zeros((s, model.n_hidden))
        hiddens = np.empty((n + 1, s, model.n_hidden))
        hiddens[0] = hidden
    u = win.u_hat[:, 0].copy()
    us[0] = u
    diverged = np.zeros(s, dtype=bool)
    shift = _stage_a_shift(win)
    thr = 1.0e3
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            h_in = hidden if hidden_replay is None else hidden_replay[k]
            z_a = np.where(shift[k][:, None], win.z_hat[:, k + 1],
                           win.z_hat[:, k])
            a, hidden_new = neuralnet.forward(model, u, z_a, h_in, th)
            u_pred = u + h * a
            b, _ = neuralnet.forward(model, u_pred, win.z_hat[:, k + 1],
                                     h_in, th)
            u_next = u + 0.5 * h * (a + b)
            bad = ~np.isfinite(u_next).all(axis=-1)
            ok = np.isfinite(u_next).all(axis=-1)
            over = np.zeros(s, dtype=bool)
            over[ok] = np.abs(u_next[ok]).max(axis=-1) > thr
            newly = ~diverged & (bad | over)
            diverged |= newly
            live = ~diverged
            u = np.where(live[:, None], u_next, u)
            us[k + 1] = u
            u_preds[k] = np.where(live[:, None], u_pred, u)
            if hiddens is not None:
                hidden = np.where(live[:, None], hidden_new, hidden)
                hiddens[k + 1] = hidden
    return TeacherRun(dt=h, us=us, u_preds=u_preds, hiddens=hiddens,
                      diverged=diverged, n_filled=n + 1)


def _teacher_loss(run: TeacherRun, win: WindowSet):
    s, n = win.n_scen, win.n_steps
    flags = run.diverged.copy()
    per = np.full(s, DIVERGED_LOSS)
    live = ~flags
    if live.any():
        ue = run.us[1:].transpose(1, 0, 2) - win.u_hat[:, 1:]
        terms = 0.5 * np.einsum("sk,skc,skc->s",
                                np.broadcast_to(win.eta, (s, n)), ue, ue)
        per[live] = terms[live]
    return float(per.mean()), flags


def _teacher_backward(model, run: TeacherRun, win: WindowSet,
                      theta: np.ndarray) -> AdjointState:
    s, n = win.n_scen, win.n_steps
    h = run.dt
    live = ~run.diverged
    weight = live.astype(float)[:, None] / s
    g = np.zeros(model.n_params)
    eta = win.eta
    shift = _stage_a_shift(win)
    bar_u = weight * eta[n - 1] * (run.us[n] - win.u_hat[:, n])
    for k in range(n - 1, -1, -1):
        u_n = run.us[k]
        u_pred = run.u_preds[k]
        hidden = None if run.hiddens is None else run.hiddens[k]
        bar_a = 0.5 * h * bar_u
        bar_b = 0.5 * h * bar_u
        bar_u0 = bar_u.copy()
        _, _, cache_b = neuralnet.forward_cached(model, u_pred,
                                                 win.z_hat[:, k + 1],
                                                 hidden, theta)
        gu_b, _, gt_b = neuralnet.vjp(model, cache_b, bar_b)
        g += gt_b
        bar_u0 = bar_u0 + gu_b
        bar_a = bar_a + h * gu_b
        z_a = np.where(shift[k][:, None], win.z_hat[:, k + 1],
                       win.z_hat[:, k])
        _, _, cache_a = neuralnet.forward_cached(model, u_n, z_a,
                                                 hidden, theta)
        gu_a, _, gt_a = neuralnet.vjp(model, cache_a, bar_a)
        g += gt_a
        bar_u0 = bar_u0 + gu_a
        if k >= 1:
            bar_u0 = bar_u0 + weight * eta[k - 1] * (u_n - win.u_hat[:, k])
        bar_u = bar_u0
    return AdjointState(lambda_=bar_u, mu=np.zeros((s, 0)), g=g)


# ---------------------------------------------------------------------------
# public loss / adjoint entry points


def _pi_context(model, dataset, cfg):
    grid = grid_of(dataset[0][0])
    partition = dataset[0][1]
    _, region = internal_region(grid, partition)
    selector = region.compile_selector(model.feature_spec)
    win = prepare_windows(dataset, cfg, tie_channels(partition),
                          x_channels=machine_channels(grid, partition))
    _check_model_dims(model, win)
    return region, selector, win


def _ex_only_window(model, dataset, cfg):
    partition = dataset[0][1]
    traj0 = dataset[0][0]
    source = all(c in traj0.channels
                 for c in tie_channels(partition, source=True))
    u_ch = tie_channels(partition, source=source)
    win = prepare_windows(dataset, cfg, u_ch,
                          feature_channels=model.feature_spec)
    _check_model_dims(model, win)
    return win


def _check_model_dims(model, win: WindowSet) -> None:
    nu = win.u_hat.shape[-1]
    if model.n_ex != nu or model.layer_sizes[-1] != nu:
        raise ValidationError(
            f"model state width {model.n_ex}/{model.layer_sizes[-1]} does "
            f"not match the {nu} boundary channels of the window"
        )


def loss_continuous(model, dataset, cfg: TrainConfig, variant: str) -> float:
    """Window loss of a model against measured trajectories.

    dataset is a list of (Trajectory, Partition) pairs.  The "pi" variant
    re-integrates the coupled system from the measured initial condition
    and scores both machine and boundary states; "ex_only" rolls the
    boundary state out against measured features and scores it alone.
    Diverged scenarios contribute a large sentinel so optimization can
    continue past them.
    """
    if variant not in LOSS_VARIANTS:
        raise ValidationError(f"unknown loss variant {variant!r}")
    if variant == "pi":
        region, selector, win = _pi_context(model, dataset, cfg)
        run = coupled_forward(region, selector, model, win, cfg)
        loss, _ = _coupled_loss(run, win, "pi")
        return loss
    win = _ex_only_window(model, dataset, cfg)
    run = teacher_forward(model, win, cfg)
    loss, _ = _teacher_loss(run, win)
    return loss


def adjoint_backward(model, forward_solution, window: WindowSet,
                     cfg: TrainConfig, variant: str) -> AdjointState:
    """Adjoint state at the window start for a stored forward solution.

    ``forward_solution`` is the CoupledRun or TeacherRun whose arithmetic
    will be reversed; it must cover the same scenarios as ``window``.
    """
    if variant not in LOSS_VARIANTS:
        raise ValidationError(f"unknown loss variant {variant!r}")
    if isinstance(forward_solution, CoupledRun):
        if forward_solution.us.shape[1] != window.n_scen:
            raise ValidationError("forward solution/window scenario mismatch")
        return _coupled_backward(model, forward_solution, window, variant,
                                 model.theta)
    if isinstance(forward_solution, TeacherRun):
        if variant != "ex_only":
            raise ValidationError(
                "teacher-forced solutions support only the ex_only variant"
            )
        if forward_solution.us.shape[1] != window.n_scen:
            raise ValidationError("forward solution/window scenario mismatch")
        return _teacher_backward(model, forward_solution, window, model.theta)
    raise ValidationError("forward_solution must be a stored forward record")


# ---------------------------------------------------------------------------
# optimizer


def optimizer_step(state, theta: np.ndarray, grad: np.ndarray,
                   cfg: TrainConfig):
    """One descent update; returns (new_theta, new_state)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape:
        raise ValidationError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient in optimizer step")
    if cfg.optimizer == "sgd":
        return theta - cfg.lr * grad, state
    if state is None:
        state = {"m": np.zeros_like(theta), "v": np.zeros_like(theta), "t": 0}
    t = state["t"] + 1
    m = cfg.beta1 * state["m"] + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state["v"] + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    theta_new = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return theta_new, {"m": m, "v": v, "t": t}


def _batch_indices(it: int, n_scen: int, batch: int) -> list[int]:
    # deterministic round-robin so runs are bit-reproducible
    if batch <= 0 or batch >= n_scen:
        return list(range(n_scen))
    lo = (it * batch) % n_scen
    return [(lo + j) % n_scen for j in range(batch)]


def _optimize(model, problem, cfg: TrainConfig) -> TrainReport:
    losses: list[float] = []
    gnorms: list[float] = []
    walls: list[float] = []
    state = None
    consec_div = 0
    converged = False
    meta: dict = {}
    prev = None
    for it in range(cfg.max_iters):
        t_start = time.perf_counter()
        loss, grad, all_div = problem.value_and_grad(model.theta, it)
        losses.append(float(loss))
        gnorms.append(float(np.linalg.norm(grad)))
        stop = False
        if all_div:
            consec_div += 1
            if consec_div >= 10:
                meta["aborted"] = ("all scenarios diverged for 10 "
                                   "consecutive iterations")
                stop = True
        else:
            consec_div = 0
        # a run sitting at the divergence sentinel repeats the same loss
        # exactly; that is not convergence, so the plateau test skips it
        if (not stop and not all_div and prev is not None
                and abs(prev - loss) < cfg.tol):
            converged = True
            stop = True
        prev = loss
        if not stop:
            theta, state = optimizer_step(state, model.theta, grad, cfg)
            model.theta = theta
        walls.append(time.perf_counter() - t_start)
        if stop:
            break
    return TrainReport(loss_history=losses, grad_norm_history=gnorms,
                       iter_seconds=walls, model=model, converged=converged,
                       meta=meta)


# ---------------------------------------------------------------------------
# training problems


class _PiProblem:
    def __init__(self, region, selector, model, win: WindowSet,
                 cfg: TrainConfig):
        self.region, self.selector = region, selector
        self.model, self.win, self.cfg = model, win, cfg

    def _run(self, theta, win, hidden_replay=None):
        return coupled_forward(self.region, self.selector, self.model,
                               win, self.cfg, theta, hidden_replay)

    def value_and_grad(self, theta, it):
        idx = _batch_indices(it, self.win.n_scen, self.cfg.batch)
        win = self.win if len(idx) == self.win.n_scen else self.win.subset(idx)
        run = self._run(theta, win)
        loss, flags = _coupled_loss(run, win, "pi")
        if flags.all():
            return loss, np.zeros(self.model.n_params), True
        adj = _coupled_backward(self.model, run, win, "pi", theta)
        return loss, adj.g, False

    def loss(self, theta, hidden_replay=None):
        run = self._run(theta, self.win, hidden_replay)
        return _coupled_loss(run, self.win, "pi")[0]

    def hidden_record(self, theta):
        run = self._run(theta, self.win)
        return run.hiddens


class _TeacherProblem:
    def __init__(self, model, win: WindowSet, cfg: TrainConfig):
        self.model, self.win, self.cfg = model, win, cfg

    def value_and_grad(self, theta, it):
        idx = _batch_indices(it, self.win.n_scen, self.cfg.batch)
        win = self.win if len(idx) == self.win.n_scen else self.win.subset(idx)
        run = teacher_forward(self.model, win, self.cfg, theta)
        loss, flags = _teacher_loss(run, win)
        if flags.all():
            return loss, np.zeros(self.model.n_params), True
        adj = _teacher_backward(self.model, run, win, theta)
        return loss, adj.g, False

    def loss(self, theta, hidden_replay=None):
        run = teacher_forward(self.model, self.win, self.cfg, theta,
                              hidden_replay)
        return _teacher_loss(run, self.win)[0]

    def hidden_record(self, theta):
        run = teacher_forward(self.model, self.win, self.cfg, theta)
        return run.hiddens


class _DiscreteProblem:
    """Pointwise trapezoidal-average regression onto difference quotients."""

    def __init__(self, model, win: WindowSet, cfg: TrainConfig):
        self.model, self.win, self.cfg = model, win, cfg
        self.quot = np.diff(win.u_hat, axis=1) / cfg.dt

    def _residual(self, theta, win, quot):
        y, _, cache = neuralnet.forward_cached(
            self.model, win.u_hat, win.z_hat, None, theta)
        fit = 0.5 * (y[:, 1:] + y[:, :-1])
        return fit - quot, y, cache

    def value_and_grad(self, theta, it):
        idx = _batch_indices(it, self.win.n_scen, self.cfg.batch)
        win = self.win if len(idx) == self.win.n_scen else self.win.subset(idx)
        quot = self.quot if win is self.win else self.quot[idx]
        res, y, cache = self._residual(theta, win, quot)
        s, n = win.n_scen, win.n_steps
        w = win.eta[None, :, None] / s
        loss = float(0.5 * np.sum(w * res * res))
        bar_y = np.zeros_like(y)
        bar_y[:, 1:] += 0.5 * w * res
        bar_y[:, :-1] += 0.5 * w * res
        _, _, g = neuralnet.vjp(self.model, cache, bar_y)
        return loss, g, False

    def loss(self, theta):
        res, _, _ = self._residual(theta, self.win, self.quot)
        w = self.win.eta[None, :, None] / self.win.n_scen
        return float(0.5 * np.sum(w * res * res))


# ---------------------------------------------------------------------------
# trainers


def _init_model(cfg: TrainConfig, n_u: int, feature_spec: list[str],
                recurrent: bool) -> neuralnet.NeuralEquivalence:
    layer_sizes = [n_u + len(feature_spec)] + [int(w) for w in cfg.arch] + [n_u]
    return neuralnet.NeuralEquivalence(
        layer_sizes=layer_sizes,
        activation=cfg.activation,
        feature_spec=list(feature_spec),
        theta=neuralnet.init_params(layer_sizes, recurrent, seed=cfg.seed),
        recurrent=recurrent,
    )


def _freeze_normalization(model, win: WindowSet, dt: float) -> None:
    """Input shift/scale from window samples, output scale from quotients."""
    u = win.u_hat.reshape(-1, win.u_hat.shape[-1])
    z = win.z_hat.reshape(-1, win.z_hat.shape[-1])
    inputs = np.concatenate([u, z], axis=1)
    quot = np.diff(win.u_hat, axis=1).reshape(-1, win.u_hat.shape[-1]) / dt
    neuralnet.normalize_from_data(model, inputs, quot)


def train_pi_neudye(grid: GridModel, partition: Partition, dataset,
                    cfg: TrainConfig,
                    model: neuralnet.NeuralEquivalence | None = None,
                    feature_spec: list[str] | None = None) -> TrainReport:
    """Closed-loop training of the boundary equivalent.

    Each iteration re-integrates the coupled hybrid over every window in
    the batch, reverses the arithmetic for the exact gradient of the
    both-state loss, and takes one optimizer step.
    """
    if cfg.variant != "pi":
        raise ValidationError("train_pi_neudye expects variant 'pi'")
    _, region = internal_region(grid, partition)
    if feature_spec is None:
        feature_spec = _default_features(partition)
    u_ch = tie_channels(partition)
    win = prepare_windows(dataset, cfg, u_ch,
                          x_channels=machine_channels(grid, partition),
                          feature_channels=feature_spec)
    if model is None:
        model = _init_model(cfg, len(u_ch), feature_spec, recurrent=False)
        _freeze_normalization(model, win, cfg.dt)
    _check_model_dims(model, win)
    selector = region.compile_selector(model.feature_spec)
    problem = _PiProblem(region, selector, model, win, cfg)
    return _optimize(model, problem, cfg)


def train_discrete_baseline(dataset, cfg: TrainConfig,
                            model: neuralnet.NeuralEquivalence | None = None,
                            feature_spec: list[str] | None = None) -> TrainReport:
    """Discrete-time supervised baseline on the same data and architecture.

    Fits the trapezoidal average of network outputs at consecutive samples
    to measured difference quotients; no integration enters the loss, which
    is exactly what makes the baseline cheap and what costs it closed-loop
    fidelity.
    """
    if cfg.variant != "discrete":
        raise ValidationError("train_discrete_baseline expects variant 'discrete'")
    partition = dataset[0][1]
    if feature_spec is None:
        feature_spec = _default_features(partition)
    u_ch = tie_channels(partition)
    win = prepare_windows(dataset, cfg, u_ch, feature_channels=feature_spec)
    if model is None:
        model = _init_model(cfg, len(u_ch), feature_spec, recurrent=False)
        _freeze_normalization(model, win, cfg.dt)
    _check_model_dims(model, win)
    problem = _DiscreteProblem(model, win, cfg)
    return _optimize(model, problem, cfg)


def _default_features(partition: Partition) -> list[str]:
    out = []
    for k in range(1, len(partition.tie_branches) + 1):
        out += [f"port{k}.v.re", f"port{k}.v.im"]
    return out


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    rel_err: np.ndarray
    max_rel_err: float
    worst_index: int
    adjoint: np.ndarray
    fd: np.ndarray


def grad_check(model, dataset, cfg: TrainConfig,
               variant: str | None = None,
               step: float = 1.0e-5) -> GradCheckReport:
    """Adjoint gradient against central finite differences, per parameter.

    For the recurrent flavor the difference quotients hold the hidden
    sequence at its recorded forward values, since the training gradient is
    of exactly that restricted function (no backpropagation through time).
    The relative error for a parameter with both gradients below roundoff
    is defined as zero.
    """
    if variant is None:
        variant = "pi" if cfg.variant == "pi" else "ex_only"
    if variant == "pi":
        region, selector, win = _pi_context(model, dataset, cfg)
        problem = _PiProblem(region, selector, model, win, cfg)
    else:
        win = _ex_only_window(model, dataset, cfg)
        problem = _TeacherProblem(model, win, cfg)
    theta0 = model.theta.copy()
    _, g_adj, _ = problem.value_and_grad(theta0, 0)
    replay = problem.hidden_record(theta0) if model.recurrent else None
    g_fd = np.zeros_like(theta0)
    for i in range(theta0.size):
        e = np.zeros_like(theta0)
        e[i] = step
        g_fd[i] = (problem.loss(theta0 + e, replay)
                   - problem.loss(theta0 - e, replay)) / (2 * step)
    denom = np.maximum(np.abs(g_adj), np.abs(g_fd))
    rel = np.zeros_like(theta0)
    mask = denom > 1.0e-12
    rel[mask] = np.abs(g_adj - g_fd)[mask] / denom[mask]
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(rel_err=rel, max_rel_err=float(rel.max(initial=0.0)),
                           worst_index=worst, adjoint=g_adj, fd=g_fd)
