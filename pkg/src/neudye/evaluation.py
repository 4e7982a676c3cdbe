"""Closed-loop accuracy evaluation of trained boundary equivalents.

Generates reproducible fault scenario sets, replays each test fault with
the full model (truth) and with every hybrid model under test, and scores
the hybrids channel by channel.  The relative error of a channel is

    RMS(pred - truth) / RMS(truth)

over the post-fault window [t_clear, t_end]; the fault-on interval is
excluded because it is dominated by the algebraic jump rather than by the
dynamics asked of the equivalent.  The report also carries oscillation-mode
comparisons (DFT peak picking) and the electrical distance of every test
fault to the nearest training fault, the predictor of generalization.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import dataclass, field

import numpy as np

from neudye import dp as dp_mod
from neudye import neuralnet
from neudye.errors import NumericalError, ValidationError
from neudye.grid import FaultScenario, GridModel, Partition, electrical_distance_matrix
from neudye.simulator import (SimConfig, Trajectory, hybrid_channels,
                              simulate_full, simulate_hybrid_dp,
                              simulate_hybrid_pi)

__all__ = [
    "ScenarioSet",
    "EvalReport",
    "generate_scenarios",
    "trajectory_error",
    "extract_modes",
    "electrical_distance",
    "evaluate",
]

ROLES = ("train", "test")
CSV_HEADER = ["scenario", "bus", "t_clear", "model", "channel",
              "rel_err", "distance", "diverged"]


# ---------------------------------------------------------------------------
# scenario sets


@dataclass
class ScenarioSet:
    """A reproducible batch of fault scenarios with a declared role."""

    scenarios: list
    role: str
    seed: int

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"role must be one of {ROLES}, got {self.role!r}")
        self.seed = int(self.seed)
        for scn in self.scenarios:
            if not isinstance(scn, FaultScenario):
                raise ValidationError("scenario set entries must be FaultScenario")

    @property
    def buses(self) -> set:
        return {scn.fault_bus for scn in self.scenarios}

    def to_json_dict(self) -> dict:
        return {"role": self.role, "seed": self.seed,
                "scenarios": [s.to_json_dict() for s in self.scenarios]}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ScenarioSet":
        want = {"role", "seed", "scenarios"}
        if set(doc) != want:
            raise ValidationError(
                f"scenario set document must have keys {sorted(want)}, "
                f"got {sorted(doc)}")
        return cls(scenarios=[FaultScenario.from_json_dict(d)
                              for d in doc["scenarios"]],
                   role=doc["role"], seed=doc["seed"])

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ScenarioSet":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


def generate_scenarios(buses: list, t_fault: float, clear_min: float,
                       clear_max: float, count: int, seed: int,
                       role: str = "test") -> ScenarioSet:
    """Faults cycled round-robin over ``buses`` with uniform clearing times.

    Deterministic in ``seed``; clearing times are drawn from
    [clear_min, clear_max) one per scenario.
    """
    if not buses:
        raise ValidationError("need at least one fault bus")
    if not t_fault < clear_min < clear_max:
        raise ValidationError(
            "need t_fault < clear_min < clear_max, got "
            f"{t_fault}, {clear_min}, {clear_max}")
    if count < 1:
        raise ValidationError("scenario count must be positive")
    rng = np.random.default_rng(seed)
    clears = rng.uniform(clear_min, clear_max, size=count)
    scns = [FaultScenario(fault_bus=int(buses[i % len(buses)]),
                          t_fault=float(t_fault), t_clear=float(clears[i]))
            for i in range(count)]
    return ScenarioSet(scenarios=scns, role=role, seed=seed)


# ---------------------------------------------------------------------------
# error metric


def _rel_errors(pred: Trajectory, truth: Trajectory, channels) -> dict:
    if abs(pred.dt - truth.dt) > 1e-12:
        raise ValidationError("pred and truth sample steps differ")
    missing = [c for c in channels
               if c not in pred.channels or c not in truth.channels]
    if missing:
        raise ValidationError(f"channels missing from pred or truth: {missing}")
    from neudye.simulator import scenario_of
    scn = scenario_of(truth)
    n = min(pred.n_samples, truth.n_samples)
    lo = 0
    if scn is not None:
        lo = int(round((scn.t_clear - truth.t0) / truth.dt)) + 1
        if not 0 <= lo < n:
            raise ValidationError("post-fault window is empty")
    out = {}
    for ch in channels:
        if pred.diverged:
            out[ch] = float("inf")
            continue
        diff = pred.column(ch)[lo:n] - truth.column(ch)[lo:n]
        num = float(np.sqrt(np.mean(diff ** 2)))
        den = float(np.sqrt(np.mean(truth.column(ch)[lo:n] ** 2)))
        if den == 0.0:
            out[ch] = 0.0 if num == 0.0 else float("inf")
        else:
            out[ch] = num / den
    return out


def trajectory_error(pred: Trajectory, truth: Trajectory,
                     channels) -> tuple[dict, float]:
    """Per-channel RMS-ratio errors plus their mean.

    A divergence-flagged prediction scores infinity on every channel.
    """
    per = _rel_errors(pred, truth, list(channels))
    return per, float(np.mean(list(per.values())))


# ---------------------------------------------------------------------------
# oscillation modes


def extract_modes(trajectory: Trajectory, channel: str,
                  band_hz: tuple, n_modes: int) -> list:
    """Largest spectral peaks of a channel within a frequency band.

    Mean-removed rectangular-window DFT; a peak is a local maximum of the
    single-sided amplitude spectrum.  Peak frequency is refined by parabolic
    interpolation over the three straddling bins, the reported magnitude is
    the raw bin amplitude.  Returns up to ``n_modes`` (frequency_hz,
    magnitude) pairs, largest magnitude first.
    """
    lo, hi = float(band_hz[0]), float(band_hz[1])
    if not 0.0 < lo < hi:
        raise ValidationError(f"need 0 < lo < hi, got band {band_hz}")
    if n_modes < 1:
        raise ValidationError("n_modes must be positive")
    y = trajectory.column(channel)
    n = y.size
    duration = n * trajectory.dt
    if duration * lo < 5.0 - 1e-9:
        raise ValidationError(
            f"window of {duration:.3g} s too short to resolve {lo} Hz; "
            f"need at least {5.0 / lo:.3g} s (five cycles)")
    if hi > 0.5 / trajectory.dt:
        raise ValidationError(f"band edge {hi} Hz above Nyquist")
    amp = 2.0 / n * np.abs(np.fft.rfft(y - y.mean()))
    freqs = np.fft.rfftfreq(n, trajectory.dt)
    peaks = []
    for k in range(1, amp.size - 1):
        if not lo <= freqs[k] <= hi:
            continue
        if amp[k] > amp[k - 1] and amp[k] >= amp[k + 1]:
            denom = amp[k - 1] - 2.0 * amp[k] + amp[k + 1]
            shift = 0.0 if denom == 0.0 else 0.5 * (amp[k - 1] - amp[k + 1]) / denom
            peaks.append((float(freqs[k] + shift * (freqs[1] - freqs[0])),
                          float(amp[k])))
    peaks.sort(key=lambda fm: -fm[1])
    return peaks[:n_modes]


# ---------------------------------------------------------------------------
# electrical distance


def electrical_distance(grid: GridModel, train_buses, test_bus: int) -> float:
    """Shortest reactance-weighted path from the test bus to the train set.

    Parallel branches combine like parallel reactances; a test bus that is
    itself a training fault location has distance zero.
    """
    ids = {b.id for b in grid.buses}
    train = {int(b) for b in train_buses}
    if int(test_bus) not in ids or not train <= ids:
        raise ValidationError("distance query names buses outside the grid")
    if not train:
        raise ValidationError("empty training bus set")
    if int(test_bus) in train:
        return 0.0
    adj = electrical_distance_matrix(grid)
    dist = {int(test_bus): 0.0}
    heap = [(0.0, int(test_bus))]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist.get(node, np.inf):
            continue
        if node in train:
            return d
        for nbr, w in adj[node].items():
            nd = d + w
            if nd < dist.get(nbr, np.inf):
                dist[nbr] = nd
                heapq.heappush(heap, (nd, nbr))
    return float("inf")


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class EvalReport:
    """Flat per-(scenario, model, channel) error table plus derived views.

    ``stats`` is recomputable from ``rows`` via :meth:`aggregate`; it is
    stored so the JSON artifact is self-contained for plotting.
    """

    rows: list
    stats: dict
    modes: list = field(default_factory=list)
    distances: list = field(default_factory=list)

    @staticmethod
    def scenario_errors(rows: list) -> dict:
        """Mean channel error per (model, scenario); inf when diverged."""
        acc: dict = {}
        for row in rows:
            acc.setdefault((row["model"], row["scenario"]), []).append(
                row["rel_err"])
        return {key: float(np.mean(errs)) for key, errs in acc.items()}

    @staticmethod
    def aggregate(rows: list) -> dict:
        """Per-model mean/max/quartiles over finite scenario errors.

        Quartiles use linear interpolation; diverged scenarios are counted
        separately and excluded from the moments.
        """
        per_scn = EvalReport.scenario_errors(rows)
        models: dict = {}
        for (model, _), err in sorted(per_scn.items()):
            models.setdefault(model, []).append(err)
        out = {}
        for model, errs in models.items():
            finite = [e for e in errs if np.isfinite(e)]
            n_div = len(errs) - len(finite)
            if finite:
                q1, q2, q3 = (float(q) for q in
                              np.percentile(finite, [25.0, 50.0, 75.0]))
                entry = {"mean": float(np.mean(finite)),
                         "max": float(np.max(finite)),
                         "quartiles": [q1, q2, q3]}
            else:
                entry = {"mean": None, "max": None, "quartiles": None}
            entry["n_scenarios"] = len(errs)
            entry["n_diverged"] = n_div
            out[model] = entry
        return out

    def to_json_dict(self) -> dict:
        return {"rows": self.rows, "stats": self.stats,
                "modes": self.modes, "distances": self.distances}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EvalReport":
        want = {"rows", "stats", "modes", "distances"}
        if set(doc) != want:
            raise ValidationError(
                f"eval report document must have keys {sorted(want)}, "
                f"got {sorted(doc)}")
        return cls(rows=doc["rows"], stats=doc["stats"],
                   modes=doc["modes"], distances=doc["distances"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow([row["scenario"], row["bus"],
                             repr(float(row["t_clear"])), row["model"],
                             row["channel"], repr(float(row["rel_err"])),
                             repr(float(row["distance"])),
                             "true" if row["diverged"] else "false"])
        return buf.getvalue()

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


def _dispatch(grid: GridModel, partition: Partition, model,
              scenario: FaultScenario, cfg: SimConfig) -> Trajectory:
    if isinstance(model, dp_mod.DpModel):
        return simulate_hybrid_dp(grid, partition, model, scenario, cfg)
    if isinstance(model, neuralnet.NeuralEquivalence):
        return simulate_hybrid_pi(grid, partition, model, scenario, cfg)
    sim = getattr(model, "simulate", None)
    if callable(sim):
        return sim(grid, partition, scenario, cfg)
    raise ValidationError(f"cannot simulate model of type {type(model).__name__}")


def evaluate(models: list, grid: GridModel, partition: Partition,
             test_set: ScenarioSet, train_set: ScenarioSet, cfg: SimConfig,
             mode_channel: str | None = None,
             mode_band: tuple = (0.2, 2.5)) -> EvalReport:
    """Score every model on every test scenario against the full run.

    ``models`` is a list of (name, model) pairs; a NeuralEquivalence runs
    through the tie-current hybrid, a DpModel through the Norton hybrid,
    and any other object may supply its own
    ``simulate(grid, partition, scenario, cfg)`` method.
    Divergences are recorded as infinite error rather than raised.  With
    ``mode_channel`` set, the dominant spectral peak of that channel is
    compared between truth and prediction per scenario.
    """
    train_buses = train_set.buses
    rows: list = []
    modes: list = []
    distances: list = []
    for idx, scn in enumerate(test_set.scenarios):
        truth = simulate_full(grid, scn, cfg, partition=partition)
        distance = electrical_distance(grid, train_buses, scn.fault_bus)
        distances.append(distance)
        channels = hybrid_channels(grid, partition)
        for name, model in models:
            try:
                pred = _dispatch(grid, partition, model, scn, cfg)
                per, _ = trajectory_error(pred, truth, channels)
                diverged = pred.diverged
            except NumericalError:
                per = {ch: float("inf") for ch in channels}
                pred = None
                diverged = True
            for ch in channels:
                rows.append({"scenario": idx, "bus": scn.fault_bus,
                             "t_clear": scn.t_clear, "model": name,
                             "channel": ch, "rel_err": per[ch],
                             "distance": distance, "diverged": diverged})
            if mode_channel is not None and pred is not None and not diverged:
                got = extract_modes(pred, mode_channel, mode_band, 1)
                want = extract_modes(truth, mode_channel, mode_band, 1)
                if got and want:
                    modes.append({"scenario": idx, "model": name,
                                  "freq_hz": got[0][0], "magnitude": got[0][1],
                                  "freq_hz_full": want[0][0],
                                  "magnitude_full": want[0][1]})
    return EvalReport(rows=rows, stats=EvalReport.aggregate(rows),
                      modes=modes, distances=distances)
