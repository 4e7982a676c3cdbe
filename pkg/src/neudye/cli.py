"""Command line surface over the library pipeline.

One subcommand per stage: fixture emission, transient simulation, scenario
generation, training (every variant), closed-loop evaluation, and electrical
distance queries.  All numerics live in config files so that a run is fully
described by its file inputs; flags carry only paths, names, and seeds.

Every file-producing command writes a RunManifest sidecar recording the
argument vector, the resolved configuration, SHA-256 hashes of all input
files, the seed, the package version, and a timestamp.  Rerunning a command
with unchanged inputs reproduces the primary outputs byte for byte; the
manifest timestamp is the only thing that moves.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from neudye import __version__, dp, evaluation, fixtures, training
from neudye.errors import NumericalError, ValidationError
from neudye.grid import FaultScenario, GridModel, Partition
from neudye.neuralnet import NeuralEquivalence
from neudye.simulator import (SimConfig, Trajectory, derive_boundary_channels,
                              simulate_full)

__all__ = ["RunManifest", "main"]


@dataclass
class RunManifest:
    """Everything needed to reproduce one command invocation bit-exactly."""

    command: list
    config: dict
    inputs: dict
    seed: int | None
    version: str
    created: str

    def to_json_dict(self) -> dict:
        return {"command": list(self.command), "config": self.config,
                "inputs": self.inputs, "seed": self.seed,
                "version": self.version, "created": self.created}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RunManifest":
        want = {"command", "config", "inputs", "seed", "version", "created"}
        if set(doc) != want:
            raise ValidationError(
                f"manifest must have keys {sorted(want)}, got {sorted(doc)}")
        return cls(command=doc["command"], config=doc["config"],
                   inputs=doc["inputs"], seed=doc["seed"],
                   version=doc["version"], created=doc["created"])

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


# ---------------------------------------------------------------------------
# small helpers


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _strip_suffix(path: str) -> str:
    for suffix in (".json", ".csv"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _write_manifest(argv: list, config: dict, input_paths: list,
                    seed: int | None, path: str) -> None:
    manifest = RunManifest(
        command=list(argv), config=config,
        inputs={p: _sha256(p) for p in sorted(set(input_paths))},
        seed=seed, version=__version__,
        created=datetime.now(timezone.utc).isoformat())
    manifest.save(path)


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def _load_d_matrix(path: str) -> np.ndarray:
    doc = _load_json(path)
    cells = doc.get("d") if isinstance(doc, dict) else doc
    if cells is None:
        raise ValidationError(f"{path}: no 'd' entry in document")
    try:
        return np.array([[complex(c["re"], c["im"]) for c in row]
                         for row in cells], dtype=complex)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed d matrix: {exc}") from exc


def _load_model(path: str):
    doc = _load_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a model document")
    if set(doc) == {"d", "net", "ports"}:
        return dp.DpModel.from_json_dict(doc)
    return NeuralEquivalence.from_json_dict(doc)


def _load_dataset(data_dir: str, grid: GridModel,
                  partition: Partition) -> tuple[list, list]:
    paths = sorted(glob.glob(os.path.join(data_dir, "*.csv")))
    if not paths:
        raise ValidationError(f"no trajectory CSV files in {data_dir}")
    dataset = []
    inputs = []
    tie_ch = training.tie_channels(partition)
    for p in paths:
        traj = Trajectory.load(p)
        if any(ch not in traj.channels for ch in tie_ch):
            traj = derive_boundary_channels(traj, grid, partition)
        dataset.append((traj, partition))
        inputs += [p, p + ".meta.json"]
    return dataset, inputs


# ---------------------------------------------------------------------------
# command handlers


def cmd_fixture(args, argv: list) -> None:
    grid, partition, extra = fixtures.get_fixture(args.name)
    os.makedirs(args.out, exist_ok=True)
    grid.save(os.path.join(args.out, "grid.json"))
    partition.save(os.path.join(args.out, "partition.json"))
    if extra is not None:
        extra.save(os.path.join(args.out, "external.json"))
    _write_manifest(argv, {"name": args.name}, [], None,
                    os.path.join(args.out, "manifest.json"))


def cmd_simulate(args, argv: list) -> None:
    grid = GridModel.load(args.grid)
    doc = _load_json(args.scenario)
    scenario = None if doc is None else FaultScenario.from_json_dict(doc)
    cfg = SimConfig.load(args.config)
    traj = simulate_full(grid, scenario, cfg)
    traj.save(args.out)
    _write_manifest(argv, cfg.to_json_dict(),
                    [args.grid, args.scenario, args.config], None,
                    _strip_suffix(args.out) + ".manifest.json")


def cmd_scenarios(args, argv: list) -> None:
    buses = [int(b) for b in args.buses.split(",") if b]
    scenario_set = evaluation.generate_scenarios(
        buses, args.t_fault, args.clear_min, args.clear_max,
        args.count, args.seed)
    scenario_set.save(args.out)
    config = {"buses": buses, "t_fault": args.t_fault,
              "clear_min": args.clear_min, "clear_max": args.clear_max,
              "count": args.count}
    _write_manifest(argv, config, [], args.seed,
                    _strip_suffix(args.out) + ".manifest.json")


def cmd_train(args, argv: list) -> None:
    grid = GridModel.load(args.grid)
    partition = Partition.load(grid, args.partition)
    cfg = training.TrainConfig.from_json_dict(_load_json(args.config))
    if cfg.variant != args.variant:
        raise ValidationError(
            f"--variant {args.variant} but config says {cfg.variant!r}")
    dataset, data_inputs = _load_dataset(args.data, grid, partition)
    inputs = [args.grid, args.partition, args.config] + data_inputs
    if args.variant in ("dp", "dp-rnn"):
        if args.d_matrix is None:
            raise ValidationError(f"--variant {args.variant} needs --d-matrix")
        d = _load_d_matrix(args.d_matrix)
        inputs.append(args.d_matrix)
        tiecs = training.tie_channels(partition, source=True)
        dataset = [(traj if all(c in traj.channels for c in tiecs)
                    else dp.extract_continuous_component(traj, d), part)
                   for traj, part in dataset]
        report = dp.train_dp_neudye(grid, partition, dataset, d, cfg,
                                    rnn=args.variant == "dp-rnn")
    elif args.variant == "pi":
        report = training.train_pi_neudye(grid, partition, dataset, cfg)
    else:
        report = training.train_discrete_baseline(dataset, cfg)
    report.model.save(args.out)
    base = _strip_suffix(args.out)
    with open(base + ".report.json", "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(argv, cfg.to_json_dict(), inputs, cfg.seed,
                    base + ".manifest.json")


def cmd_eval(args, argv: list) -> None:
    grid = GridModel.load(args.grid)
    partition = Partition.load(grid, args.partition)
    test_set = evaluation.ScenarioSet.load(args.test)
    train_set = evaluation.ScenarioSet.load(args.train)
    # roles follow the flag the file arrived under, not the stored tag
    test_set = evaluation.ScenarioSet(test_set.scenarios, "test", test_set.seed)
    train_set = evaluation.ScenarioSet(train_set.scenarios, "train",
                                       train_set.seed)
    model_paths = [p for p in args.models.split(",") if p]
    if not model_paths:
        raise ValidationError("--models lists no files")
    models = [(os.path.splitext(os.path.basename(p))[0], _load_model(p))
              for p in model_paths]
    cfg = SimConfig()
    report = evaluation.evaluate(models, grid, partition, test_set,
                                 train_set, cfg)
    report.save(args.out)
    base = _strip_suffix(args.out)
    with open(base + ".csv", "w") as fh:
        fh.write(report.to_csv())
    _write_manifest(argv, cfg.to_json_dict(),
                    [args.grid, args.partition, args.test, args.train]
                    + model_paths, None, base + ".manifest.json")


def cmd_distance(args, argv: list) -> None:
    grid = GridModel.load(args.grid)
    train_buses = {int(b) for b in args.train_buses.split(",") if b}
    d = evaluation.electrical_distance(grid, train_buses, args.test_bus)
    print(f"{d:.17g}")


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="neudye",
                     description="neural dynamic equivalents toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fixture", help="emit a built-in benchmark grid")
    p.add_argument("name", choices=list(fixtures.FIXTURE_NAMES))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("simulate", help="full-model transient simulation")
    p.add_argument("--grid", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="trajectory CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scenarios", help="generate a fault scenario set")
    p.add_argument("--buses", required=True, help="comma-separated bus ids")
    p.add_argument("--t-fault", required=True, type=float)
    p.add_argument("--clear-min", required=True, type=float)
    p.add_argument("--clear-max", required=True, type=float)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("train", help="fit a boundary equivalent")
    p.add_argument("--variant", required=True,
                   choices=list(training.VARIANTS))
    p.add_argument("--d-matrix", help="port admittance JSON (dp variants)")
    p.add_argument("--grid", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--data", required=True, help="trajectory directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="model artifact path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation report")
    p.add_argument("--models", required=True,
                   help="comma-separated model files")
    p.add_argument("--grid", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distance", help="reactance distance to a train set")
    p.add_argument("--grid", required=True)
    p.add_argument("--train-buses", required=True)
    p.add_argument("--test-bus", required=True, type=int)
    p.set_defaults(func=cmd_distance)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
