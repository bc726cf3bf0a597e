"""Command line: ``femam partition | run | diag | report``.

Exit codes: 0 success, 1 a run finished but an invariant monitor failed,
2 bad input (schema, config values, missing or corrupt files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import jsonschema

from femam.baselines import ALGORITHMS, BaselineConfig, run_baseline
from femam.datagen import (
    PARTITION_KINDS,
    DatasetSpec,
    PartitionSpec,
    describe,
    generate_dataset,
    load_shards,
    make_shards,
    partition,
    save_shards,
)
from femam.engine import EngineConfig, run_femam
from femam.model import LINEAR, PREDICTOR_KINDS, PredictorSpec
from femam.protocol import LEVEL_KINDS
from femam.report import build_report
from femam.runio import rediagnose, write_run

log = logging.getLogger("femam")

ALL_ALGORITHMS = ("femam",) + ALGORITHMS
OK, VIOLATION, USER_ERROR = 0, 1, 2

_NUM = {"type": "number"}
_INT = {"type": "integer"}


def _object(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_ANNOTATIONS = {
    "int": _INT,
    "float": _NUM,
    "bool": {"type": "boolean"},
    "str": {"type": "string"},
    "float | None": {"type": ["number", "null"]},
    "tuple[str, ...] | None": {"type": "array", "items": {"enum": list(LEVEL_KINDS)}},
}


def _config_schema(cls, skip=()) -> dict:
    """Properties typed from the dataclass annotations; unknown keys are rejected."""
    return _object({f.name: _ANNOTATIONS[str(f.type)] for f in fields(cls) if f.name not in skip})


SCHEMA = _object(
    {
        "name": {"type": "string", "minLength": 1},
        "dataset": _object(
            {
                "num_classes": {**_INT, "minimum": 1},
                "samples_per_class": {**_INT, "minimum": 1},
                "input_dim": {**_INT, "minimum": 1},
                "noise_std": {**_NUM, "minimum": 0},
                "mean_scale": {**_NUM, "exclusiveMinimum": 0},
            },
            required=("num_classes", "samples_per_class", "input_dim", "noise_std"),
        ),
        "partition": _object(
            {
                "kind": {"enum": list(PARTITION_KINDS)},
                "num_clients": {**_INT, "minimum": 1},
                "classes_per_cluster": {**_INT, "minimum": 1},
                "num_clusters": {**_INT, "minimum": 1},
                "alpha": {**_NUM, "exclusiveMinimum": 0},
                "levels": {"type": "array", "items": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2}},
                "level_weights": {"type": "array", "items": {**_NUM, "exclusiveMinimum": 0}},
            },
            required=("kind", "num_clients"),
        ),
        "split": _object(
            {"validation": {**_NUM, "exclusiveMinimum": 0}, "test": {**_NUM, "exclusiveMinimum": 0}}
        ),
        "predictor": _object({"kind": {"enum": list(PREDICTOR_KINDS)}, "hidden_dim": {**_INT, "minimum": 0}}),
        "algorithms": {
            "type": "object",
            "properties": {
                "femam": _config_schema(EngineConfig, skip=("seed",)),
                **{a: _config_schema(BaselineConfig, skip=("seed", "algorithm")) for a in ALGORITHMS},
            },
            "additionalProperties": False,
            "minProperties": 1,
        },
        "seeds": {"type": "array", "items": {**_INT, "minimum": 0}, "minItems": 1},
        "output_root": {"type": "string"},
    },
    required=("name", "dataset", "partition", "algorithms", "seeds"),
)


class UserError(Exception):
    pass


def _path_of(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "(top level)"


def load_experiment(path: str | Path) -> dict:
    try:
        exp = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise UserError(f"experiment file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UserError(f"{path}: invalid JSON ({e})") from e
    try:
        jsonschema.validate(exp, SCHEMA)
    except jsonschema.ValidationError as e:
        raise UserError(f"{path}: field {_path_of(e)}: {e.message}") from e
    return exp


def output_root(exp: dict) -> Path:
    return Path(os.environ.get("FEMAM_OUT") or exp.get("output_root") or "runs") / exp["name"]


def dataset_spec(exp: dict, seed: int) -> DatasetSpec:
    return DatasetSpec(**exp["dataset"], seed=seed)


def partition_spec(exp: dict) -> PartitionSpec:
    p = dict(exp["partition"])
    if "levels" in p:
        p["levels"] = tuple(tuple(x) for x in p["levels"])
    if "level_weights" in p:
        p["level_weights"] = tuple(p["level_weights"])
    return PartitionSpec(**p)


def predictor_spec(exp: dict) -> PredictorSpec:
    pred = exp.get("predictor", {})
    d = exp["dataset"]
    return PredictorSpec(pred.get("kind", LINEAR), d["input_dim"], d["num_classes"], pred.get("hidden_dim", 0))


def shard_dir(exp: dict, seed: int) -> Path:
    return output_root(exp) / "shards" / f"seed_{seed}"


def run_dir(exp: dict, algo: str, seed: int) -> Path:
    return output_root(exp) / "runs" / algo / f"seed_{seed}"


def make_partition(exp: dict, seed: int) -> Path:
    try:
        dspec, pspec = dataset_spec(exp, seed), partition_spec(exp)
        table = generate_dataset(dspec)
        part = partition(table, pspec, seed)
        split = exp.get("split", {})
        shards = make_shards(table, part, split.get("validation", 0.3), split.get("test", 0.15), seed)
    except ValueError as e:
        raise UserError(str(e)) from e
    return save_shards(shard_dir(exp, seed), shards, describe(dspec, pspec, part, seed))


def _shards(exp: dict, seed: int):
    directory = shard_dir(exp, seed)
    if not (directory / "metadata.json").exists():
        make_partition(exp, seed)
    return load_shards(directory)[0]


def run_cell(exp: dict, algo: str, seed: int) -> int:
    if algo not in ALL_ALGORITHMS:
        raise UserError(f"unknown algorithm {algo!r}; choose from {', '.join(ALL_ALGORITHMS)}")
    settings = exp["algorithms"].get(algo)
    if settings is None:
        raise UserError(f"algorithm {algo!r} is not configured in the experiment file")
    shards = _shards(exp, seed)
    spec = predictor_spec(exp)
    try:
        if algo == "femam":
            s = dict(settings)
            if "schedule" in s:
                s["schedule"] = tuple(s["schedule"])
            record = run_femam(shards, spec, EngineConfig(**s, seed=seed))
        else:
            record = run_baseline(shards, spec, BaselineConfig(**settings, algorithm=algo, seed=seed))
    except (TypeError, ValueError) as e:
        raise UserError(f"algorithms.{algo}: {e}") from e
    out = write_run(run_dir(exp, algo, seed), record, spec.dim, {"experiment": exp["name"], "seed": seed})
    if not record.ok:
        for v in record.violations:
            log.error("%s", v)
        return VIOLATION
    log.info("wrote %s (accuracy %.2f%%)", out, record.final.overall_accuracy)
    return OK


def _run_cell_proc(args) -> int:
    exp, algo, seed = args
    try:
        return run_cell(exp, algo, seed)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return USER_ERROR


def cmd_partition(args) -> int:
    exp = load_experiment(args.experiment)
    for seed in [args.seed] if args.seed is not None else exp["seeds"]:
        print(make_partition(exp, seed))
    return OK


def cmd_run(args) -> int:
    exp = load_experiment(args.experiment)
    if args.algo not in ALL_ALGORITHMS:
        raise UserError(f"unknown algorithm {args.algo!r}; choose from {', '.join(ALL_ALGORITHMS)}")
    seeds = [args.seed] if args.seed is not None else exp["seeds"]
    if args.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_run_cell_proc, [(exp, args.algo, s) for s in seeds]))
    else:
        codes = [run_cell(exp, args.algo, s) for s in seeds]
    return max(codes)


def cmd_diag(args) -> int:
    directory = Path(args.run_dir)
    if not (directory / "metrics.csv").exists():
        raise UserError(f"not a run directory: {directory}")
    try:
        result = rediagnose(directory)
    except (ValueError, KeyError, OSError) as e:
        raise UserError(f"{directory}: unreadable trace or metrics ({e})") from e
    print(json.dumps({k: v for k, v in result.items() if k != "lr_bound_per_round"}, indent=2, sort_keys=True))
    return OK


def cmd_report(args) -> int:
    exp = load_experiment(args.experiment)
    dirs = [run_dir(exp, a, s) for a in exp["algorithms"] for s in exp["seeds"]]
    try:
        out = build_report(dirs, output_root(exp) / "report", plots=not args.no_plots)
    except FileNotFoundError as e:
        raise UserError(str(e)) from e
    print(out)
    return OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="femam", description="Federated multi-level additive modeling simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="generate and save client shards")
    p.add_argument("experiment")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="run one algorithm for one or all seeds")
    p.add_argument("experiment")
    p.add_argument("--algo", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diag", help="recompute diagnostics of a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("report", help="summarize all runs of an experiment")
    p.add_argument("experiment")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USER_ERROR if e.code else OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
