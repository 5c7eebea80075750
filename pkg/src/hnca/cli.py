"""Command-line entry point: ``hnca train``, ``hnca sweep`` and ``hnca verify``.

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .bandit import Dataset, IdxError, indicator_reward, load_idx, synthetic_dataset
from .core import NetworkSpec, OutputMapping, RngStream
from .oracle import MAX_HIDDEN_UNITS, instance_specs, random_instance, verify_instance
from .trainer import Method, NumericAbort, TrainConfig, default_parallelism, lr_sweep, train

log = logging.getLogger("hnca")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


# ---------------------------------------------------------------- experiment files

_NETWORK_KEYS = {"input_dim", "hidden_layers", "num_classes", "output_mapping", "seed"}
_TRAIN_KEYS = {"estimator", "learning_rate", "batch_size", "epochs", "seed", "eval_every",
               "eval_window", "max_abs_param", "run_id"}
_DATASET_KEYS = {"kind", "images", "labels", "limit", "heldout_images", "heldout_labels",
                 "num_classes", "synthetic", "n", "d", "seed", "heldout_n"}
_SWEEP_KEYS = {"learning_rates", "seeds"}
_TOP_KEYS = {"network", "train", "dataset", "sweep", "output_dir"}


def _section(doc, key, allowed, required=True) -> dict:
    if key not in doc:
        if required:
            raise ConfigError(key, "missing section")
        return {}
    sec = doc[key]
    if not isinstance(sec, dict):
        raise ConfigError(key, "must be an object")
    for k in sec:
        if k not in allowed:
            raise ConfigError(f"{key}.{k}", "unknown key")
    return sec


def _typed(sec, section, key, kind, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"{section}.{key}", "missing required key")
        return default
    v = sec[key]
    ok = {
        int: isinstance(v, int) and not isinstance(v, bool),
        float: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: isinstance(v, str),
        list: isinstance(v, list),
    }[kind]
    if not ok:
        raise ConfigError(f"{section}.{key}", f"expected {kind.__name__}, got {type(v).__name__}")
    return kind(v) if kind is not list else v


@dataclass
class ExperimentFile:
    network: NetworkSpec
    train: TrainConfig
    dataset: dict
    sweep: dict | None
    output_dir: str | None
    raw: dict

    @classmethod
    def parse(cls, doc) -> "ExperimentFile":
        if not isinstance(doc, dict):
            raise ConfigError("", "experiment file must be a JSON object")
        for k in doc:
            if k not in _TOP_KEYS:
                raise ConfigError(k, "unknown key")
        net = _section(doc, "network", _NETWORK_KEYS)
        tr = _section(doc, "train", _TRAIN_KEYS)
        ds = _section(doc, "dataset", _DATASET_KEYS)
        sw = _section(doc, "sweep", _SWEEP_KEYS, required=False) or None
        try:
            hidden = _typed(net, "network", "hidden_layers", list, required=True)
            spec = NetworkSpec(
                input_dim=_typed(net, "network", "input_dim", int, required=True),
                hidden_layers=tuple(hidden),
                num_classes=_typed(net, "network", "num_classes", int, required=True),
                output_mapping=OutputMapping(_typed(net, "network", "output_mapping", str, "plus_minus_one")),
                seed=_typed(net, "network", "seed", int, 0),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("network", str(exc)) from exc
        try:
            method = Method(_typed(tr, "train", "estimator", str, required=True))
        except ValueError as exc:
            raise ConfigError("train.estimator", str(exc)) from exc
        try:
            cfg = TrainConfig(
                network=spec,
                estimator=method,
                learning_rate=_typed(tr, "train", "learning_rate", float, required="learning_rate" not in (sw or {})) or 0.0,
                batch_size=_typed(tr, "train", "batch_size", int, 16),
                epochs=_typed(tr, "train", "epochs", int, 1),
                seed=_typed(tr, "train", "seed", int, spec.seed),
                eval_every=_typed(tr, "train", "eval_every", int, 0),
                eval_window=_typed(tr, "train", "eval_window", float, 0.1),
                max_abs_param=_typed(tr, "train", "max_abs_param", float, 1e4),
                run_id=_typed(tr, "train", "run_id", str, ""),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from exc
        kind = _typed(ds, "dataset", "kind", str, required=True)
        if kind not in ("idx", "synthetic"):
            raise ConfigError("dataset.kind", "must be 'idx' or 'synthetic'")
        if kind == "idx":
            for k in ("images", "labels"):
                _typed(ds, "dataset", k, str, required=True)
        else:
            _typed(ds, "dataset", "synthetic", str, required=True)
        if sw is not None:
            lrs = _typed(sw, "sweep", "learning_rates", list, required=True)
            seeds = _typed(sw, "sweep", "seeds", list, required=True)
            if not lrs or not all(isinstance(x, (int, float)) and x >= 0 for x in lrs):
                raise ConfigError("sweep.learning_rates", "need a non-empty list of non-negative numbers")
            if len(seeds) < 2 or not all(isinstance(s, int) for s in seeds):
                raise ConfigError("sweep.seeds", "need at least two integer seeds")
        out = _typed(doc, "", "output_dir", str) if "output_dir" in doc else None
        return cls(spec, cfg, ds, sw, out, doc)

    @classmethod
    def load(cls, path) -> "ExperimentFile":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError("", f"experiment file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from exc
        return cls.parse(doc)

    def with_seed(self, seed: int) -> "ExperimentFile":
        spec = replace(self.network, seed=seed)
        return replace(self, network=spec, train=replace(self.train, seed=seed, network=spec))

    def resolved(self) -> dict:
        d = {"network": self.network.to_dict(), "train": self.train.to_dict(), "dataset": self.dataset}
        if self.sweep:
            d["sweep"] = self.sweep
        return d


def _data_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get("HNCA_DATA_DIR")
    if not path.is_absolute() and root:
        return Path(root) / path
    return path


def load_datasets(ds: dict, num_classes: int) -> tuple[Dataset, Dataset | None]:
    if ds["kind"] == "idx":
        try:
            train_ds = load_idx(_data_path(ds["images"]), _data_path(ds["labels"]),
                                num_classes=ds.get("num_classes", num_classes))
            if "limit" in ds:
                train_ds = train_ds.subset(int(ds["limit"]))
            held = None
            if "heldout_images" in ds:
                held = load_idx(_data_path(ds["heldout_images"]), _data_path(ds["heldout_labels"]),
                                num_classes=ds.get("num_classes", num_classes))
        except (OSError, IdxError) as exc:
            raise ConfigError("dataset", str(exc)) from exc
        return train_ds, held
    try:
        n, d = int(ds["n"]), int(ds["d"])
        k = int(ds.get("num_classes", num_classes))
        seed = int(ds.get("seed", 0))
        full = synthetic_dataset(ds["synthetic"], n + int(ds.get("heldout_n", 0)), d, k, RngStream(seed, 99))
    except KeyError as exc:
        raise ConfigError(f"dataset.{exc.args[0]}", "missing required key") from exc
    except ValueError as exc:
        raise ConfigError("dataset", str(exc)) from exc
    train_ds = Dataset(full.contexts[:n], full.labels[:n], k, full.name, full.meta)
    held = None
    if ds.get("heldout_n"):
        held = Dataset(full.contexts[n:], full.labels[n:], k, full.name, full.meta)
    return train_ds, held


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    exp = _load(args)
    train_ds, held = load_datasets(exp.dataset, exp.network.num_classes)
    out = Path(args.out or exp.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    try:
        metrics = train(exp.train, train_ds, held)
    except NumericAbort as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from exc
    metrics.write_csv(out / f"{metrics.run_id}.csv")
    _dump(out / f"{metrics.run_id}.config.json", exp.resolved())
    _dump(out / f"{metrics.run_id}.timing.json", {"wall_clock_s": metrics.wall_clock})
    log.info("%s: final sampled accuracy %.4f", metrics.run_id, metrics.final_sampled_acc)
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = _load(args)
    if not exp.sweep:
        raise ConfigError("sweep", "missing section")
    train_ds, held = load_datasets(exp.dataset, exp.network.num_classes)
    out = Path(args.out or exp.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    lrs = sorted(float(x) for x in exp.sweep["learning_rates"])
    try:
        res = lr_sweep(exp.train, lrs, exp.sweep["seeds"], train_ds, held,
                       parallel=args.parallel or default_parallelism())
    except ValueError as exc:
        raise ConfigError("sweep", str(exc)) from exc
    for cell in res.cells:
        if cell.error is None:
            (out / f"{cell.run_id}.csv").write_text(cell.csv_text)
    summary = res.summary()
    summary["config"] = exp.resolved()
    _dump(out / "sweep_summary.json", summary)
    _dump(out / "sweep_timing.json", {
        "wall_clock_s": time.perf_counter() - t0,
        "cells": {c.run_id: c.wall_clock for c in res.cells},
    })
    log.info("best lr %s", res.best_lr)
    return EXIT_OK


def _positive_shape(shape: str) -> NetworkSpec:
    try:
        spec = NetworkSpec.parse_shape(shape)
    except ValueError as exc:
        raise ConfigError("shape", str(exc)) from exc
    if spec.num_hidden_units > MAX_HIDDEN_UNITS:
        raise ConfigError("shape", f"{shape} has more than {MAX_HIDDEN_UNITS} hidden units")
    return spec


def cmd_verify(args) -> int:
    if args.draws < 1:
        raise ConfigError("draws", "must be >= 1")
    shapes = args.shape or ["3-2-2"]
    for s in shapes:
        _positive_shape(s)
    seed = args.seed if args.seed is not None else 0
    reward_fn = indicator_reward(0)
    summary: dict = {"seed": seed, "draws": args.draws, "shapes": {},
                     "literal_messages": bool(args.sabotage_skip_realized_likelihood)}
    violations = []
    example = None
    for shape in shapes:
        stats = {"instances": 0, "max_bias_hnca": 0.0, "max_bias_reinforce": 0.0,
                 "max_total_variance_error": 0.0, "violations": {}}
        for d, spec in enumerate(instance_specs(shape, args.draws, seed)):
            net, ctx = random_instance(spec, seed, d)
            r = verify_instance(net, ctx, reward_fn, d, literal_messages=args.sabotage_skip_realized_likelihood)
            stats["instances"] += 1
            stats["max_bias_hnca"] = max(stats["max_bias_hnca"], r.max_bias["hnca"])
            stats["max_bias_reinforce"] = max(stats["max_bias_reinforce"], r.max_bias["reinforce"])
            stats["max_total_variance_error"] = max(stats["max_total_variance_error"], r.max_ltv_error)
            for v in r.violations:
                stats["violations"][v.check] = stats["violations"].get(v.check, 0) + 1
                violations.append({"seed": seed, "shape": shape, **v.to_dict()})
            if example is None:
                example = {"shape": shape, "draw": d, "mapping": spec.output_mapping.value,
                           "context": ctx.tolist(), "report": r.report.to_dict()}
        summary["shapes"][shape] = stats
    summary["violations"] = violations
    summary["passed"] = not violations
    summary["example"] = example
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "verify_report.json", summary)
    if violations:
        first = violations[0]
        log.error("%d violations; first: %s draw %s unit %s b %s (%s)", len(violations), first["check"],
                  first["draw"], first["unit"], first["b"], first["detail"])
        return EXIT_VERIFY
    log.info("all checks passed over %d draws x %d shapes", args.draws, len(shapes))
    return EXIT_OK


def _load(args) -> ExperimentFile:
    if not args.experiment:
        raise ConfigError("experiment", "--experiment is required")
    exp = ExperimentFile.load(args.experiment)
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    return exp


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hnca", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--parallel", type=int, default=None, help="worker processes (default: all cores)")
        sp.add_argument("--seed", type=int, default=None, help="override the seed in the experiment file")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="run one training job and write its metrics CSV")
    t.add_argument("--experiment", required=True)
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="learning-rate sweep with best-lr selection")
    s.add_argument("--experiment", required=True)
    common(s)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="exact enumeration checks on random tiny networks")
    v.add_argument("--shape", action="append", help="network shape such as 3-2-2 (repeatable)")
    v.add_argument("--draws", type=int, default=100)
    v.add_argument("--sabotage-skip-realized-likelihood", action="store_true",
                   help="negative control: pass raw fire probabilities between hidden layers")
    common(v)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
