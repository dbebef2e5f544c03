"""Command-line experiment runner.

Configuration is a versioned YAML document with three sections::

    version: 1
    data:        # dataset file or generator settings
      path: null
      alpha: 1.0
      beta: 1.0
      clients: 30
      seed: 2301
      count_mean: 3.0
      count_sigma: 2.5
      count_offset: 45
    train:
      rounds: 500
      cohort: 10
      epochs: 20
      batch_size: 10
      lr: 0.01
      mu: 1.0
      heterogeneity: true
      eval_interval: 10
      seeds: [0, 1, 2]
    compression:
      compressor: qsgd     # none | fp8 | qsgd | fedpaq | fxpq_gzip
      controller: dadaquant  # none | static | time | client | dadaquant | adaquantfl
      q: 8
      q_min: 1
      q_max: null
      psi: 0.9
      phi: null          # null means rounds // 10

Command-line overrides take the form ``key=value``. ``key`` is either a dotted
path (``train.rounds=100``) or a bare key that appears in exactly one section
(``controller=static q=8``). Values are parsed as YAML scalars.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import metrics
from .data import SampleCountModel, dataset_stats, format_stats, generate_synthetic, load_dataset, save_dataset
from .sim import TrainingConfig, run_training

log = logging.getLogger("dadaquant")

CONFIG_VERSION = 1
# dataset realization used by default; see README for how it was chosen
DEFAULT_DATA_SEED = 2301

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "data": {
        "path": None,
        "alpha": 1.0,
        "beta": 1.0,
        "clients": 30,
        "seed": DEFAULT_DATA_SEED,
        "count_mean": SampleCountModel.mean,
        "count_sigma": SampleCountModel.sigma,
        "count_offset": SampleCountModel.offset,
    },
    "train": {
        "rounds": 500,
        "cohort": 10,
        "epochs": 20,
        "batch_size": 10,
        "lr": 0.01,
        "mu": 1.0,
        "heterogeneity": True,
        "eval_interval": 10,
        "seeds": [0, 1, 2],
    },
    "compression": {
        "compressor": "qsgd",
        "controller": "dadaquant",
        "q": 8,
        "q_min": 1,
        "q_max": None,
        "psi": 0.9,
        "phi": None,
    },
}

SECTIONS = ("data", "train", "compression")


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be a mapping")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def load_config(path: str | Path | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    version = raw.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config 'version' {version!r} (expected {CONFIG_VERSION})")
    _merge(cfg, raw, "")
    return cfg


def resolve_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in DEFAULT_CONFIG[section]:
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    owners = [s for s in SECTIONS if key in DEFAULT_CONFIG[s]]
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous config key {key!r}; use one of " + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        section, name = resolve_key(key.strip())
        cfg[section][name] = yaml.safe_load(text) if text != "" else None
    return cfg


def training_config(cfg: dict, seed: int) -> TrainingConfig:
    tr, comp = cfg["train"], cfg["compression"]
    try:
        return TrainingConfig(
            rounds=int(tr["rounds"]),
            cohort=int(tr["cohort"]),
            epochs=int(tr["epochs"]),
            batch_size=int(tr["batch_size"]),
            lr=float(tr["lr"]),
            mu=float(tr["mu"]),
            heterogeneity=bool(tr["heterogeneity"]),
            eval_interval=int(tr["eval_interval"]),
            compressor=str(comp["compressor"]),
            controller=str(comp["controller"]),
            q=int(comp["q"]),
            q_min=int(comp["q_min"]),
            q_max=None if comp["q_max"] is None else int(comp["q_max"]),
            psi=float(comp["psi"]),
            phi=None if comp["phi"] is None else int(comp["phi"]),
            seed=int(seed),
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid train/compression settings: {err}") from err


def seeds_of(cfg: dict) -> list[int]:
    seeds = cfg["train"]["seeds"]
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds:
        raise ConfigError("config key 'train.seeds' must list at least one seed")
    return [int(s) for s in seeds]


def count_model(cfg: dict) -> SampleCountModel:
    d = cfg["data"]
    return SampleCountModel(mean=float(d["count_mean"]), sigma=float(d["count_sigma"]), offset=int(d["count_offset"]))


def build_dataset(cfg: dict):
    d = cfg["data"]
    if d["path"] is not None:
        path = Path(d["path"])
        if not path.exists():
            raise ConfigError(f"dataset file {str(path)!r} does not exist (key 'data.path'); create it with gen-data")
        return load_dataset(path)
    try:
        return generate_synthetic(
            float(d["alpha"]), float(d["beta"]), int(d["clients"]), seed=int(d["seed"]), counts=count_model(cfg)
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid data settings: {err}") from err


def run_name(cfg: dict) -> str:
    comp = cfg["compression"]
    if comp["controller"] in ("none", None):
        return str(comp["compressor"])
    if comp["controller"] == "static":
        return f"{comp['compressor']}-q{comp['q']}"
    return f"{comp['compressor']}-{comp['controller']}"


def run_experiment(cfg: dict, out_dir: str | Path | None = None, dataset=None, name: str | None = None):
    """Train every configured seed; returns (summary, {seed: logs})."""
    dataset = build_dataset(cfg) if dataset is None else dataset
    name = name or run_name(cfg)
    runs = {}
    for seed in seeds_of(cfg):
        tc = training_config(cfg, seed)
        log.info("%s seed=%d", name, seed)
        runs[seed] = run_training(tc, dataset)
    summary = metrics.summarize(name, runs)
    if out_dir is not None:
        out = Path(out_dir) / name
        out.mkdir(parents=True, exist_ok=True)
        for seed, logs in runs.items():
            metrics.write_round_csv(logs, out / f"seed{seed}.csv")
        (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
        metrics.write_summary_csv([summary], out / "summary.csv")
        metrics.write_curve_csv(metrics.mean_pareto_curve([runs[s] for s in sorted(runs)]), out / "pareto.csv")
        (out / "summary.txt").write_text(metrics.format_summary([summary]) + "\n")
    return summary, runs


def load_run_dir(path: str | Path) -> dict[int, list]:
    path = Path(path)
    files = sorted(path.glob("seed*.csv"))
    if not files:
        raise ConfigError(f"no seed*.csv files in {str(path)!r}")
    return {int(f.stem[4:]): metrics.read_round_csv(f) for f in files}


def static_gridsearch(cfg: dict, dataset, max_level: int = 2**16, baseline_runs=None):
    base_cfg = apply_overrides(cfg, ["compressor=none", "controller=none"])
    if baseline_runs is None:
        _, baseline_runs = run_experiment(base_cfg, dataset=dataset)
    baseline = metrics.summarize("none", baseline_runs).accuracy_stats()[0]

    def accuracy(q):
        _, runs = run_experiment(apply_overrides(cfg, ["compressor=qsgd", "controller=static", f"q={q}"]), dataset=dataset)
        return metrics.summarize("qsgd", runs).accuracy_stats()[0]

    return metrics.gridsearch_static_q(accuracy, baseline, max_level)


# -- entry point ------------------------------------------------------------------------------------


def _config_from_args(args) -> dict:
    cfg = apply_overrides(load_config(args.config), args.overrides)
    if getattr(args, "data", None):
        cfg["data"]["path"] = args.data
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    cfg["data"]["path"] = None
    ds = build_dataset(cfg)
    save_dataset(ds, args.out)
    print(format_stats(dataset_stats(ds)))
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    summary, _ = run_experiment(cfg, args.out, name=args.name)
    print(metrics.format_summary([summary]))
    return 0


def cmd_gridsearch(args) -> int:
    cfg = _config_from_args(args)
    result = static_gridsearch(cfg, build_dataset(cfg), args.max_level)
    for q, acc in result.accuracies.items():
        print(f"q={q:<6d} mean best accuracy {100 * acc:6.2f}%")
    print(f"uncompressed mean best accuracy {100 * result.baseline:6.2f}%")
    if result.qualified:
        print(f"chosen q = {result.level}")
    else:
        print(f"no level up to {args.max_level} matched the uncompressed accuracy; using q = {result.level}")
    return 0


def cmd_report(args) -> int:
    references = {}
    if args.uncompressed:
        references["uncompressed"] = metrics.summarize("ref", load_run_dir(args.uncompressed)).mean_bytes
    if args.reference:
        references["reference"] = metrics.summarize("ref", load_run_dir(args.reference)).mean_bytes
    summaries = []
    for run_dir in args.runs:
        runs = load_run_dir(run_dir)
        summaries.append(metrics.summarize(Path(run_dir).name, runs, references))
        if args.curves:
            curve = metrics.mean_pareto_curve([runs[s] for s in sorted(runs)])
            metrics.write_curve_csv(curve, Path(run_dir) / "pareto.csv")
    print(metrics.format_summary(summaries))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dadaquant", description="Quantized federated learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    p = sub.add_parser("gen-data", help="generate a Synthetic dataset file")
    common(p)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train every configured seed and write CSV logs")
    common(p)
    p.add_argument("--data", help="dataset file (overrides data.path)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--name", help="run name (default derived from compression settings)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="smallest static QSGD level matching uncompressed accuracy")
    common(p)
    p.add_argument("--data", help="dataset file (overrides data.path)")
    p.add_argument("--max-level", type=int, default=2**16)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("report", help="summarize run directories written by train")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--uncompressed", help="run directory used as the uncompressed reference")
    p.add_argument("--reference", help="run directory used as a second reference, e.g. static QSGD")
    p.add_argument("--curves", action="store_true", help="write pareto.csv into each run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
