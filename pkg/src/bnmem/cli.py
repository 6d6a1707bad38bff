"""Experiment runner: ``bnmem <subcommand> [--config PATH] [flags]``.

Config files are JSON objects. Flags override config keys. Every run
writes its outputs plus ``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# -- config schema --------------------------------------------------------------

DATASET_KEYS = {
    "source": str, "path": str, "images": str, "labels": str, "subset": int, "num_classes": int,
    "per_class": int, "dim": int, "separation": float, "seed": int,
}
CORRUPTION_KEYS = {"kind": str, "k": float, "ood_dataset": (dict, str)}
ARCH_KEYS = {"sizes": list, "batch_norm": bool, "eps": float, "momentum": float}
TRAINING_KEYS = {
    "learning_rate": float, "batch_size": int, "epochs": int, "optimizer": str, "beta1": float,
    "beta2": float, "eps_adam": float, "loss_reduction": str,
}

# one schema shared by all subcommands so a config file can drive several
SCHEMA = {
    "seed": int, "jobs": int, "out": str, "dataset": (dict, str), "corruption": dict, "architecture": dict,
    "training": dict, "compare_bn": bool, "model": str, "batch_size": int, "first_layer_only": bool,
    "num_shadows": int, "alphas": list, "variant": str,
}
REQUIRED = {
    "corrupt": ("seed", "dataset"),
    "train": ("seed", "dataset"),
    "influence": ("seed", "dataset", "model"),
    "theory": ("seed",),
    "attack": ("seed", "dataset"),
    "mitigate": ("seed", "dataset"),
}
NESTED = {"corruption": CORRUPTION_KEYS, "architecture": ARCH_KEYS, "training": TRAINING_KEYS}


def _type_ok(value, typ):
    types = typ if isinstance(typ, tuple) else (typ,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return True
    if int in types and isinstance(value, bool):
        return False
    return isinstance(value, types)


def _check_keys(obj, schema, prefix):
    for key, val in obj.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        if not _type_ok(val, schema[key]):
            raise ConfigError(f"config key {path!r} has the wrong type ({type(val).__name__})")


def validate_config(command, cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if command not in REQUIRED:
        raise ConfigError(f"unknown command {command!r}")
    _check_keys(cfg, SCHEMA, "")
    missing = [k for k in REQUIRED[command] if k not in cfg]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    for key, sub in NESTED.items():
        if key in cfg:
            _check_keys(cfg[key], sub, f"{key}.")
    if isinstance(cfg.get("dataset"), dict):
        _check_keys(cfg["dataset"], DATASET_KEYS, "dataset.")
    seed = cfg["seed"]
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("config key 'seed' must be an unsigned 64-bit integer")
    return cfg


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from None
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None


def _set(cfg, dotted, value):
    if value is None:
        return
    parts = dotted.split(".")
    d = cfg
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


# subcommand flag -> config key
OVERRIDES = {
    "seed": "seed", "jobs": "jobs", "out": "out",
    "dataset": "dataset", "kind": "corruption.kind", "k": "corruption.k",
    "batch_norm": "architecture.batch_norm", "epochs": "training.epochs", "lr": "training.learning_rate",
    "batch_size": "training.batch_size", "compare_bn": "compare_bn", "model": "model",
    "num_shadows": "num_shadows", "alphas": "alphas", "variant": "variant",
    "first_layer_only": "first_layer_only", "influence_batch_size": "batch_size",
}


def resolve_config(args):
    cfg = load_config(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for flag, key in OVERRIDES.items():
        val = getattr(args, flag, None)
        if flag == "alphas" and val is not None:
            val = [float(a) for a in val.split(",")]
        _set(cfg, key, val)
    return validate_config(args.command, cfg)


# -- builders -------------------------------------------------------------------------

def build_dataset(spec, inputs):
    from .data import Dataset, load_idx, load_mnist5k, synth_blobs

    if isinstance(spec, str):
        spec = {"source": "mnist5k"} if spec == "mnist5k" else {"source": "file", "path": spec}
    src = spec.get("source", "mnist5k")
    if src == "mnist5k":
        d = load_mnist5k(subset=spec.get("subset"))
    elif src == "file":
        if "path" not in spec:
            raise ConfigError("dataset.path is required for source 'file'")
        d = Dataset.load(spec["path"])
        inputs[spec["path"]] = d.content_hash()
    elif src == "idx":
        for k in ("images", "labels"):
            if k not in spec:
                raise ConfigError(f"dataset.{k} is required for source 'idx'")
        d = load_idx(spec["images"], spec["labels"])
    elif src == "blobs":
        d = synth_blobs(spec.get("num_classes", 10), spec.get("per_class", 100), spec.get("dim", 20),
                        spec.get("separation", 3.0), spec.get("seed", 0))
    else:
        raise ConfigError(f"dataset.source must be mnist5k, file, idx or blobs, not {src!r}")
    inputs.setdefault(f"dataset:{d.name}", d.content_hash())
    return d


def build_corruption(cfg, seed, inputs):
    from .data import CorruptionSpec
    from .rng import derive_seed

    c = cfg.get("corruption")
    if not c:
        return None
    ood = None
    if c.get("kind") == "ood":
        if "ood_dataset" not in c:
            raise ConfigError("corruption.ood_dataset is required for kind 'ood'")
        ood = build_dataset(c["ood_dataset"], inputs)
    try:
        return CorruptionSpec(c.get("kind", "flip"), float(c.get("k", 0.1)), derive_seed(seed, "corruption"), ood)
    except ValueError as e:
        raise ConfigError(f"corruption: {e}") from None


def build_architecture(cfg, dim, num_classes):
    from .nn import Architecture

    a = cfg.get("architecture", {})
    sizes = tuple(a.get("sizes", (dim, 256, 128, num_classes)))
    if sizes[0] != dim or sizes[-1] != num_classes:
        raise ConfigError(f"architecture.sizes must start at {dim} and end at {num_classes}")
    return Architecture(sizes, a.get("batch_norm", True), a.get("eps", 1e-5), a.get("momentum", 0.1))


def training_kwargs(cfg):
    return dict(cfg.get("training", {}))


def prepared_dataset(cfg, inputs):
    from .data import corrupt

    d = build_dataset(cfg["dataset"], inputs)
    spec = build_corruption(cfg, cfg["seed"], inputs)
    return corrupt(d, spec) if spec is not None else d


# -- manifest -------------------------------------------------------------------------

class Run:
    def __init__(self, argv, cfg):
        self.argv = list(argv)
        self.cfg = cfg
        self.out = Path(cfg.get("out", "out"))
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self.inputs = {}
        self.timings = {}
        self.extra = {}
        self._t0 = time.perf_counter()

    def path(self, name):
        p = self.out / name
        self.outputs.append(name)
        return p

    def timed(self, label, fn, *a, **kw):
        t = time.perf_counter()
        res = fn(*a, **kw)
        self.timings[label] = round(time.perf_counter() - t, 6)
        return res

    def write_json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")

    def finish(self):
        import numba

        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        manifest = {
            "command": self.argv,
            "config": self.cfg,
            "seed": self.cfg["seed"],
            "versions": {
                "bnmem": __version__, "numpy": np.__version__, "numba": numba.__version__,
                "python": platform.python_version(),
            },
            "accelerated": os.environ.get("BNMEM_NUMBA", "1"),
            "input_hashes": self.inputs,
            "timings": self.timings,
            "outputs": sorted(self.outputs),
            **self.extra,
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return manifest


# -- subcommands ---------------------------------------------------------------------

def cmd_corrupt(run):
    from .data import corrupt

    cfg = run.cfg
    d = build_dataset(cfg["dataset"], run.inputs)
    spec = build_corruption(cfg, cfg["seed"], run.inputs)
    out = corrupt(d, spec) if spec is not None else d
    run.path("dataset.json")
    run.path("dataset.bin")
    out.save(run.out / "dataset.json")
    out.write_provenance_csv(run.path("provenance.csv"))
    counts = {int(p): int((out.provenance == p).sum()) for p in np.unique(out.provenance)}
    run.extra["corruption"] = {
        "kind": spec.kind if spec else None, "k": spec.ratio if spec else 0.0,
        "input_size": len(d), "output_size": len(out), "corrupted": int(out.corrupted.sum()),
        "provenance_counts": counts, "output_hash": out.content_hash(),
    }
    return EXIT_OK


def _train_one(run, dataset, arch, cfg, tag):
    from .nn import TrainConfig, train
    from .rng import derive_seed

    seed = derive_seed(cfg["seed"], "model")
    net = arch.build(seed)
    tc = TrainConfig(seed=seed, **training_kwargs(cfg))
    res = run.timed(f"train_{tag}", train, net, dataset, tc)
    run.path(f"model_{tag}.json")
    run.path(f"model_{tag}.bin")
    net.save(run.out / f"model_{tag}.json")
    res.write_csv(run.path(f"trace_{tag}.csv"))
    return res


def _variants(cfg, arch):
    if cfg.get("compare_bn"):
        return [("bn", arch.with_bn(True)), ("nobn", arch.with_bn(False))]
    return [("bn" if arch.batch_norm else "nobn", arch)]


def cmd_train(run):
    import csv
    from .influence import extract_gamma_sigma

    cfg = run.cfg
    d = prepared_dataset(cfg, run.inputs)
    arch = build_architecture(cfg, d.dim, d.num_classes)
    results = {tag: _train_one(run, d, a, cfg, tag) for tag, a in _variants(cfg, arch)}
    if len(results) > 1:
        with open(run.path("comparison.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["variant", "final_clean_acc", "final_corrupted_acc", "final_corrupted_loss",
                        "epochs_to_corrupted_loss_0.1", "median_gamma_sigma"])
            for tag, r in results.items():
                last = r.trace[-1]
                prof = extract_gamma_sigma(r.net)
                med = repr(float(np.median(np.concatenate([p.ratios for p in prof])))) if prof else ""
                ep = r.first_epoch_below(0.1)
                w.writerow([tag, repr(last.clean_acc), repr(last.corrupted_acc), repr(last.corrupted_loss),
                            "" if ep is None else ep, med])
    return EXIT_OK


def cmd_influence(run):
    from .influence import (
        STATS_CONVENTION, compute_influence, extract_gamma_sigma, summarize_distribution,
        write_influence_csv, write_ratio_csv,
    )
    from .nn import Network
    from .rng import derive_seed

    cfg = run.cfg
    d = prepared_dataset(cfg, run.inputs)
    try:
        net = Network.load(cfg["model"])
    except OSError as e:
        raise ConfigError(f"cannot read model {cfg['model']}: {e.strerror}") from None
    recs = run.timed("influence", compute_influence, net, d, cfg.get("batch_size", 256),
                     derive_seed(cfg["seed"], "influence"), cfg.get("first_layer_only", False))
    write_influence_csv(recs, run.path("influence.csv"))
    write_ratio_csv(extract_gamma_sigma(net), run.path("gamma_sigma.csv"))
    edges, groups = summarize_distribution(recs)
    summary = {
        "bin_edges": [float(e) for e in edges],
        "groups": {k: {"count": g.count, "mean": g.mean, "median": g.median, "p90": g.p90,
                       "histogram": [int(c) for c in g.histogram]} for k, g in groups.items()},
        "non_finite": sum(not r.finite for r in recs),
        "statistics_convention": STATS_CONVENTION,
    }
    run.write_json("influence_summary.json", summary)
    run.extra["statistics_convention"] = STATS_CONVENTION
    return EXIT_OK


def cmd_theory(run):
    from .theory_report import example_trajectory, run_all

    results = run.timed("checks", run_all, run.cfg["seed"])
    report = {"checks": [r.to_dict() for r in results], "all_passed": all(r.passed for r in results)}
    run.write_json("theory_report.json", report)
    example_trajectory(run.cfg["seed"]).write_csv(run.path("trajectory.csv"))
    return EXIT_OK


def cmd_attack(run):
    import csv
    from .data import corrupt
    from .mia import run_attack

    cfg = run.cfg
    d = build_dataset(cfg["dataset"], run.inputs)
    spec = build_corruption(cfg, cfg["seed"], run.inputs)
    corrupted = corrupt(d, spec) if spec is not None else d
    arch = build_architecture(cfg, corrupted.dim, corrupted.num_classes)
    reports = {}
    for tag, a in _variants(cfg, arch):
        res = run.timed(f"attack_{tag}", run_attack, corrupted, a, None, cfg.get("num_shadows", 16),
                        cfg["seed"], cfg.get("jobs", 1), **training_kwargs(cfg))
        res.write_report(run.path(f"attack_{tag}.json"))
        res.write_scores_csv(run.path(f"scores_{tag}.csv"))
        reports[tag] = res.report
    if len(reports) > 1:
        with open(run.path("comparison.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["variant", "auc", "auc_corrupted_only", "tpr_at_0.001", "tpr_at_0.01", "tpr_at_0.1"])
            for tag, r in reports.items():
                cor = r["auc_corrupted_only"]
                w.writerow([tag, repr(r["auc"]), "" if cor is None else repr(cor)]
                           + [repr(r["tpr_at"][k]) for k in ("0.001", "0.01", "0.1")])
    return EXIT_OK


def cmd_mitigate(run):
    from .mitigation import alpha_sweep, write_sweep_csv
    from .rng import derive_seed

    cfg = run.cfg
    d = prepared_dataset(cfg, run.inputs)
    arch = build_architecture(cfg, d.dim, d.num_classes)
    kw = training_kwargs(cfg)
    kw.pop("loss_reduction", None)
    kw["mitigation_variant"] = cfg.get("variant", "layer_mean")
    rows = run.timed("sweep", alpha_sweep, d, arch, tuple(cfg.get("alphas", (1.0, 0.9, 0.7, 0.5))),
                     derive_seed(cfg["seed"], "model"), cfg.get("jobs", 1), **kw)
    write_sweep_csv(rows, run.path("alpha_sweep.csv"))
    return EXIT_OK


COMMANDS = {
    "corrupt": cmd_corrupt, "train": cmd_train, "influence": cmd_influence,
    "theory": cmd_theory, "attack": cmd_attack, "mitigate": cmd_mitigate,
}


def _bool_flag(p, name, dest, help_):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="bnmem", description="Batch-norm memorization experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "") + " experiment")
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--jobs", type=int, metavar="N", help="worker processes")
        p.add_argument("--out", metavar="DIR", help="output directory (default ./out)")
        if name == "theory":
            continue
        p.add_argument("--dataset", help="'mnist5k' or a saved dataset .json path")
        if name in ("corrupt", "train", "attack", "mitigate", "influence"):
            p.add_argument("--kind", choices=("flip", "ood"), help="corruption kind")
            p.add_argument("--k", type=float, help="corruption ratio")
        if name in ("train", "attack", "mitigate"):
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", type=int)
            _bool_flag(p, "batch-norm", "batch_norm", "architecture with BatchNorm layers")
        if name in ("train", "attack"):
            p.add_argument("--compare-bn", action="store_true", default=None,
                           help="run BN and no-BN variants with shared seeds")
        if name == "attack":
            p.add_argument("--num-shadows", type=int)
        if name == "mitigate":
            p.add_argument("--alphas", help="comma-separated alpha values")
            p.add_argument("--variant", choices=("layer_mean", "per_channel"))
        if name == "influence":
            p.add_argument("--model", help="saved model .json path")
            p.add_argument("--batch-size", dest="influence_batch_size", type=int)
            p.add_argument("--first-layer-only", action="store_true", default=None)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run = Run(["bnmem", *argv], cfg)
        code = COMMANDS[args.command](run)
        run.finish()
        return code
    except (ValueError, OSError) as e:
        # ConfigError, IdxFormatError and ShapeError are ValueErrors
        print(f"bnmem {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as e:
        print(f"bnmem {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
