"""tiekg command line: ingest, pretrain, train, eval, report.

Run directories look like::

    <out>/config.yaml
    <out>/pretrain/seed_<s>/params.bin
    <out>/<strategy>/seed_<s>/step_<t>/{metrics.csv,alpha.csv,params.bin}
    <out>/<strategy>/seed_<s>/summary.json
    <out>/report/{summary.json,table.csv,timeseries.csv}
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path


from .config import STRATEGY_NAMES, Config, ConfigError, load_config
from .core import CacheVersionError, load_sequence, save_sequence
from .ingest import ParseError, SyntheticConfig, TimeBinning, discretize, generate_synthetic, load_dataset_dir
from .model import CheckpointVersionError, load_store, save_store
from .trainer import StepRecord, Trainer, aggregate, write_json, write_metrics_csv

logger = logging.getLogger("tiekg")

EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_VERSION = 5
EXIT_INVALID = 6


class MissingInput(Exception):
    pass


class InvalidInput(Exception):
    pass


def _cache_path(p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    root = os.environ.get("TKGC_CACHE_DIR")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _require(path: Path | None, what: str) -> Path:
    if path is None or not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _config(args) -> Config:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "strategy", None):
        overrides.append(f"run.strategy={args.strategy}")
    if getattr(args, "threads", None) is not None:
        overrides.append(f"run.threads={args.threads}")
    if getattr(args, "filtered", False):
        overrides.append("eval.filtered=true")
    if getattr(args, "exact_A", False):
        overrides.append("eval.exact_A=true")
    if getattr(args, "cache", None):
        overrides.append(f"dataset.cache={args.cache}")
    if args.config is not None:
        _require(Path(args.config), "config file")
    cfg = load_config(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.run.seeds = None
    if cfg.run.threads == 0:
        cfg.run.threads = os.cpu_count() or 1
    return cfg


def _load_data(cfg: Config):
    return load_sequence(_require(_cache_path(cfg.dataset.cache), "dataset cache"))


# -- commands -------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = _config(args)
    out = _cache_path(args.out)
    if args.format == "synthetic":
        d = cfg.dataset
        seq = generate_synthetic(
            SyntheticConfig(
                n_entities=d.n_entities,
                n_relations=d.n_relations,
                T=d.T,
                birth_rate=d.birth_rate,
                death_rate=d.death_rate,
                seed=cfg.run.seed,
                n_initial=d.n_initial,
                replace_prob=d.replace_prob,
            )
        )
    else:
        src = _require(Path(args.input) if args.input else None, "input directory")
        facts = load_dataset_dir(src)
        if args.bins == "auto":
            pool = [f for v in facts.values() for f in v] if isinstance(facts, dict) else facts
            binning = TimeBinning.auto(pool, args.n_steps)
        else:
            binning = TimeBinning.from_file(_require(Path(args.bins), "bin file"))
        try:
            seq = discretize(facts, binning, seed=cfg.run.seed, drop_unbinnable=args.drop_unbinnable)
        except ValueError as exc:
            raise InvalidInput(str(exc)) from None
        seq.meta["format"] = args.format
    out.parent.mkdir(parents=True, exist_ok=True)
    save_sequence(seq, out)
    sizes = seq.split_sizes()
    print(json.dumps({"cache": str(out), "T": seq.T, "entities": seq.n_entities,
                      "relations": seq.n_relations, "total": seq.total_facts(), "splits": sizes}))
    return 0


def _pretrained_path(out: Path, seed: int) -> Path:
    return out / "pretrain" / f"seed_{seed}" / "params.bin"


def _echo_config(cfg: Config, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    seq = _load_data(cfg)
    out = Path(args.out)
    _echo_config(cfg, out)
    for seed in cfg.seeds():
        store = Trainer(seq, cfg, seed).pretrain()
        p = _pretrained_path(out, seed)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_store(store, p)
        print(p)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seq = _load_data(cfg)
    out = Path(args.out)
    _echo_config(cfg, out)
    strategy = cfg.run.strategy
    for seed in cfg.seeds():
        tr = Trainer(seq, cfg, seed)
        pre = None
        if strategy != "fb_future":
            p = Path(args.pretrained) if args.pretrained else _pretrained_path(out, seed)
            if args.pretrained:
                _require(p, "pretrained checkpoint")
            if p.exists():
                pre = load_store(p)
            else:
                pre = tr.pretrain()
                p.parent.mkdir(parents=True, exist_ok=True)
                save_store(pre, p)
        run_dir = out / (cfg.run.name or strategy) / f"seed_{seed}"
        result = tr.run(strategy, pretrained=pre, out_dir=run_dir)
        print(json.dumps({"strategy": strategy, "seed": seed, "metrics": result.summary()["metrics"]}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    seq = _load_data(cfg)
    store = load_store(_require(Path(args.checkpoint), "checkpoint"))
    t = args.step if args.step is not None else store.known_steps
    if not 1 <= t <= seq.T:
        raise MissingInput(f"step {t} is outside 1..{seq.T}")
    rec = Trainer(seq, cfg).evaluate_step(store, t, StepRecord(t))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", [(t, m, d, v) for m, d, v in rec.rows])
    for m, d, v in rec.rows:
        print(f"{m}\t{d}\t{v:.6f}")
    return 0


def cmd_report(args) -> int:
    root = _require(Path(args.run), "run directory")
    summaries = sorted(root.glob("*/seed_*/summary.json"))
    if not summaries:
        raise MissingInput(f"no summary.json files under {root}")
    by_strategy: dict[str, list] = {}
    for p in summaries:
        s = json.loads(p.read_text())
        by_strategy.setdefault(s["strategy"], []).append((p.parent, s))
    out = Path(args.out) if args.out else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    report = {k: aggregate([s for _, s in v]) for k, v in sorted(by_strategy.items())}
    write_json(out / "summary.json", report)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "metric", "mean", "std", "n"])
        for strat, rep in report.items():
            for m, st in rep["metrics"].items():
                w.writerow([strat, m, repr(st["mean"]), repr(st["std"]), st["n"]])
    with open(out / "timeseries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "seed", "step", "metric", "direction", "value"])
        for strat, runs in sorted(by_strategy.items()):
            for run_dir, s in runs:
                for f in sorted(run_dir.glob("step_*/metrics.csv"), key=lambda q: int(q.parent.name[5:])):
                    with open(f) as fh2:
                        for row in csv.DictReader(fh2):
                            w.writerow([strat, s["seed"], row["step"], row["metric"], row["direction"], row["value"]])
    for strat, rep in report.items():
        for m, st in rep["metrics"].items():
            print(f"{strat}\t{m}\t{st['mean']:.4f}\t{st['std']:.4f}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tiekg", description="Incremental temporal KG embedding training")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *, cache=True, seed=True):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        if cache:
            p.add_argument("--cache", default=None, help="snapshot cache (relative paths resolve under $TKGC_CACHE_DIR)")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("ingest", help="build a snapshot cache")
    common(p, cache=False)
    p.add_argument("--input", default=None)
    p.add_argument("--format", choices=("yago", "wikidata", "synthetic"), required=True)
    p.add_argument("--bins", default="auto", help="bin file with one 'start end' year pair per line, or auto")
    p.add_argument("--n-steps", type=int, default=None, help="number of bins for --bins auto")
    p.add_argument("--drop-unbinnable", action="store_true", help="skip facts outside the bins instead of failing")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    for name, func, hlp in (("pretrain", cmd_pretrain, "train the base model on the first steps"),
                            ("train", cmd_train, "run the incremental protocol")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--out", required=True)
        p.add_argument("--filtered", action="store_true")
        p.add_argument("--exact-A", dest="exact_A", action="store_true")
        if name == "train":
            p.add_argument("--strategy", choices=STRATEGY_NAMES, default=None)
            p.add_argument("--pretrained", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint at one step")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--filtered", action="store_true")
    p.add_argument("--exact-A", dest="exact_A", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "ingest" and args.format != "synthetic" and args.bins == "auto" and not args.n_steps:
        print("error: --bins auto needs --n-steps", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (MissingInput, FileNotFoundError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvalidInput as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointVersionError, CacheVersionError) as exc:
        print(f"version error: {exc}", file=sys.stderr)
        return EXIT_VERSION


if __name__ == "__main__":
    sys.exit(main())
