"""Command-line driver.

Exit codes: 0 success, 1 runtime failure (including aborted training),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, EM_MODES, FIELD_TYPES, TrainConfig, config_from_mapping, read_kv_file
from .data import (PRESETS, SynthSpec, build_vocab, load_corpus, read_vocab, synth_generate, to_raw,
                   vectorize_corpus, write_corpus, write_vocab)
from .errors import ConfigError, DataError, SanError, ShapeError
from .model import Architecture, build_model, export_variances, load_checkpoint
from .nn_core import make_rng
from .rplr import em_fit
from .trainer import TrainingAborted, best_model, evaluate, runtime_report, train

log = logging.getLogger("san_mdtc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
# keys accepted by the train config file besides the TrainConfig fields
DATA_KEYS = ("data", "synth", "out")


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _default_text(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    g = p.add_argument_group("training configuration (override the config file)")
    for name in FIELD_TYPES:
        g.add_argument(_flag(name), dest=name, default=None, metavar="V",
                       help=f"default: {_default_text(getattr(defaults, name))}")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="corpus directory (one subdirectory per domain)")
    p.add_argument("--synth", help="synthetic spec, e.g. preset=separable,seed=1 "
                                   f"(presets: {', '.join(PRESETS)})")


def _explicit(args, names) -> dict:
    return {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}


def _synth_spec(text: str, seed: int) -> SynthSpec:
    spec = SynthSpec.from_string(text)
    keys = {part.partition("=")[0].strip() for part in text.split(",")}
    if "seed" not in keys:
        spec.seed = seed
    spec.validate()
    return spec


def _load_data(data: str | None, synth: str | None, seed: int, vocab_size: int,
               vocab_path: Path | None = None):
    """Datasets plus the vocabulary used (``None`` for synthetic data)."""
    if (data is None) == (synth is None):
        raise UsageError("give exactly one of --data or --synth")
    if synth is not None:
        return synth_generate(_synth_spec(synth, seed)), None
    raw = load_corpus(data)
    vocab = read_vocab(vocab_path) if vocab_path is not None else build_vocab(raw, vocab_size)
    return vectorize_corpus(raw, vocab), vocab


def _print_table(header: list[str], rows: list[list]) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


# --- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    file_values = read_kv_file(args.config) if args.config else {}
    for k in file_values:
        if k not in FIELD_TYPES and k not in DATA_KEYS:
            raise ConfigError(f"{args.config}: unknown key {k!r}")
    flags = _explicit(args, FIELD_TYPES)
    cfg = config_from_mapping({k: v for k, v in file_values.items() if k in FIELD_TYPES})
    cfg = config_from_mapping(flags, cfg)
    data_args = {k: file_values.get(k) for k in DATA_KEYS}
    data_args.update(_explicit(args, DATA_KEYS))
    out = Path(data_args["out"] or "runs/latest")
    datasets, vocab = _load_data(data_args["data"], data_args["synth"], cfg.seed, cfg.vocab_size)
    out.mkdir(parents=True, exist_ok=True)
    if vocab is not None:
        write_vocab(vocab, out / "vocab.tsv")
    extra = {"cli": {"config_file": args.config, "file_values": file_values, "flags": flags,
                     "data": data_args["data"], "synth": data_args["synth"]}}
    if data_args["synth"] is not None:
        extra["cli"]["synth_spec"] = _synth_spec(data_args["synth"], cfg.seed).to_string()

    try:
        result = train(cfg, datasets, out, header_extra=extra)
    except TrainingAborted as exc:
        log.error("%s (files so far kept in %s)", exc, out)
        return EXIT_RUNTIME

    model = best_model(result)
    names = result.domain_names
    ev = evaluate(model, datasets, cfg.ablation, "test", cfg.seed)
    rows = [[n, ev.per_domain[n]] for n in names if n in ev.per_domain] + [["AVG", ev.avg]]
    _print_table(["domain", "accuracy"], rows)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "accuracy", "ablation", "best_epoch"])
        for name, acc in rows:
            w.writerow([name, repr(acc), cfg.ablation, result.best_epoch])
    pl = result.state.pseudo
    if pl is not None:
        pl.write_csv(out / "pseudo_labels.csv", names)
    if cfg.mode == "san":
        export_variances(model, out / "sigma.csv")
    print()
    _print_table(["phase", "mean_seconds"], [[k, v] for k, v in runtime_report(result.state).items()])
    return EXIT_OK


# --- eval -------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = meta.get("config", {})
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    vocab_path = Path(args.vocab) if args.vocab else None
    if vocab_path is None and args.data is not None:
        guess = Path(args.checkpoint).parent / "vocab.tsv"
        vocab_path = guess if guess.exists() else None
    datasets, _ = _load_data(args.data, args.synth, seed, int(cfg.get("vocab_size", 5000)), vocab_path)
    arch = model.arch
    if datasets[0].input_dim != arch.input_dim:
        raise ShapeError(f"data has {datasets[0].input_dim} features, checkpoint expects {arch.input_dim}")
    if len(datasets) != arch.num_domains:
        raise ShapeError(f"data has {len(datasets)} domains, checkpoint expects {arch.num_domains}")
    ablations = [a for part in args.ablate for a in part.split(",") if a]
    for a in ablations:
        if a not in ABLATIONS:
            raise ConfigError(f"unknown ablation {a!r}")
    names = [d.name for d in datasets]
    rows = []
    for a in ablations:
        ev = evaluate(model, datasets, a, args.split, seed)
        rows.append([a] + [ev.per_domain[n] for n in names] + [ev.avg])
    _print_table(["variant"] + names + ["AVG"], rows)
    return EXIT_OK


# --- em-fit -----------------------------------------------------------------------

def read_distance_csv(path) -> tuple[np.ndarray, np.ndarray]:
    ids, ds = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DataError(f"row {i}: expected class_id,distance")
            try:
                k, d = int(row[0]), float(row[1])
            except ValueError:
                raise DataError(f"row {i}: not numeric: {row}") from None
            if k < 0:
                raise DataError(f"row {i}: negative class id {k}")
            if not d >= 0:
                raise DataError(f"row {i}: distance must be >= 0, got {row[1].strip()}")
            ids.append(k)
            ds.append(d)
    if not ids:
        raise DataError(f"{path}: no rows")
    return np.array(ids, dtype=np.int64), np.array(ds)


def cmd_em_fit(args) -> int:
    ids, d = read_distance_csv(args.csv)
    k = int(ids.max()) + 1
    res = em_fit(d, ids, k, make_rng(args.seed, "mirror.1"), iters=args.iters, tol=args.tol,
                 mode=args.mode, min_samples=args.min_samples)
    out = {"num_classes": k, "mode": args.mode, "n": int(len(d)), **res.to_dict()}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# --- synth ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = _synth_spec(args.spec, args.seed)
    datasets = synth_generate(spec)
    write_corpus(to_raw(datasets), args.out)
    (Path(args.out) / "synth.conf").write_text(f"synth = {spec.to_string()}\n")
    rows = [[d.name, len(d.labeled), len(d.unlabeled), len(d.test) if d.test else 0,
             len(d.dev) if d.dev else 0] for d in datasets]
    _print_table(["domain", "labeled", "unlabeled", "test", "dev"], rows)
    return EXIT_OK


# --- param-count ------------------------------------------------------------------

def cmd_param_count(args) -> int:
    values = read_kv_file(args.config) if args.config else {}
    values = {k: v for k, v in values.items() if k in ("hidden", "shared_dim", "specific_dim", "vocab_size")}
    values.update(_explicit(args, ("hidden", "shared_dim", "specific_dim")))
    cfg = config_from_mapping(values)
    input_dim = args.input_dim if args.input_dim is not None else cfg.vocab_size
    counts = {}
    for m in args.num_domains:
        arch = Architecture(input_dim, args.num_classes, m, hidden=cfg.hidden,
                            shared_dim=cfg.shared_dim, specific_dim=cfg.specific_dim)
        san = build_model("san", arch)
        sp = build_model("shared_private", arch)
        counts[m] = (san.param_count(), sp.param_count(), sp.single_extractor_count())
    rows = []
    for m, (san, sp, single) in counts.items():
        for comp in ("F_s", "F_d", "C", "D", "total"):
            rows.append([m, comp, san[comp], sp[comp]])
        rows.append([m, "F_d_single", "", single])
        rows.append([m, "F_d_ratio", f"{san['F_d'] / sp['F_d']:.3f}", ""])
    _print_table(["num_domains", "component", "san", "shared_private"], rows)
    return EXIT_OK


# --- selfcheck --------------------------------------------------------------------

def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    report = run_selfcheck(seeds=args.seeds, mutation=args.mutate)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_RUNTIME


# --- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="san-mdtc", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write metrics, checkpoints and results")
    t.add_argument("--config", help="key = value file; flags override its entries")
    _add_data_flags(t)
    t.add_argument("--out", help="output directory (default: runs/latest)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy table of a checkpoint under feature ablations")
    e.add_argument("checkpoint")
    _add_data_flags(e)
    e.add_argument("--vocab", help="vocabulary file (default: vocab.tsv next to the checkpoint)")
    e.add_argument("--ablate", action="append", default=None,
                   help="none, zero or shuffle; repeat or comma-separate (default: none)")
    e.add_argument("--split", default="test", choices=("test", "dev"))
    e.add_argument("--seed", type=int, default=None, help="default: the checkpoint's seed")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("em-fit", help="fit the per-class distance mixture to a CSV of class_id,distance")
    m.add_argument("csv")
    m.add_argument("--mode", default="paper", choices=EM_MODES)
    m.add_argument("--iters", type=int, default=20)
    m.add_argument("--tol", type=float, default=1e-5)
    m.add_argument("--min-samples", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_em_fit)

    s = sub.add_parser("synth", help="write a synthetic corpus in the TSV format")
    s.add_argument("--spec", default="preset=separable")
    s.add_argument("--seed", type=int, default=0, help="used when the spec has no seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("param-count", help="parameter counts of both architectures")
    c.add_argument("--config")
    c.add_argument("--input-dim", type=int, default=None, help="default: vocab_size (5000)")
    c.add_argument("--num-classes", type=int, default=2)
    c.add_argument("--num-domains", type=int, nargs="+", default=[4])
    c.add_argument("--hidden", default=None, help="default: 1000,500")
    c.add_argument("--shared-dim", dest="shared_dim", default=None, help="default: 128")
    c.add_argument("--specific-dim", dest="specific_dim", default=None, help="default: 64")
    c.set_defaults(func=cmd_param_count)

    k = sub.add_parser("selfcheck", help="gradient, EM and sphere-center checks")
    k.add_argument("--seeds", type=int, default=10)
    k.add_argument("--mutate", default=None, choices=("stochastic_sign",),
                   help="inject a known bug; the check must then fail")
    k.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.ablate is None:
        args.ablate = ["none"]
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SanError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
