"""Command-line entry point: ``gen-data``, ``train``, ``gradcheck`` and ``eval``.

Exit codes: 0 ok, 2 input or config error, 3 numerical failure,
4 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradcheck as gc
from .config import RunConfig, config_from_dict, load_config, resolve_seed
from .errors import ConfigError, MetricForgeError, NonFiniteLoss
from .evaluation import evaluate
from .io import read_dataset_csv, read_label_table, write_dataset_csv, write_embeddings_csv, write_history_csv
from .trainer import LOSS_NAMES, Dataset, SyntheticSpec, generate_synthetic, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4

log = logging.getLogger("metric_forge")


def _parse_ks(text: str) -> list:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ks {text!r}; expected e.g. 1,2,4") from None
    if not ks:
        raise argparse.ArgumentTypeError("ks must not be empty")
    return ks


def _parse_set(text: str):
    key, sep, value = text.partition("=")
    if not sep or "." not in key:
        raise argparse.ArgumentTypeError(f"expected SECTION.KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metric-forge", description="Deep metric learning losses, gradients and training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic clustered dataset as CSV")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--spread", type=float, default=0.15)
    g.add_argument("--seed", type=int, default=None, help="defaults to $METRIC_FORGE_SEED, then 7")
    g.add_argument("--out", default="dataset.csv")

    t = sub.add_parser("train", help="train embeddings and write history, embeddings and report")
    t.add_argument("--config", help="JSON config file (schema 1)")
    t.add_argument("--dump-config", action="store_true", help="print the fully resolved config and exit")
    t.add_argument("--data", help="dataset CSV; synthetic data is generated when absent")
    t.add_argument("--loss", choices=LOSS_NAMES)
    t.add_argument("--M", type=int, help="proxies per class (proxygml)")
    t.add_argument("--K", type=int, help="proxies kept per sample (proxygml)")
    t.add_argument("--sampler", choices=("uniform", "two_per_class"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, dest="learning_rate")
    t.add_argument("--proxy-lr", type=float, dest="proxy_learning_rate")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--encoder-mode", choices=("linear", "free_embeddings"))
    t.add_argument("--embedding-dim", type=int)
    t.add_argument("--omega", type=float, help="weight of the language distillation term")
    t.add_argument("--label-table", help="label embedding CSV (label,e0,...)")
    t.add_argument("--ks", type=_parse_ks)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--set", type=_parse_set, action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value, e.g. loss.ms_epsilon=0.5")

    c = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    c.add_argument("--seeds", type=int, default=10, help="number of seeds (0..n-1)")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--h", type=float, default=gc.DEFAULT_H)
    c.add_argument("--losses", help="comma-separated subset of the registry")
    c.add_argument("--inject-fault", nargs="?", const="triplet_euclidean", default=None, metavar="LOSS",
                   help="corrupt one gradient coordinate of LOSS (checker self-test)")

    e = sub.add_parser("eval", help="recall@k and separation statistics for an embeddings CSV")
    e.add_argument("--embeddings", required=True)
    e.add_argument("--ks", type=_parse_ks, default=[1, 2, 4, 8])
    e.add_argument("--metric", choices=("cosine", "squared_euclidean"), default="cosine")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    return parser


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = resolve_seed(args.seed, SyntheticSpec.seed)
    spec = SyntheticSpec(args.classes, args.per_class, args.dim, args.spread, seed)
    ds = generate_synthetic(spec)
    write_dataset_csv(args.out, ds.features, ds.labels)
    print(f"wrote {args.out}: N={len(ds)} C={spec.num_classes} D={spec.ambient_dim}")
    return EXIT_OK


_FLAG_TARGETS = {
    "loss": ("loss", "name"),
    "M": ("loss", "M"),
    "K": ("loss", "K"),
    "sampler": ("train", "sampler"),
    "epochs": ("train", "epochs"),
    "learning_rate": ("train", "learning_rate"),
    "proxy_learning_rate": ("train", "proxy_learning_rate"),
    "batch_size": ("train", "batch_size"),
    "encoder_mode": ("train", "encoder_mode"),
    "embedding_dim": ("train", "embedding_dim"),
    "omega": ("language", "omega"),
    "label_table": ("language", "table_path"),
    "data": ("data", "path"),
}


def resolve_run_config(args) -> RunConfig:
    """Config file, then ``--set`` overrides, then dedicated flags."""
    raw = load_config(args.config).to_dict() if args.config else RunConfig().to_dict()
    for key, value in args.set:
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = value
    for flag, (section, key) in _FLAG_TARGETS.items():
        value = getattr(args, flag)
        if value is not None:
            raw[section][key] = value
    if args.ks is not None:
        raw["eval"]["ks"] = args.ks
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out_dir is not None:
        raw["output_dir"] = args.out_dir
    return config_from_dict(raw)


def _load_dataset(cfg: RunConfig) -> tuple[Dataset, np.ndarray]:
    """Dataset with labels remapped to ``0..C-1`` plus the original labels."""
    if cfg.data.path:
        features, labels = read_dataset_csv(cfg.data.path)
    else:
        ds = generate_synthetic(cfg.data.synthetic)
        features, labels = ds.features, ds.labels
    classes, dense = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ConfigError("dataset needs at least 2 classes")
    return Dataset(features, dense), labels


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    cfg.seed = cfg.resolved_seed()
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    dataset, original_labels = _load_dataset(cfg)
    tcfg = cfg.to_train_config()
    tcfg.validate(dataset.num_classes)
    table = None
    if cfg.language.omega and cfg.language.table_path:
        table = read_label_table(cfg.language.table_path)
        classes = np.unique(original_labels)
        missing = [int(c) for c in classes if int(c) not in table.vectors]
        if missing:
            raise ConfigError(f"label table lacks classes {missing}")
        table = type(table)({i: table.vectors[int(c)] for i, c in enumerate(classes)}, table.source, table.prompt_template)
    result = train(dataset, tcfg, label_table=table)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_history_csv(out / "history.csv", result.history)
    write_embeddings_csv(out / "embeddings.csv", result.embeddings, original_labels)
    report = {
        "config": cfg.to_dict(),
        "initial": result.initial_report.to_dict(),
        "final": result.final_report.to_dict(),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    final = result.final_report
    print(f"wrote {out / 'history.csv'}, {out / 'embeddings.csv'}, {out / 'report.json'}")
    print(f"separation gap {result.initial_report.separation_gap:.4f} -> {final.separation_gap:.4f}")
    print(f"recall@1 = {final.recall_at_k.get(1, float('nan')):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    registry = gc.default_registry()
    if args.losses:
        names = [n.strip() for n in args.losses.split(",") if n.strip()]
        unknown = [n for n in names if n not in registry]
        if unknown:
            raise ConfigError(f"unknown gradcheck loss(es) {unknown}; choose from {', '.join(registry)}")
        registry = {n: registry[n] for n in names}
    if args.inject_fault is not None:
        if args.inject_fault not in registry:
            raise ConfigError(f"cannot inject a fault into unknown loss {args.inject_fault!r}")
        registry[args.inject_fault] = gc.corrupt(registry[args.inject_fault])
    if args.seeds < 0:
        raise ConfigError("--seeds must be non-negative")
    reports = gc.check_all(registry, range(args.seeds), args.tolerance, args.h)
    print(gc.format_table(reports))
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed at tolerance {args.tolerance:g}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_eval(args) -> int:
    embeddings, labels = read_dataset_csv(args.embeddings)
    text = evaluate(embeddings, labels, args.ks, args.metric).to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "gradcheck": cmd_gradcheck, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLoss as exc:
        print(f"error: numerical failure at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MetricForgeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
