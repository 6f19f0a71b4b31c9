"""Command-line entry point: ``kgelab <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation, runner
from .errors import ConfigError, KGLabError
from .evaluation import EvalConfig, evaluate
from .graph import (
    Dictionary,
    load_graph,
    merge,
    read_triples,
    save_graph,
    stats,
)
from .split import SplitConfig, split, write_split
from .synthetic import PlantedConfig, planted_kg, random_kg
from .transe import EarlyStopping, TrainConfig, init_embeddings, load_checkpoint, save_checkpoint, train

log = logging.getLogger("kgelab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _graph_args(p, required=True):
    p.add_argument("--triples", required=required, help="triples TSV (head, relation, tail)")
    p.add_argument("--types", required=required, help="entity-types TSV (label, type)")
    p.add_argument("--schema", help="optional relation-schema TSV (relation, head_type, tail_type)")


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output file or directory")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _train_args(p):
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--norm", choices=["L1", "L2"], default="L2")
    p.add_argument("--negatives", type=int, default=1, dest="negatives_per_positive")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--lr", type=float, default=1e-4, dest="learning_rate")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--no-normalize", dest="normalize_entities", action="store_false")
    p.add_argument("--patience", type=int, default=None,
                   help="stop after this many validation checks without Hits@10 improvement")
    p.add_argument("--eval-every", type=int, default=10, help="epochs between validation checks")


def _eval_args(p):
    p.add_argument("--target", required=True, help="target relation label")
    p.add_argument("--n", type=int, nargs="+", default=[1, 3, 10], dest="n_values")
    p.add_argument("--candidates", default="500", help="candidates per triple, or 'all'")
    p.add_argument("--sides", choices=["head", "tail", "both"], default="both")
    p.add_argument("--raw", action="store_true", help="unfiltered ranking")


def _candidates(text):
    return None if text.lower() == "all" else int(text)


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def _out(args, default):
    return Path(args.out or default)


def _experiment(args) -> runner.ExperimentConfig:
    if not args.config:
        raise ConfigError("this subcommand needs --config")
    cfg = runner.ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.base_seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if cfg.out_dir is None:
        cfg.out_dir = "runs"
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def cmd_stats(args):
    table = stats(load_graph(args.triples, args.types, args.schema))
    for row in table:
        print(f"{row.category:<13} {row.name:<28} {row.count:>10} {row.percent:8.2f}%")
    if args.out:
        table.to_csv(args.out)


def cmd_split(args):
    kg = load_graph(args.triples, args.types, args.schema)
    cfg = SplitConfig(args.target, tuple(args.probabilities), _seed(args))
    ds = split(kg, cfg)
    write_split(ds, kg, cfg, _out(args, "split"))
    print(json.dumps(ds.counts()))
    if ds.cold_start:
        log.warning("%d held-out entities never occur in training", len(ds.cold_start))


def cmd_train(args):
    kg = load_graph(args.triples, args.types, args.schema)
    train_triples = kg.encode(read_triples(args.train_file)) if args.train_file else kg.triples
    keys = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in vars(args).items() if k in keys and k != "seed"}, seed=_seed(args))
    out = _out(args, "model")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "init.bin", init_embeddings(kg, cfg), cfg, epoch=None)
    losses = []

    stopper = None
    if cfg.patience:
        if not (args.valid_file and args.target):
            raise ConfigError("--patience needs --valid-file and --target")
        valid = kg.encode(read_triples(args.valid_file))
        eval_cfg = EvalConfig(args.target, seed=cfg.seed)
        stopper = EarlyStopping(
            lambda e: evaluate(e, valid, kg, kg.index, eval_cfg, norm=cfg.norm).hits[10],
            cfg.patience, cfg.eval_every,
        )

    def on_epoch(epoch, loss, emb):
        losses.append(loss)
        log.info("epoch %d loss %.6f", epoch, loss)
        return stopper(epoch, loss, emb) if stopper else False

    emb = train(train_triples, kg, cfg, callback=on_epoch)
    epoch = len(losses) - 1
    if stopper and stopper.best is not None:
        emb, epoch = stopper.best, stopper.best_epoch
    save_checkpoint(out / "model.bin", emb, cfg, epoch=epoch, losses=losses)
    print(f"final loss {losses[-1]:.6f}; checkpoint {out / 'model.bin'}")


def cmd_eval(args):
    kg = load_graph(args.triples, args.types, args.schema)
    emb, meta = load_checkpoint(args.checkpoint)
    cfg = EvalConfig(
        args.target, tuple(args.n_values), _candidates(args.candidates), args.sides,
        not args.raw, _seed(args),
    )
    triples = kg.encode(read_triples(args.eval_file))
    report = evaluate(emb, triples, kg, kg.index, cfg, norm=meta["norm"], model_id=str(args.checkpoint))
    out = _out(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.write_ranks_csv(out / "ranks.csv", kg)
    print(" ".join(f"hits@{n}={v:.4f}" for n, v in sorted(report.hits.items())))


def cmd_ablate(args):
    specs = [ablation.AblationSpec.parse(s, seed=_seed(args)) for s in args.spec]
    if args.config:
        cfg = _experiment(args)
        result = runner.run_ablation_suite(cfg, specs)
        _print_rows(result.rows)
        return
    if not (args.triples and args.types):
        raise ConfigError("ablate needs --triples/--types, or --config to run a suite")
    kg = load_graph(args.triples, args.types, args.schema)
    out = _out(args, "ablation")
    for spec in specs:
        ablated, report = ablation.apply(kg, spec)
        d = out / spec.name.replace(":", "_")
        d.mkdir(parents=True, exist_ok=True)
        save_graph(ablated, d / "triples.tsv", d / "types.tsv", d / "schema.tsv")
        report.to_json(d / "diff.json")
        print(f"{spec.name}: -{report.entity_reduction_pct:.2f}% entities, "
              f"-{report.triple_reduction_pct:.2f}% triples")


def cmd_extend(args):
    if args.config:
        cfg = _experiment(args)
        result = runner.run_extension(cfg, args.extra, args.dictionary)
        _print_rows(result.rows)
        return
    if not (args.triples and args.types):
        raise ConfigError("extend needs --triples/--types, or --config to run a comparison")
    kg = load_graph(args.triples, args.types, args.schema)
    merged, report = merge(kg, args.extra, Dictionary.from_file(args.dictionary))
    out = _out(args, "extended")
    out.mkdir(parents=True, exist_ok=True)
    save_graph(merged, out / "triples.tsv", out / "types.tsv", out / "schema.tsv")
    (out / "merge.json").write_text(json.dumps(
        {**dataclasses.asdict(report), "growth_pct": report.growth_pct}, indent=2, sort_keys=True) + "\n")
    print(f"added {report.added} triples ({report.growth_pct:.2f}% growth), "
          f"{report.untranslatable} untranslatable")


def cmd_sweep(args):
    cfg = _experiment(args)
    records = runner.run_experiment(cfg)
    _print_rows(runner.aggregate(records))
    failed = sum(not r.ok for r in records)
    if failed:
        log.warning("%d of %d runs failed", failed, len(records))


def cmd_report(args):
    records = runner.load_records(Path(args.runs) / "runs" if (Path(args.runs) / "runs").is_dir() else args.runs)
    if not records:
        raise ConfigError(f"no run records under {args.runs}")
    rows = runner.aggregate(records)
    _print_rows(rows)
    if args.out:
        runner.write_csv(args.out, rows)


def cmd_synth(args):
    seed = _seed(args)
    if args.kind == "planted":
        kg = planted_kg(PlantedConfig(seed=seed))
    else:
        kg = random_kg(
            {"drug": 50, "disease": 30, "gene": 40},
            [("treats", "drug", "disease", 300), ("targets", "drug", "gene", 200),
             ("associated_with", "gene", "disease", 150)],
            seed=seed,
        )
    out = _out(args, "graph")
    out.mkdir(parents=True, exist_ok=True)
    save_graph(kg, out / "triples.tsv", out / "types.tsv", out / "schema.tsv")
    print(f"wrote {kg!r} to {out}")


def _print_rows(rows):
    for row in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="entity/triple composition table")
    _graph_args(p)
    _common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="train/valid/test split of the target relation")
    _graph_args(p)
    _common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--probabilities", type=float, nargs=3, default=[0.6, 0.2, 0.2])
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train TransE and write a checkpoint")
    _graph_args(p)
    _common(p)
    _train_args(p)
    p.add_argument("--train-file", help="training triples (default: the whole graph)")
    p.add_argument("--valid-file", help="validation triples for early stopping")
    p.add_argument("--target", help="target relation for early stopping")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Hits@N of a checkpoint on held-out triples")
    _graph_args(p)
    _common(p)
    _eval_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-file", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="apply ablations, or run an ablation suite with --config")
    _graph_args(p, required=False)
    _common(p)
    p.add_argument("--spec", action="append", default=[], help="kind:argument, repeatable")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("extend", help="merge extra triples, or compare runs with --config")
    _graph_args(p, required=False)
    _common(p)
    p.add_argument("--extra", required=True, help="extra triples TSV")
    p.add_argument("--dictionary", required=True, help="dictionary TSV (source, canonical, type)")
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("sweep", help="grid sweep x repetitions from --config")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-aggregate persisted run records")
    _common(p)
    p.add_argument("--runs", required=True, help="experiment output dir or its runs/ dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic graph")
    _common(p)
    p.add_argument("--kind", choices=["planted", "random"], default="planted")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.seterr(over="ignore", invalid="ignore")
    try:
        args.func(args)
    except KGLabError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
