"""Experiment harness: seeded repetitions, grid sweeps, ablation and extension suites.

Every run is split -> (optional training-set transform) -> train -> evaluate,
with split, training and evaluation all seeded by ``base_seed + repetition``.
Baseline and variant runs of a suite therefore share their validation split.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ablation as ablation_mod
from .ablation import AblationSpec
from .errors import ConfigError
from .evaluation import EvalConfig, EvalReport, average_runs, evaluate
from .graph import Dictionary, KnowledgeGraph, TripleIndex, load_graph, merge
from .split import DatasetSplit, SplitConfig, split
from .transe import EarlyStopping, EmbeddingTable, TrainConfig, init_embeddings, save_checkpoint, train

logger = logging.getLogger(__name__)

PRESETS = {
    "biomedical-default": {
        "dim": 128,
        "optimizer": "adam",
        "learning_rate": 1e-4,
        "negatives_per_positive": 1,
    },
}

# value sets used when a sweep axis is given as "default"
SWEEP_DEFAULTS = {
    "dim": [32, 64, 128, 256],
    "negatives_per_positive": [1, 2, 5, 10],
    "learning_rate": [1e-2, 1e-3, 1e-4],
}

SECTIONS = {"split": SplitConfig, "train": TrainConfig, "eval": EvalConfig}
# seeds come from base_seed + repetition, never from the grid
_UNSWEEPABLE = {"seed", "target_relation"}


@dataclass
class ExperimentConfig:
    target_relation: str
    triples: str | None = None
    entity_types: str | None = None
    schema: str | None = None
    split: SplitConfig = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = None
    sweep: dict[str, list] = field(default_factory=dict)
    repetitions: int = 10
    base_seed: int = 0
    out_dir: str | None = None
    save_checkpoints: bool = False

    def __post_init__(self):
        if self.split is None:
            self.split = SplitConfig(self.target_relation)
        if self.eval is None:
            self.eval = EvalConfig(self.target_relation)
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        for axis, values in list(self.sweep.items()):
            _, fname = resolve_axis(axis)
            if values == "default":
                if fname not in SWEEP_DEFAULTS:
                    raise ConfigError(f"sweep axis {axis!r} has no default values")
                values = self.sweep[axis] = list(SWEEP_DEFAULTS[fname])
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list of values")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)} | {"preset"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        if "target_relation" not in d:
            raise ConfigError("experiment config needs target_relation")
        target = d["target_relation"]
        train_kw = {}
        if d.get("preset"):
            if d["preset"] not in PRESETS:
                raise ConfigError(f"unknown preset {d['preset']!r}; choose from {sorted(PRESETS)}")
            train_kw.update(PRESETS[d["preset"]])
        train_kw.update(d.get("train", {}))
        try:
            d["train"] = TrainConfig(**train_kw)
            d["split"] = SplitConfig(target_relation=target, **d.get("split", {}))
            d["eval"] = EvalConfig(target_relation=target, **d.get("eval", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        d.pop("preset", None)
        if base_dir is not None:
            for key in ("triples", "entity_types", "schema", "out_dir"):
                if d.get(key) is not None:
                    d[key] = str(Path(base_dir) / d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def load_graph(self) -> KnowledgeGraph:
        if not (self.triples and self.entity_types):
            raise ConfigError("experiment config needs triples and entity_types paths")
        return load_graph(self.triples, self.entity_types, self.schema)

    def to_dict(self):
        return {
            "target_relation": self.target_relation,
            "triples": self.triples,
            "entity_types": self.entity_types,
            "schema": self.schema,
            "split": dataclasses.asdict(self.split),
            "train": dataclasses.asdict(self.train),
            "eval": self.eval.to_dict(),
            "sweep": self.sweep,
            "repetitions": self.repetitions,
            "base_seed": self.base_seed,
        }


def resolve_axis(name: str) -> tuple[str, str]:
    """Map ``section.field`` or a bare field name onto ``(section, field)``."""
    if "." in name:
        section, _, fname = name.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"sweep axis {name!r}: unknown section {section!r}")
        candidates = [section]
    else:
        fname = name
        candidates = [s for s, c in SECTIONS.items() if fname in {f.name for f in dataclasses.fields(c)}]
    if fname in _UNSWEEPABLE:
        raise ConfigError(f"{fname!r} cannot be swept")
    candidates = [s for s in candidates if fname in {f.name for f in dataclasses.fields(SECTIONS[s])}]
    if len(candidates) != 1:
        raise ConfigError(f"sweep axis {name!r} does not name exactly one config field")
    return candidates[0], fname


def grid(sweep: dict[str, list]) -> list[dict]:
    axes = list(sweep)
    return [dict(zip(axes, values)) for values in itertools.product(*(sweep[a] for a in axes))]


def _configure(cfg: ExperimentConfig, point: dict, seed: int):
    sections = {"split": cfg.split, "train": cfg.train, "eval": cfg.eval}
    overrides: dict[str, dict] = {s: {"seed": seed} for s in sections}
    for axis, value in point.items():
        section, fname = resolve_axis(axis)
        overrides[section][fname] = value
    return tuple(dataclasses.replace(sections[s], **overrides[s]) for s in ("split", "train", "eval"))


@dataclass
class Prepared:
    """Everything one run needs after the split, all in ``catalog``'s ids."""

    catalog: KnowledgeGraph
    train: np.ndarray
    valid: np.ndarray
    known: TripleIndex
    info: dict = field(default_factory=dict)


def _baseline(kg: KnowledgeGraph, ds: DatasetSplit, seed: int) -> Prepared:
    return Prepared(kg, ds.train, ds.valid, kg.index)


@dataclass
class RunRecord:
    run_id: str
    variant: str
    params: dict
    seed: int
    status: str
    config: dict
    stage: str | None = None
    error: str | None = None
    losses: list[float] = field(default_factory=list)
    report: dict | None = None
    duration_s: float = 0.0
    train_s: float = 0.0
    checkpoint: str | None = None
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def eval_report(self) -> EvalReport:
        return EvalReport.from_dict(self.report)

    def to_json(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> RunRecord:
        return cls(**json.loads(Path(path).read_text()))


def _stopper(prep: Prepared, train_cfg: TrainConfig, eval_cfg: EvalConfig) -> EarlyStopping | None:
    """Early stop on a validation Hits@N plateau when ``patience`` is set."""
    if not train_cfg.patience:
        return None
    n = headline_n(eval_cfg.n_values)

    def metric(emb):
        report = evaluate(emb, prep.valid, prep.catalog, prep.known, eval_cfg, norm=train_cfg.norm)
        return report.hits[n]

    return EarlyStopping(metric, train_cfg.patience, train_cfg.eval_every)


def run_once(
    kg: KnowledgeGraph,
    cfg: ExperimentConfig,
    point: dict,
    repetition: int,
    variant: str = "baseline",
    prepare: Callable[[KnowledgeGraph, DatasetSplit, int], Prepared] = _baseline,
    run_id: str | None = None,
) -> RunRecord:
    """One seeded split/train/evaluate cycle. Stage failures are recorded, not raised."""
    seed = cfg.base_seed + repetition
    run_id = run_id or f"{variant}_r{repetition:02d}"
    record = RunRecord(run_id=run_id, variant=variant, params=dict(point), seed=seed,
                       status="running", config={})
    losses: list[float] = []
    start = time.perf_counter()
    stage = "configure"
    try:
        split_cfg, train_cfg, eval_cfg = _configure(cfg, point, seed)
        # stored in JSON form so a reloaded record compares equal
        record.config = json.loads(json.dumps({
            "split": dataclasses.asdict(split_cfg),
            "train": dataclasses.asdict(train_cfg),
            "eval": eval_cfg.to_dict(),
        }))
        stage = "split"
        ds = split(kg, split_cfg)
        stage = "prepare"
        prep = prepare(kg, ds, seed)
        record.info = dict(prep.info)
        record.info.update(
            n_train=len(prep.train), n_valid=len(prep.valid), n_entities=prep.catalog.num_entities,
            cold_start=len(ds.cold_start),
        )
        if len(prep.valid) == 0:
            raise ConfigError("validation split is empty")
        stage = "train"
        t0 = time.perf_counter()
        stopper = _stopper(prep, train_cfg, eval_cfg)

        def on_epoch(epoch, loss, emb):
            losses.append(loss)
            return stopper(epoch, loss, emb) if stopper else False

        emb = train(prep.train, prep.catalog, train_cfg, callback=on_epoch)
        if stopper and stopper.best is not None:
            emb = stopper.best
            record.info["best_epoch"] = stopper.best_epoch
        record.train_s = time.perf_counter() - t0
        stage = "evaluate"
        report = evaluate(emb.freeze(), prep.valid, prep.catalog, prep.known, eval_cfg,
                          norm=train_cfg.norm, model_id=run_id)
        record.report = report.to_dict()
        if cfg.save_checkpoints and cfg.out_dir:
            ckpt_dir = Path(cfg.out_dir) / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            path = ckpt_dir / f"{run_id}.bin"
            save_checkpoint(path, emb, train_cfg, epoch=len(losses) - 1, losses=losses)
            record.checkpoint = str(path)
        record.status = "ok"
    except Exception as exc:  # noqa: BLE001 - a failed run must not stop the grid
        logger.error("run %s failed during %s: %s", run_id, stage, exc)
        logger.debug("%s", traceback.format_exc())
        record.status, record.stage, record.error = "failed", stage, f"{type(exc).__name__}: {exc}"
    record.losses = losses
    record.duration_s = time.perf_counter() - start
    if cfg.out_dir:
        runs_dir = Path(cfg.out_dir) / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        record.to_json(runs_dir / f"{run_id}.json")
    return record


# -- aggregation --------------------------------------------------------------

def headline_n(n_values) -> int:
    return 10 if 10 in n_values else max(n_values)


def _groups(records: list[RunRecord]):
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        key = (rec.variant, json.dumps(rec.params, sort_keys=True))
        groups.setdefault(key, []).append(rec)
    return groups


def aggregate(records: list[RunRecord]) -> list[dict]:
    """One row per (variant, grid point): run counts and mean/std Hits@N.

    Only the persisted Hits values enter, so rows are recomputable from
    saved RunRecords.
    """
    rows = []
    for (variant, _), recs in _groups(records).items():
        ok = [r for r in recs if r.ok]
        row = {"variant": variant, **recs[0].params, "runs": len(ok), "failed": len(recs) - len(ok)}
        if ok:
            avg = average_runs([r.eval_report() for r in ok])
            for n in sorted(avg.hits):
                row[f"hits@{n}_mean"] = avg.hits[n]
                row[f"hits@{n}_std"] = avg.hits_std[n]
        rows.append(row)
    return rows


def timing(records: list[RunRecord]) -> list[dict]:
    rows = []
    for (variant, _), recs in _groups(records).items():
        ok = [r for r in recs if r.ok]
        rows.append({
            "variant": variant, **recs[0].params,
            "mean_train_s": float(np.mean([r.train_s for r in ok])) if ok else float("nan"),
            "mean_run_s": float(np.mean([r.duration_s for r in ok])) if ok else float("nan"),
        })
    return rows


def write_csv(path, rows: list[dict]):
    fields: list[str] = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def load_records(runs_dir) -> list[RunRecord]:
    return [RunRecord.from_json(p) for p in sorted(Path(runs_dir).glob("*.json"))]


# -- experiments ---------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, kg: KnowledgeGraph | None = None) -> list[RunRecord]:
    """Grid sweep times repetitions.

    Writes ``aggregate.csv`` (Hits@N per grid point) and ``timing.csv``
    (mean wall-clock per grid point) when ``cfg.out_dir`` is set.
    """
    kg = kg if kg is not None else cfg.load_graph()
    records = []
    points = grid(cfg.sweep)
    for p, point in enumerate(points):
        for i in range(cfg.repetitions):
            logger.info("grid point %d/%d %s, repetition %d", p + 1, len(points), point, i)
            records.append(run_once(kg, cfg, point, i, run_id=f"p{p:03d}_r{i:02d}"))
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        write_csv(out / "aggregate.csv", aggregate(records))
        write_csv(out / "timing.csv", timing(records))
    return records


@dataclass
class SuiteResult:
    rows: list[dict]
    records: list[RunRecord]

    def per_seed(self, variant: str, n: int = 10) -> list[float]:
        """Hits@n of each successful run of ``variant``, in seed order."""
        recs = sorted((r for r in self.records if r.variant == variant and r.ok), key=lambda r: r.seed)
        return [r.report["hits"][str(n)] for r in recs]

    def row(self, variant: str) -> dict:
        return next(r for r in self.rows if r["variant"] == variant)

    def reports(self) -> list[EvalReport]:
        return [r.eval_report() for r in self.records if r.ok]


def _summary(records, variant, n):
    ok = [r for r in records if r.variant == variant and r.ok]
    row = {"variant": variant, "runs": len(ok), "failed": sum(r.variant == variant for r in records) - len(ok)}
    if ok:
        avg = average_runs([r.eval_report() for r in ok])
        row[f"hits@{n}_mean"] = avg.hits[n]
        row[f"hits@{n}_std"] = avg.hits_std[n]
    else:
        row[f"hits@{n}_mean"] = row[f"hits@{n}_std"] = float("nan")
    return row, ok


def _delta(row, base, n):
    key = f"hits@{n}_mean"
    row["delta"] = row[key] - base[key]
    row["delta_pct"] = 100.0 * row["delta"] / base[key] if base[key] else float("nan")


def _ablation_prepare(spec: AblationSpec, target: str):
    def prepare(kg: KnowledgeGraph, ds: DatasetSplit, seed: int) -> Prepared:
        train_kg = kg.with_triples(ds.train)
        ablated, report = ablation_mod.apply(train_kg, spec, target_relation=target)
        mask = np.zeros(kg.num_entities, dtype=bool)
        mask[[kg.entity_id[label] for label in ablated.entity_labels]] = True
        # evaluated entities need embedding rows even if ablation orphaned them
        mask[ds.valid[:, [0, 2]].ravel()] = True
        mask[ds.test[:, [0, 2]].ravel()] = True
        catalog = kg.restrict(mask)
        return Prepared(
            catalog=catalog,
            train=catalog.encode(ablated.label_triples()),
            valid=catalog.encode(kg.label_triples(ds.valid)),
            known=catalog.index,
            info={
                **report.to_dict(),
                "catalog_entity_reduction_pct": 100.0 * (1 - catalog.num_entities / kg.num_entities),
            },
        )
    return prepare


def run_ablation_suite(
    cfg: ExperimentConfig, specs: list[AblationSpec], kg: KnowledgeGraph | None = None
) -> SuiteResult:
    """Baseline plus one ablated training set per spec, over shared seeds.

    Rows: variant, mean/std Hits@10, delta (absolute and % of baseline),
    entity and triple reduction of the training graph.
    """
    kg = kg if kg is not None else cfg.load_graph()
    n = headline_n(cfg.eval.n_values)
    records = []
    variants = [("baseline", _baseline)] + [
        (spec.name, _ablation_prepare(spec, cfg.target_relation)) for spec in specs
    ]
    for variant, prepare in variants:
        slug = variant.replace(":", "_")
        for i in range(cfg.repetitions):
            records.append(run_once(kg, cfg, {}, i, variant, prepare, run_id=f"{slug}_r{i:02d}"))

    rows = []
    base_row, _ = _summary(records, "baseline", n)
    for variant, _ in variants:
        row, ok = _summary(records, variant, n)
        _delta(row, base_row, n)
        row["entity_reduction_pct"] = float(np.mean([r.info.get("entity_reduction_pct", 0.0) for r in ok])) if ok else 0.0
        row["triple_reduction_pct"] = float(np.mean([r.info.get("triple_reduction_pct", 0.0) for r in ok])) if ok else 0.0
        rows.append(row)
    if cfg.out_dir:
        write_csv(Path(cfg.out_dir) / "ablation.csv", rows)
    return SuiteResult(rows, records)


def run_extension(
    cfg: ExperimentConfig,
    extra_triples,
    dictionary,
    kg: KnowledgeGraph | None = None,
    extra_schema=None,
) -> SuiteResult:
    """Baseline versus training on the graph extended with translated triples.

    New triples join the training set only; both variants share the split,
    the entity catalog and the filter set (base plus extension triples).
    """
    kg = kg if kg is not None else cfg.load_graph()
    if not isinstance(dictionary, Dictionary):
        dictionary = Dictionary.from_file(dictionary)
    merged, merge_report = merge(kg, extra_triples, dictionary, extra_schema)
    # merge keeps base entity and relation ids, so base triples index directly
    in_base = TripleIndex(kg.triples, merged.num_entities, merged.num_relations)
    new = merged.triples[~in_base.contains(merged.triples)]
    info = {
        "added_triples": int(len(new)),
        "growth_pct": merge_report.growth_pct,
        "untranslatable": merge_report.untranslatable,
        "already_present": merge_report.already_present,
    }

    def prep_base(_kg, ds, seed):
        return Prepared(merged, ds.train, ds.valid, merged.index, dict(info))

    def prep_ext(_kg, ds, seed):
        return Prepared(merged, np.concatenate([ds.train, new]), ds.valid, merged.index, dict(info))

    n = headline_n(cfg.eval.n_values)
    records = []
    for variant, prepare in (("baseline", prep_base), ("extended", prep_ext)):
        for i in range(cfg.repetitions):
            records.append(run_once(kg, cfg, {}, i, variant, prepare, run_id=f"{variant}_r{i:02d}"))
    rows = []
    base_row, _ = _summary(records, "baseline", n)
    for variant in ("baseline", "extended"):
        row, _ = _summary(records, variant, n)
        _delta(row, base_row, n)
        row["growth_pct"] = 0.0 if variant == "baseline" else merge_report.growth_pct
        row["relative_delta_pct"] = row.pop("delta_pct")
        rows.append(row)
    if cfg.out_dir:
        write_csv(Path(cfg.out_dir) / "extension.csv", rows)
        (Path(cfg.out_dir) / "merge.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return SuiteResult(rows, records)


def random_baseline(
    catalog: KnowledgeGraph,
    eval_triples,
    known: TripleIndex | None,
    eval_cfg: EvalConfig,
    dim: int = 32,
    seed: int = 0,
    norm: str = "L2",
) -> EvalReport:
    """Hits@N of untrained (randomly initialized) embeddings."""
    emb: EmbeddingTable = init_embeddings(catalog, TrainConfig(dim=dim, seed=seed, norm=norm))
    return evaluate(emb, eval_triples, catalog, known, eval_cfg, norm=norm, model_id=f"random_{seed}")
