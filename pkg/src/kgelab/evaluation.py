"""Corruption-based ranking evaluation and Hits@N.

For every evaluation triple and corrupted side, the true triple is ranked
against same-type corruptions of that side. Ties count against the true
triple. Hits@N is the fraction of ranks ``<= N``; with both sides corrupted
it is the mean of the per-side values.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .graph import KnowledgeGraph, TripleIndex
from .transe import EmbeddingTable, score_triples

SIDES = ("head", "tail")


@dataclass
class EvalConfig:
    target_relation: str
    n_values: tuple[int, ...] = (1, 3, 10)
    # None means every same-type entity
    candidates_per_triple: int | None = 500
    corrupt_sides: str = "both"
    filtered: bool = True
    seed: int = 0

    def __post_init__(self):
        self.n_values = tuple(sorted(int(n) for n in self.n_values))
        if isinstance(self.candidates_per_triple, str):
            if self.candidates_per_triple.lower() != "all":
                raise ConfigError("candidates_per_triple must be a positive int or 'all'")
            self.candidates_per_triple = None
        if not self.n_values or self.n_values[0] < 1:
            raise ConfigError("n_values must be positive integers")
        if self.candidates_per_triple is not None:
            if self.candidates_per_triple < 1:
                raise ConfigError("candidates_per_triple must be positive")
            if self.n_values[-1] > self.candidates_per_triple + 1:
                raise ConfigError(
                    f"N={self.n_values[-1]} exceeds candidate pool size + 1 "
                    f"({self.candidates_per_triple + 1})"
                )
        if self.corrupt_sides not in ("head", "tail", "both"):
            raise ConfigError("corrupt_sides must be head, tail or both")

    @property
    def sides(self) -> tuple[str, ...]:
        return SIDES if self.corrupt_sides == "both" else (self.corrupt_sides,)

    def to_dict(self):
        d = asdict(self)
        d["n_values"] = list(self.n_values)
        if d["candidates_per_triple"] is None:
            d["candidates_per_triple"] = "all"
        return d


@dataclass
class Corruptions:
    triples: np.ndarray
    # True when fewer candidates than requested were available
    shortfall: bool


def corrupt(
    triple,
    catalog: KnowledgeGraph,
    cfg: EvalConfig,
    known_positives: TripleIndex | None,
    rng: np.random.Generator,
    side: str = "tail",
) -> Corruptions:
    """Same-type corruptions of one side, sampled without replacement.

    The true entity is never a candidate. With ``cfg.filtered`` corruptions
    that are known positives are removed *before* sampling, so the requested
    count is still met when the filtered pool allows it.
    """
    h, r, t = (int(x) for x in triple)
    col = 0 if side == "head" else 2
    true_entity = (h, r, t)[col]
    pool = catalog.entities_of_type(catalog.entity_types[true_entity])
    pool = pool[pool != true_entity]
    cands = np.tile(np.array([h, r, t], dtype=np.int64), (len(pool), 1))
    cands[:, col] = pool
    if cfg.filtered and known_positives is not None and len(cands):
        cands = cands[~known_positives.contains(cands)]
    k = cfg.candidates_per_triple
    if k is None:
        return Corruptions(cands, False)
    if len(cands) <= k:
        return Corruptions(cands, len(cands) < k)
    pick = np.sort(rng.choice(len(cands), size=k, replace=False))
    return Corruptions(cands[pick], False)


def rank(emb: EmbeddingTable, true_triple, candidates, norm: str = "L2") -> int:
    """``1 + #{candidates scoring <= true}``."""
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1, 3)
    s_true = score_triples(emb, [true_triple], norm)[0]
    if len(candidates) == 0:
        return 1
    return 1 + int(np.count_nonzero(score_triples(emb, candidates, norm) <= s_true))


@dataclass
class RankRecord:
    head: int
    relation: int
    tail: int
    side: str
    rank: int
    pool_size: int
    degenerate: bool = False


@dataclass
class EvalReport:
    hits: dict[int, float]
    per_side: dict[str, dict[int, float]] = field(default_factory=dict)
    records: list[RankRecord] = field(default_factory=list)
    hits_std: dict[int, float] | None = None
    n_triples: int = 0
    n_degenerate: int = 0
    n_runs: int = 1
    config: dict = field(default_factory=dict)
    model_id: str = ""

    def hits_at(self, n) -> float:
        return self.hits[int(n)]

    def is_monotone(self) -> bool:
        values = [self.hits[n] for n in sorted(self.hits)]
        return all(a <= b for a, b in zip(values, values[1:]))

    def to_dict(self):
        d = {
            "hits": {str(n): v for n, v in sorted(self.hits.items())},
            "per_side": {
                s: {str(n): v for n, v in sorted(h.items())} for s, h in self.per_side.items()
            },
            "n_triples": self.n_triples,
            "n_degenerate": self.n_degenerate,
            "n_runs": self.n_runs,
            "config": self.config,
            "model_id": self.model_id,
        }
        if self.hits_std is not None:
            d["hits_std"] = {str(n): v for n, v in sorted(self.hits_std.items())}
        return d

    @classmethod
    def from_dict(cls, d) -> EvalReport:
        def ints(m):
            return {int(k): float(v) for k, v in m.items()}

        return cls(
            hits=ints(d["hits"]),
            per_side={s: ints(h) for s, h in d.get("per_side", {}).items()},
            hits_std=ints(d["hits_std"]) if d.get("hits_std") is not None else None,
            n_triples=d.get("n_triples", 0),
            n_degenerate=d.get("n_degenerate", 0),
            n_runs=d.get("n_runs", 1),
            config=d.get("config", {}),
            model_id=d.get("model_id", ""),
        )

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_ranks_csv(self, path, catalog: KnowledgeGraph | None = None):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["head", "relation", "tail", "side", "rank", "pool_size", "degenerate"])
            for rec in self.records:
                h, r, t = rec.head, rec.relation, rec.tail
                if catalog is not None:
                    h, r, t = catalog.label_triples([(h, r, t)])[0]
                w.writerow([h, r, t, rec.side, rec.rank, rec.pool_size, int(rec.degenerate)])


def hits_from_ranks(ranks, n_values) -> dict[int, float]:
    ranks = np.asarray(ranks)
    return {int(n): float(np.mean(ranks <= n)) for n in n_values}


def evaluate(
    emb: EmbeddingTable,
    eval_triples,
    catalog: KnowledgeGraph,
    known_positives: TripleIndex | None,
    cfg: EvalConfig,
    norm: str = "L2",
    model_id: str = "",
) -> EvalReport:
    """Hits@N of ``eval_triples`` (all of ``cfg.target_relation``).

    Candidate sampling for triple ``i`` on a side uses its own generator
    seeded from ``(cfg.seed, i, side)``, so results do not depend on
    evaluation order.
    """
    eval_triples = np.asarray(eval_triples, dtype=np.int64).reshape(-1, 3)
    if len(eval_triples) == 0:
        raise ConfigError("no triples to evaluate")
    r_target = catalog.relation_index(cfg.target_relation)
    if (eval_triples[:, 1] != r_target).any():
        raise ContractError(f"evaluation triples must all use relation {cfg.target_relation!r}")

    records = []
    per_side = {}
    for side in cfg.sides:
        side_code = SIDES.index(side)
        ranks = []
        for i, triple in enumerate(eval_triples):
            rng = np.random.default_rng([cfg.seed, i, side_code])
            c = corrupt(triple, catalog, cfg, known_positives, rng, side)
            rk = rank(emb, triple, c.triples, norm)
            ranks.append(rk)
            records.append(RankRecord(*triple.tolist(), side, rk, len(c.triples), len(c.triples) == 0))
        per_side[side] = hits_from_ranks(ranks, cfg.n_values)
    hits = {n: float(np.mean([per_side[s][n] for s in cfg.sides])) for n in cfg.n_values}
    return EvalReport(
        hits=hits,
        per_side=per_side,
        records=records,
        n_triples=len(eval_triples),
        n_degenerate=sum(r.degenerate for r in records),
        config=cfg.to_dict(),
        model_id=model_id,
    )


def _mean(xs):
    # exactly rounded, so identical runs average to themselves
    return math.fsum(xs) / len(xs)


def _pstd(xs):
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))


def average_runs(reports: list[EvalReport]) -> EvalReport:
    """Mean and population standard deviation of Hits@N across runs."""
    if not reports:
        raise ContractError("no reports to average")
    keys = set(reports[0].hits)
    if any(set(r.hits) != keys for r in reports):
        raise ContractError("reports disagree on their N values")
    ns = sorted(keys)
    sides = set.intersection(*(set(r.per_side) for r in reports))
    per_side = {s: {n: _mean([r.per_side[s][n] for r in reports]) for n in ns} for s in sorted(sides)}
    return EvalReport(
        hits={n: _mean([r.hits[n] for r in reports]) for n in ns},
        hits_std={n: _pstd([r.hits[n] for r in reports]) for n in ns},
        per_side=per_side,
        n_triples=int(np.mean([r.n_triples for r in reports])),
        n_degenerate=sum(r.n_degenerate for r in reports),
        n_runs=len(reports),
        config=reports[0].config,
        model_id=reports[0].model_id,
    )


def expected_random_hits(pool_size: int, n: int) -> float:
    """Hits@N of a uniformly random ranking against ``pool_size`` candidates."""
    return min(n, pool_size + 1) / (pool_size + 1)
