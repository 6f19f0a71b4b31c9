"""Train/validation/test partition over one target relation.

Each target-relation triple is assigned independently with the configured
probabilities; every other triple goes to training. Random draws come from
numpy's PCG64 generator seeded with ``seed``, which is stable across
platforms and numpy versions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import KnowledgeGraph, read_triples, save_triples


@dataclass
class SplitConfig:
    target_relation: str
    probabilities: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.probabilities = tuple(float(p) for p in self.probabilities)
        if len(self.probabilities) != 3:
            raise ConfigError("probabilities must be (train, valid, test)")
        if min(self.probabilities) < 0 or not math.isclose(sum(self.probabilities), 1.0, abs_tol=1e-9):
            raise ConfigError(f"probabilities {self.probabilities} must be non-negative and sum to 1")


@dataclass
class DatasetSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    cold_start: list[str] = field(default_factory=list)

    def counts(self):
        return {"train": len(self.train), "valid": len(self.valid), "test": len(self.test)}


def split(kg: KnowledgeGraph, cfg: SplitConfig) -> DatasetSplit:
    if cfg.target_relation not in kg.relation_id:
        raise ConfigError(f"target relation {cfg.target_relation!r} not in graph")
    r = kg.relation_id[cfg.target_relation]
    is_target = kg.triples[:, 1] == r
    if not is_target.any():
        raise ConfigError(f"graph has no {cfg.target_relation!r} triples to split")

    target = kg.triples[is_target]
    u = np.random.default_rng(cfg.seed).random(len(target))
    p_train, p_valid, _ = cfg.probabilities
    to_train = u < p_train
    to_valid = ~to_train & (u < p_train + p_valid)
    to_test = ~to_train & ~to_valid

    train = np.concatenate([kg.triples[~is_target], target[to_train]])
    valid, test = target[to_valid], target[to_test]

    seen = np.zeros(kg.num_entities, dtype=bool)
    seen[train[:, [0, 2]].ravel()] = True
    held = np.unique(np.concatenate([valid, test])[:, [0, 2]])
    cold = [kg.entity_labels[e] for e in held.tolist() if not seen[e]]
    return DatasetSplit(train, valid, test, cold)


def write_split(ds: DatasetSplit, kg: KnowledgeGraph, cfg: SplitConfig, out_dir):
    """Write ``train/valid/test.tsv`` label files plus a ``split.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        save_triples(out_dir / f"{name}.tsv", kg.label_triples(getattr(ds, name)))
    meta = {
        "config": asdict(cfg),
        "counts": ds.counts(),
        "cold_start_entities": len(ds.cold_start),
    }
    (out_dir / "split.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_split(kg: KnowledgeGraph, out_dir) -> DatasetSplit:
    out_dir = Path(out_dir)
    parts = {n: kg.encode(read_triples(out_dir / f"{n}.tsv")) for n in ("train", "valid", "test")}
    return DatasetSplit(**parts)
