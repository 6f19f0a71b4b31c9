"""Graph ablations: keep or drop relations, drop an entity type, drop random triples."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import KnowledgeGraph

logger = logging.getLogger(__name__)


class AblationKind(str, Enum):
    KEEP_ONLY_RELATION = "keep-only-relation"
    DROP_ENTITY_TYPE = "drop-entity-type"
    DROP_RELATION = "drop-relation"
    DROP_RANDOM_FRACTION = "drop-random-fraction"


@dataclass(frozen=True)
class AblationSpec:
    kind: AblationKind
    argument: str | float
    seed: int = 0
    keep_orphans: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", AblationKind(self.kind))
        if self.kind is AblationKind.DROP_RANDOM_FRACTION:
            try:
                frac = float(self.argument)
            except (TypeError, ValueError):
                raise ConfigError(f"fraction {self.argument!r} is not a number") from None
            if not 0.0 < frac < 1.0:
                raise ConfigError(f"fraction must lie strictly between 0 and 1, got {frac}")
            object.__setattr__(self, "argument", frac)

    @property
    def name(self) -> str:
        return f"{self.kind.value}:{self.argument}"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> AblationSpec:
        """Parse ``kind:argument``, e.g. ``drop-entity-type:gene``."""
        kind, sep, arg = text.partition(":")
        if not sep or not arg:
            raise ConfigError(f"ablation spec {text!r} must look like kind:argument")
        try:
            return cls(AblationKind(kind), arg, seed)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            choices = ", ".join(k.value for k in AblationKind)
            raise ConfigError(f"unknown ablation kind {kind!r} (choose from {choices})") from None

    def to_dict(self):
        return {"kind": self.kind.value, "argument": self.argument, "seed": self.seed,
                "keep_orphans": self.keep_orphans}


@dataclass(frozen=True)
class AblationReport:
    spec: dict
    removed_entities: int
    removed_triples: int
    entities_before: int
    triples_before: int

    @property
    def entity_reduction_pct(self) -> float:
        return 100.0 * self.removed_entities / self.entities_before if self.entities_before else 0.0

    @property
    def triple_reduction_pct(self) -> float:
        return 100.0 * self.removed_triples / self.triples_before if self.triples_before else 0.0

    def to_dict(self):
        return {
            "spec": self.spec,
            "removed_entities": self.removed_entities,
            "removed_triples": self.removed_triples,
            "entities_before": self.entities_before,
            "triples_before": self.triples_before,
            "entity_reduction_pct": self.entity_reduction_pct,
            "triple_reduction_pct": self.triple_reduction_pct,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _keep_mask(kg: KnowledgeGraph, spec: AblationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks over triples and entities that survive ``spec``."""
    t = kg.triples
    entities = np.ones(kg.num_entities, dtype=bool)
    kind = spec.kind
    if kind in (AblationKind.KEEP_ONLY_RELATION, AblationKind.DROP_RELATION):
        if spec.argument not in kg.relation_id:
            raise ConfigError(f"unknown relation {spec.argument!r}")
        hit = t[:, 1] == kg.relation_id[spec.argument]
        return (hit if kind is AblationKind.KEEP_ONLY_RELATION else ~hit), entities
    if kind is AblationKind.DROP_ENTITY_TYPE:
        if spec.argument not in kg.type_names:
            raise ConfigError(f"unknown entity type {spec.argument!r}")
        entities = kg.type_codes != kg.type_names.index(spec.argument)
        return entities[t[:, 0]] & entities[t[:, 2]], entities
    # DROP_RANDOM_FRACTION: one Bernoulli(1 - f) draw per triple, in triple order
    u = np.random.default_rng(spec.seed).random(len(t))
    return u >= spec.argument, entities


def apply(
    kg: KnowledgeGraph, spec: AblationSpec, target_relation: str | None = None
) -> tuple[KnowledgeGraph, AblationReport]:
    """Return the ablated graph and a diff report.

    Entities left without any triple are pruned from the catalog unless
    ``spec.keep_orphans`` is set; relations left unused are pruned likewise.
    Entities of a dropped type are always removed.
    """
    keep_t, keep_e = _keep_mask(kg, spec)
    kept = kg.triples[keep_t]
    if not spec.keep_orphans:
        keep_e = np.zeros(kg.num_entities, dtype=bool)
        keep_e[kept[:, [0, 2]].ravel()] = True
        keep_r = np.zeros(kg.num_relations, dtype=bool)
        keep_r[kept[:, 1]] = True
    else:
        keep_r = np.ones(kg.num_relations, dtype=bool)

    ent_map = np.cumsum(keep_e) - 1
    rel_map = np.cumsum(keep_r) - 1
    remapped = np.column_stack([ent_map[kept[:, 0]], rel_map[kept[:, 1]], ent_map[kept[:, 2]]])
    e_idx, r_idx = np.flatnonzero(keep_e), np.flatnonzero(keep_r)
    out = KnowledgeGraph(
        entity_labels=[kg.entity_labels[i] for i in e_idx],
        entity_types=[kg.entity_types[i] for i in e_idx],
        relation_labels=[kg.relation_labels[i] for i in r_idx],
        relation_signatures=[kg.relation_signatures[i] for i in r_idx],
        triples=remapped,
    )
    report = AblationReport(
        spec=spec.to_dict(),
        removed_entities=kg.num_entities - out.num_entities,
        removed_triples=kg.num_triples - out.num_triples,
        entities_before=kg.num_entities,
        triples_before=kg.num_triples,
    )
    if target_relation is not None:
        if target_relation not in out.relation_id or not len(out.triples_of_relation(target_relation)):
            logger.warning("ablation %s leaves no %r triples", spec.name, target_relation)
    return out, report
