"""Typed knowledge graphs: loading, validation, normalization, merging, stats.

Entities and relations are stored as dense integer ids. Triples live in an
``(n, 3)`` int64 array of ``(head, relation, tail)`` rows in insertion order.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DictionaryError,
    ParseError,
    SchemaError,
    TypeConflictError,
)

logger = logging.getLogger(__name__)

LabelTriple = tuple[str, str, str]


class DuplicateTriplesWarning(UserWarning):
    def __init__(self, count, source=""):
        self.count = count
        super().__init__(f"dropped {count} duplicate triple(s){' in ' + source if source else ''}")


def triple_keys(triples, num_entities, num_relations):
    """Encode ``(h, r, t)`` rows as single int64 keys."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return (triples[:, 0] * num_relations + triples[:, 1]) * num_entities + triples[:, 2]


class TripleIndex:
    """Sorted-key membership index over a set of id triples."""

    def __init__(self, triples, num_entities, num_relations):
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.keys = np.unique(triple_keys(triples, num_entities, num_relations))

    def __len__(self):
        return len(self.keys)

    def contains(self, triples):
        keys = triple_keys(triples, self.num_entities, self.num_relations)
        if len(self.keys) == 0:
            return np.zeros(len(keys), dtype=bool)
        pos = np.searchsorted(self.keys, keys)
        pos[pos == len(self.keys)] = 0
        return self.keys[pos] == keys

    def union(self, triples):
        out = TripleIndex.__new__(TripleIndex)
        out.num_entities, out.num_relations = self.num_entities, self.num_relations
        extra = triple_keys(triples, self.num_entities, self.num_relations)
        out.keys = np.union1d(self.keys, extra)
        return out


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Immutable typed triple set with entity and relation catalogs.

    Parameters
    ----------
    entity_labels, entity_types:
        Parallel sequences; entity ``i`` has label ``entity_labels[i]`` and
        type ``entity_types[i]``.
    relation_labels, relation_signatures:
        Parallel sequences; relation ``j`` connects ``signature[0]`` heads to
        ``signature[1]`` tails.
    triples:
        ``(n, 3)`` integer array of unique ``(h, r, t)`` id rows.
    """

    entity_labels: tuple[str, ...]
    entity_types: tuple[str, ...]
    relation_labels: tuple[str, ...]
    relation_signatures: tuple[tuple[str, str], ...]
    triples: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "entity_labels", tuple(self.entity_labels))
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "relation_labels", tuple(self.relation_labels))
        object.__setattr__(
            self, "relation_signatures", tuple((str(a), str(b)) for a, b in self.relation_signatures)
        )
        triples = np.array(self.triples, dtype=np.int64).reshape(-1, 3)
        triples.setflags(write=False)
        object.__setattr__(self, "triples", triples)
        self._validate()

    def _validate(self):
        E, R = len(self.entity_labels), len(self.relation_labels)
        if len(self.entity_types) != E:
            raise SchemaError("entity_labels and entity_types differ in length")
        if len(self.relation_signatures) != R:
            raise SchemaError("relation_labels and relation_signatures differ in length")
        if len(set(self.entity_labels)) != E:
            raise SchemaError("entity labels are not unique")
        if len(set(self.relation_labels)) != R:
            raise SchemaError("relation labels are not unique")
        t = self.triples
        if len(t) == 0:
            return
        if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= E:
            raise SchemaError("triple references an entity id outside the catalog")
        if t[:, 1].min() < 0 or t[:, 1].max() >= R:
            raise SchemaError("triple references a relation id outside the catalog")
        if len(np.unique(triple_keys(t, E, R))) != len(t):
            raise SchemaError("duplicate triples")
        codes = self.type_codes
        names = self.type_names
        code_of = {n: i for i, n in enumerate(names)}
        sig = np.array(
            [[code_of.get(h, -1), code_of.get(tt, -1)] for h, tt in self.relation_signatures],
            dtype=np.int64,
        ).reshape(-1, 2)
        bad = (codes[t[:, 0]] != sig[t[:, 1], 0]) | (codes[t[:, 2]] != sig[t[:, 1], 1])
        if bad.any():
            h, r, tt = t[np.argmax(bad)]
            raise SchemaError(
                f"triple ({self.entity_labels[h]}, {self.relation_labels[r]}, "
                f"{self.entity_labels[tt]}) violates signature of relation "
                f"{self.relation_labels[r]!r} {self.relation_signatures[r]}"
            )

    @property
    def num_entities(self):
        return len(self.entity_labels)

    @property
    def num_relations(self):
        return len(self.relation_labels)

    @property
    def num_triples(self):
        return len(self.triples)

    @cached_property
    def entity_id(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.entity_labels)}

    @cached_property
    def relation_id(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.relation_labels)}

    @cached_property
    def type_names(self) -> tuple[str, ...]:
        """Entity types in first-appearance order over the catalog."""
        return tuple(dict.fromkeys(self.entity_types))

    @cached_property
    def type_codes(self) -> np.ndarray:
        code_of = {n: i for i, n in enumerate(self.type_names)}
        return np.array([code_of[t] for t in self.entity_types], dtype=np.int64)

    @cached_property
    def index(self) -> TripleIndex:
        return TripleIndex(self.triples, self.num_entities, self.num_relations)

    @cached_property
    def type_pools(self):
        """``(pool, offsets, sizes)``: entity ids grouped by type code."""
        codes = self.type_codes
        order = np.argsort(codes, kind="stable")
        sizes = np.bincount(codes, minlength=len(self.type_names))
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        return order.astype(np.int64), offsets, sizes

    def entities_of_type(self, type_name) -> np.ndarray:
        if type_name not in self.type_names:
            return np.zeros(0, dtype=np.int64)
        pool, offsets, sizes = self.type_pools
        c = self.type_names.index(type_name)
        return pool[offsets[c]:offsets[c] + sizes[c]]

    def relation_index(self, label) -> int:
        try:
            return self.relation_id[label]
        except KeyError:
            raise SchemaError(f"unknown relation {label!r}") from None

    def triples_of_relation(self, label) -> np.ndarray:
        return self.triples[self.triples[:, 1] == self.relation_index(label)]

    def label_triples(self, triples=None) -> list[LabelTriple]:
        triples = self.triples if triples is None else np.asarray(triples).reshape(-1, 3)
        E, R = self.entity_labels, self.relation_labels
        return [(E[h], R[r], E[t]) for h, r, t in triples.tolist()]

    def label_set(self) -> set[LabelTriple]:
        return set(self.label_triples())

    def encode(self, label_triples: Iterable[Sequence[str]]) -> np.ndarray:
        """Map label triples onto this graph's ids. Unknown labels raise ``SchemaError``."""
        rows = []
        for h, r, t in label_triples:
            try:
                rows.append((self.entity_id[h], self.relation_id[r], self.entity_id[t]))
            except KeyError as exc:
                raise SchemaError(f"label {exc.args[0]!r} not in catalog") from None
        return np.array(rows, dtype=np.int64).reshape(-1, 3)

    def entity_type_map(self) -> dict[str, str]:
        return dict(zip(self.entity_labels, self.entity_types))

    def schema(self) -> dict[str, tuple[str, str]]:
        return dict(zip(self.relation_labels, self.relation_signatures))

    def with_triples(self, triples) -> KnowledgeGraph:
        """Same catalogs and ids, different triple set."""
        return KnowledgeGraph(
            self.entity_labels, self.entity_types, self.relation_labels,
            self.relation_signatures, triples,
        )

    def restrict(self, entity_mask) -> KnowledgeGraph:
        """Sub-catalog of the masked entities (order kept), all relations, and
        the triples lying entirely inside it."""
        entity_mask = np.asarray(entity_mask, dtype=bool)
        new_id = np.cumsum(entity_mask) - 1
        t = self.triples[entity_mask[self.triples[:, 0]] & entity_mask[self.triples[:, 2]]]
        idx = np.flatnonzero(entity_mask)
        return KnowledgeGraph(
            [self.entity_labels[i] for i in idx],
            [self.entity_types[i] for i in idx],
            self.relation_labels,
            self.relation_signatures,
            np.column_stack([new_id[t[:, 0]], t[:, 1], new_id[t[:, 2]]]),
        )

    def __repr__(self):
        return (
            f"KnowledgeGraph(entities={self.num_entities}, relations={self.num_relations}, "
            f"triples={self.num_triples})"
        )


def same_graph(a: KnowledgeGraph, b: KnowledgeGraph) -> bool:
    """Label-level isomorphism: equal up to id renumbering."""
    return (
        a.entity_type_map() == b.entity_type_map()
        and a.schema() == b.schema()
        and a.label_set() == b.label_set()
        and a.num_triples == b.num_triples
    )


def from_labeled(
    triples: Iterable[Sequence[str]],
    entity_types: Mapping[str, str],
    schema: Mapping[str, tuple[str, str]] | None = None,
    order: str = "triples",
    source: str = "",
) -> tuple[KnowledgeGraph, int]:
    """Build a validated graph from label triples.

    ``order="triples"`` numbers entities and relations by first appearance in
    ``triples`` (catalog-only entities follow in mapping order);
    ``order="catalog"`` numbers them by the order of ``entity_types`` and
    ``schema``. Relation signatures missing from ``schema`` are inferred from
    their first triple. Returns the graph and the number of duplicates dropped.
    """
    schema = dict(schema or {})
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    if order == "catalog":
        for label in entity_types:
            ent_ids[label] = len(ent_ids)
        for label in schema:
            rel_ids[label] = len(rel_ids)
    elif order != "triples":
        raise ValueError(f"unknown order {order!r}")

    rows = []
    seen = set()
    duplicates = 0
    for h, r, t in triples:
        for label in (h, t):
            if label not in entity_types:
                raise SchemaError(f"entity {label!r} has no declared type")
        sig = (entity_types[h], entity_types[t])
        declared = schema.setdefault(r, sig)
        if declared != sig:
            raise SchemaError(
                f"relation {r!r} expects {declared[0]} -> {declared[1]} but "
                f"({h}, {r}, {t}) is {sig[0]} -> {sig[1]}"
            )
        for label in (h, t):
            if label not in ent_ids:
                ent_ids[label] = len(ent_ids)
        if r not in rel_ids:
            rel_ids[r] = len(rel_ids)
        row = (ent_ids[h], rel_ids[r], ent_ids[t])
        if row in seen:
            duplicates += 1
            continue
        seen.add(row)
        rows.append(row)
    for label in entity_types:
        if label not in ent_ids:
            ent_ids[label] = len(ent_ids)
    for label in schema:
        if label not in rel_ids:
            rel_ids[label] = len(rel_ids)

    labels = list(ent_ids)
    rels = list(rel_ids)
    kg = KnowledgeGraph(
        entity_labels=labels,
        entity_types=[entity_types[x] for x in labels],
        relation_labels=rels,
        relation_signatures=[schema[r] for r in rels],
        triples=np.array(rows, dtype=np.int64).reshape(-1, 3),
    )
    if duplicates:
        warnings.warn(DuplicateTriplesWarning(duplicates, source), stacklevel=3)
        logger.warning("dropped %d duplicate triple(s) %s", duplicates, source)
    return kg, duplicates


# -- file formats -------------------------------------------------------------

def _read_tsv(path, ncols):
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise ParseError(path, lineno, f"expected {ncols} tab-separated columns, got {len(cols)}")
            yield lineno, cols


def read_triples(path) -> list[LabelTriple]:
    return [tuple(cols) for _, cols in _read_tsv(path, 3)]


def read_entity_types(path) -> dict[str, str]:
    types: dict[str, str] = {}
    for lineno, (label, type_name) in _read_tsv(path, 2):
        if types.setdefault(label, type_name) != type_name:
            raise SchemaError(
                f"{path}:{lineno}: entity {label!r} declared as both {types[label]} and {type_name}"
            )
    return types


def read_schema(path) -> dict[str, tuple[str, str]]:
    schema: dict[str, tuple[str, str]] = {}
    for lineno, (rel, h, t) in _read_tsv(path, 3):
        if schema.setdefault(rel, (h, t)) != (h, t):
            raise SchemaError(f"{path}:{lineno}: relation {rel!r} declared twice with different types")
    return schema


def load_graph(triples_path, entity_types_path, schema_path=None) -> KnowledgeGraph:
    """Load a graph from a triples TSV and an entity-types TSV.

    Duplicate triple lines are dropped with a ``DuplicateTriplesWarning``.
    Ids follow first appearance in the triples file.
    """
    types = read_entity_types(entity_types_path)
    schema = read_schema(schema_path) if schema_path else None
    raw = list(_read_tsv(triples_path, 3))
    for lineno, (h, r, t) in raw:
        for label in (h, t):
            if label not in types:
                raise SchemaError(f"{triples_path}:{lineno}: entity {label!r} missing from type file")
    kg, _ = from_labeled(
        (cols for _, cols in raw), types, schema, order="triples", source=str(triples_path)
    )
    return kg


def _write_tsv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        for row in rows:
            f.write("\t".join(row) + "\n")


def save_triples(path, label_triples):
    _write_tsv(path, label_triples)


def save_graph(kg: KnowledgeGraph, triples_path, entity_types_path, schema_path=None):
    _write_tsv(triples_path, kg.label_triples())
    _write_tsv(entity_types_path, zip(kg.entity_labels, kg.entity_types))
    if schema_path is not None:
        _write_tsv(schema_path, ((r, h, t) for r, (h, t) in kg.schema().items()))


# -- stats --------------------------------------------------------------------

@dataclass(frozen=True)
class StatsRow:
    category: str
    name: str
    count: int
    percent: float


class StatsTable(list):
    """Rows of ``(category, name, count, percent)``.

    Categories: ``entity_type`` (percent of all entities), ``relation`` and
    ``type_pair`` (percent of all triples), and the two totals.
    """

    def select(self, category) -> dict[str, StatsRow]:
        return {row.name: row for row in self if row.category == category}

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["category", "name", "count", "percent"])
            for row in self:
                w.writerow([row.category, row.name, row.count, f"{row.percent:.4f}"])


def _pct(count, total):
    return 100.0 * count / total if total else 0.0


def stats(kg: KnowledgeGraph) -> StatsTable:
    E, T = kg.num_entities, kg.num_triples
    table = StatsTable()
    type_counts = np.bincount(kg.type_codes, minlength=len(kg.type_names))
    for name, n in zip(kg.type_names, type_counts.tolist()):
        table.append(StatsRow("entity_type", name, n, _pct(n, E)))
    table.append(StatsRow("entity_total", "all", E, 100.0 if E else 0.0))

    rel_counts = np.bincount(kg.triples[:, 1], minlength=kg.num_relations).tolist()
    pairs: dict[str, int] = {}
    for label, sig, n in zip(kg.relation_labels, kg.relation_signatures, rel_counts):
        table.append(StatsRow("relation", label, n, _pct(n, T)))
        key = f"{sig[0]}-{sig[1]}"
        pairs[key] = pairs.get(key, 0) + n
    for key, n in pairs.items():
        table.append(StatsRow("type_pair", key, n, _pct(n, T)))
    table.append(StatsRow("triple_total", "all", T, 100.0 if T else 0.0))
    return table


# -- dictionaries, normalization, merging ------------------------------------

class Dictionary:
    """Per-type alias table mapping source labels to canonical labels.

    Chains (``a -> b``, ``b -> c``) resolve to their final label; cycles and
    conflicting entries raise ``DictionaryError``.
    """

    def __init__(self, entries: Iterable[tuple[str, str, str]] = ()):
        self._map: dict[tuple[str, str], str] = {}
        for source, canonical, type_name in entries:
            key = (type_name, source)
            if self._map.setdefault(key, canonical) != canonical:
                raise DictionaryError(
                    f"{type_name} label {source!r} maps to both {self._map[key]!r} and {canonical!r}"
                )
        self._resolved = {key: self._resolve(*key) for key in self._map}

    def _resolve(self, type_name, label):
        seen = [label]
        while (type_name, label) in self._map:
            label = self._map[(type_name, label)]
            if label in seen:
                if label == seen[-1]:
                    break
                raise DictionaryError(f"alias cycle among {type_name} labels {seen}")
            seen.append(label)
        return label

    @classmethod
    def from_file(cls, path) -> Dictionary:
        return cls(tuple(cols) for _, cols in _read_tsv(path, 3))

    def canonical(self, label, type_name) -> str:
        return self._resolved.get((type_name, label), label)

    def __len__(self):
        return len(self._map)

    def __bool__(self):
        return bool(self._map)


@dataclass(frozen=True)
class NormalizeReport:
    merged_entities: int
    removed_triples: int


def normalize(kg: KnowledgeGraph, dictionary: Dictionary) -> tuple[KnowledgeGraph, NormalizeReport]:
    """Merge entities that share a canonical label and rewrite their triples."""
    new_labels = [dictionary.canonical(l, t) for l, t in zip(kg.entity_labels, kg.entity_types)]
    if new_labels == list(kg.entity_labels):
        return kg, NormalizeReport(0, 0)

    types: dict[str, str] = {}
    origin: dict[str, str] = {}
    for old, new, type_name in zip(kg.entity_labels, new_labels, kg.entity_types):
        if types.setdefault(new, type_name) != type_name:
            raise TypeConflictError(
                f"merging into {new!r} would join {origin[new]!r} ({types[new]}) "
                f"with {old!r} ({type_name})"
            )
        origin.setdefault(new, old)

    R = kg.relation_labels
    rewritten = ((new_labels[h], R[r], new_labels[t]) for h, r, t in kg.triples.tolist())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DuplicateTriplesWarning)
        out, dropped = from_labeled(rewritten, types, kg.schema(), order="catalog")
    report = NormalizeReport(kg.num_entities - out.num_entities, dropped)
    logger.info("normalize: merged %d entities, removed %d duplicate triples", *(
        report.merged_entities, report.removed_triples))
    return out, report


@dataclass(frozen=True)
class MergeReport:
    read: int
    added: int
    already_present: int
    untranslatable: int
    base_triples: int

    @property
    def growth_pct(self) -> float:
        return _pct(self.added, self.base_triples)


def merge(
    base: KnowledgeGraph,
    extra_triples,
    dictionary: Dictionary,
    extra_schema: Mapping[str, tuple[str, str]] | None = None,
) -> tuple[KnowledgeGraph, MergeReport]:
    """Add translated extra triples to ``base``.

    Each extra label is translated with ``dictionary`` under the entity type
    its relation demands; triples whose entities do not land on a base entity
    of that type are skipped and counted. Base ids are preserved and new
    relations (declared in ``extra_schema``) are appended.

    ``extra_triples`` is a path or an iterable of label triples.
    """
    if isinstance(extra_triples, (str, Path)):
        extra_triples = read_triples(extra_triples)
    schema = base.schema()
    for rel, sig in (extra_schema or {}).items():
        if schema.setdefault(rel, tuple(sig)) != tuple(sig):
            raise SchemaError(f"relation {rel!r} already has signature {schema[rel]}")
    types = base.entity_type_map()

    translated = []
    untranslatable = 0
    read = 0
    for h, r, t in extra_triples:
        read += 1
        if r not in schema:
            raise SchemaError(f"extra relation {r!r} is not in the base graph and has no declared signature")
        ht, tt = schema[r]
        h2, t2 = dictionary.canonical(h, ht), dictionary.canonical(t, tt)
        if types.get(h2) != ht or types.get(t2) != tt:
            untranslatable += 1
            continue
        translated.append((h2, r, t2))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DuplicateTriplesWarning)
        out, _ = from_labeled(
            list(base.label_triples()) + translated, types, schema, order="catalog"
        )
    added = out.num_triples - base.num_triples
    report = MergeReport(
        read=read,
        added=added,
        already_present=len(translated) - added,
        untranslatable=untranslatable,
        base_triples=base.num_triples,
    )
    logger.info(
        "merge: %d read, %d added (%.2f%% growth), %d untranslatable",
        read, added, report.growth_pct, untranslatable,
    )
    return out, report
