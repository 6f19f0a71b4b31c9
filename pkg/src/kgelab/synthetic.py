"""Synthetic graphs with known composition or planted link structure."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import KnowledgeGraph, from_labeled


def random_kg(type_counts: dict[str, int], relations: list[tuple[str, str, str, int]], seed=0) -> KnowledgeGraph:
    """Random graph with exact per-type entity and per-relation triple counts.

    ``relations`` holds ``(label, head_type, tail_type, n_triples)``; the
    triples of each relation are distinct pairs drawn without replacement
    (self-loops included when head and tail types coincide).
    """
    rng = np.random.default_rng(seed)
    types = {}
    by_type = {}
    for type_name, n in type_counts.items():
        labels = [f"{type_name}_{i}" for i in range(n)]
        by_type[type_name] = labels
        types.update(dict.fromkeys(labels, type_name))
    triples = []
    schema = {}
    for label, ht, tt, n in relations:
        heads, tails = by_type[ht], by_type[tt]
        total = len(heads) * len(tails)
        if n > total:
            raise ValueError(f"relation {label!r} cannot hold {n} distinct triples")
        for code in rng.choice(total, size=n, replace=False).tolist():
            triples.append((heads[code // len(tails)], label, tails[code % len(tails)]))
        schema[label] = (ht, tt)
    kg, _ = from_labeled(triples, types, schema, order="catalog")
    return kg


@dataclass(frozen=True)
class PlantedConfig:
    n_drugs: int = 200
    n_diseases: int = 100
    n_genes: int = 150
    n_clusters: int = 10
    genes_per_drug: int = 2
    diseases_per_gene: int = 2
    # probability that a drug-gene or gene-disease link leaves its cluster
    noise: float = 0.0
    hierarchy: bool = True
    seed: int = 0


TREATS = "treats"
TARGETS = "targets"
ASSOCIATED = "associated_with"
SUBCLASS = "subclass_of"


def planted_kg(cfg: PlantedConfig = PlantedConfig()) -> KnowledgeGraph:
    """Drug/disease/gene graph whose ``treats`` edges follow gene paths.

    Entities are split into clusters. Drugs target genes and genes are
    associated with diseases of the same cluster (up to ``noise``); a drug
    treats a disease exactly when some gene links them. Optionally each
    disease is a ``subclass_of`` its cluster's root disease.
    """
    rng = np.random.default_rng(cfg.seed)
    C = cfg.n_clusters
    drugs = [f"drug_{i}" for i in range(cfg.n_drugs)]
    diseases = [f"disease_{i}" for i in range(cfg.n_diseases)]
    genes = [f"gene_{i}" for i in range(cfg.n_genes)]
    members = {
        kind: [np.arange(c, n, C) for c in range(C)]
        for kind, n in (("disease", cfg.n_diseases), ("gene", cfg.n_genes))
    }

    def pick(kind, cluster, k):
        out = set()
        own = members[kind][cluster]
        n_total = cfg.n_diseases if kind == "disease" else cfg.n_genes
        while len(out) < min(k, len(own)):
            if cfg.noise and rng.random() < cfg.noise:
                out.add(int(rng.integers(n_total)))
            else:
                out.add(int(rng.choice(own)))
        return sorted(out)

    gene_links = {d: pick("gene", d % C, cfg.genes_per_drug) for d in range(cfg.n_drugs)}
    disease_links = {g: pick("disease", g % C, cfg.diseases_per_gene) for g in range(cfg.n_genes)}

    triples = []
    for d, gs in gene_links.items():
        triples += [(drugs[d], TARGETS, genes[g]) for g in gs]
    for g, ss in disease_links.items():
        triples += [(genes[g], ASSOCIATED, diseases[s]) for s in ss]
    for d, gs in gene_links.items():
        treated = sorted({s for g in gs for s in disease_links[g]})
        triples += [(drugs[d], TREATS, diseases[s]) for s in treated]
    if cfg.hierarchy:
        for s in range(C, cfg.n_diseases):
            triples.append((diseases[s], SUBCLASS, diseases[s % C]))

    types = {**dict.fromkeys(drugs, "drug"), **dict.fromkeys(diseases, "disease"), **dict.fromkeys(genes, "gene")}
    schema = {
        TREATS: ("drug", "disease"),
        TARGETS: ("drug", "gene"),
        ASSOCIATED: ("gene", "disease"),
    }
    if cfg.hierarchy:
        schema[SUBCLASS] = ("disease", "disease")
    kg, _ = from_labeled(triples, types, schema, order="catalog")
    return kg
