"""TransE: translation embeddings trained with a margin ranking loss.

A triple ``(h, r, t)`` is scored by the distance ``||e_h + w_r - e_t||``
under the L1 or L2 norm; lower is more plausible. Training minimizes

    sum over (positive, negative) pairs of max(0, margin + d_pos - d_neg)

with analytic gradients. Updates are sparse: only rows that occur in a
mini-batch (with an active hinge) are touched, for both SGD and Adam.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, SamplingExhaustedError
from .graph import KnowledgeGraph, TripleIndex

logger = logging.getLogger(__name__)

NORMS = ("L1", "L2")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    dim: int = 128
    margin: float = 1.0
    norm: str = "L2"
    negatives_per_positive: int = 1
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 512
    normalize_entities: bool = True
    seed: int = 0
    max_resample: int = 100
    # early stopping on a validation metric; None disables it
    patience: int | None = None
    eval_every: int = 10

    def __post_init__(self):
        self.norm = str(self.norm).upper()
        self.optimizer = str(self.optimizer).lower()
        if self.dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {self.dim}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.max_resample < 1:
            raise ConfigError("epochs, batch_size and max_resample must be positive")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive or None")


@dataclass
class EmbeddingTable:
    entities: np.ndarray
    relations: np.ndarray

    @property
    def dim(self) -> int:
        return self.entities.shape[1]

    def copy(self) -> EmbeddingTable:
        return EmbeddingTable(self.entities.copy(), self.relations.copy())

    def normalize_entities(self):
        norms = np.linalg.norm(self.entities, axis=1, keepdims=True)
        np.divide(self.entities, norms, out=self.entities, where=norms > 0)

    def freeze(self) -> EmbeddingTable:
        """Read-only snapshot, safe to hand to evaluation."""
        snap = self.copy()
        snap.entities.setflags(write=False)
        snap.relations.setflags(write=False)
        return snap


def init_embeddings(kg: KnowledgeGraph, cfg: TrainConfig) -> EmbeddingTable:
    """Uniform init in ``[-6/sqrt(K), 6/sqrt(K)]``, entity rows then unit-normalized."""
    if cfg.dim < 1:
        raise ConfigError("embedding dim must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    emb = EmbeddingTable(
        rng.uniform(-bound, bound, size=(kg.num_entities, cfg.dim)),
        rng.uniform(-bound, bound, size=(kg.num_relations, cfg.dim)),
    )
    if cfg.normalize_entities:
        emb.normalize_entities()
    return emb


def _check_ids(emb: EmbeddingTable, triples: np.ndarray):
    if len(triples) == 0:
        return
    E, R = len(emb.entities), len(emb.relations)
    ents = triples[:, [0, 2]]
    if ents.min() < 0 or ents.max() >= E or triples[:, 1].min() < 0 or triples[:, 1].max() >= R:
        raise IndexError(f"triple ids out of range for table with {E} entities, {R} relations")


def _distance(diff: np.ndarray, norm: str) -> np.ndarray:
    if norm == "L1":
        return np.abs(diff).sum(axis=-1)
    return np.sqrt((diff * diff).sum(axis=-1))


def score_triples(emb: EmbeddingTable, triples, norm: str = "L2") -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    _check_ids(emb, triples)
    diff = emb.entities[triples[:, 0]] + emb.relations[triples[:, 1]] - emb.entities[triples[:, 2]]
    return _distance(diff, norm.upper())


def score(emb: EmbeddingTable, triple, norm: str = "L2") -> float:
    return float(score_triples(emb, [triple], norm)[0])


@dataclass
class Gradients:
    """Row-sparse gradients: unique row ids and their summed gradient rows."""

    entity_rows: np.ndarray
    entity_grad: np.ndarray
    relation_rows: np.ndarray
    relation_grad: np.ndarray


def _sparse_sum(rows, grads, dim):
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, dim))
    uniq, inv = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq), dim))
    np.add.at(out, inv, grads)
    return uniq, out


def loss_and_gradients(emb: EmbeddingTable, positives, negatives, cfg: TrainConfig):
    """Margin loss over aligned pairs and its row-sparse gradient.

    ``negatives`` holds ``cfg.negatives_per_positive`` rows per positive, in
    positive order. The L1 subgradient at zero is zero, as is the L2
    gradient at zero distance.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 3)
    m = cfg.negatives_per_positive
    if len(negatives) != len(positives) * m:
        raise ContractError(
            f"{len(negatives)} negatives do not align with {len(positives)} positives x {m}"
        )
    _check_ids(emb, positives)
    _check_ids(emb, negatives)
    pos = np.repeat(positives, m, axis=0)
    E, W = emb.entities, emb.relations
    diff_p = E[pos[:, 0]] + W[pos[:, 1]] - E[pos[:, 2]]
    diff_n = E[negatives[:, 0]] + W[negatives[:, 1]] - E[negatives[:, 2]]
    d_p, d_n = _distance(diff_p, cfg.norm), _distance(diff_n, cfg.norm)
    violation = cfg.margin + d_p - d_n
    active = violation > 0
    # np.maximum keeps NaN so a blown-up table surfaces as a non-finite loss
    loss = float(np.maximum(violation, 0.0).sum())

    def unit(diff, d):
        if cfg.norm == "L1":
            return np.sign(diff)
        out = np.zeros_like(diff)
        nz = d > 0
        out[nz] = diff[nz] / d[nz, None]
        return out

    g_p = unit(diff_p[active], d_p[active])
    g_n = -unit(diff_n[active], d_n[active])
    pa, na = pos[active], negatives[active]
    ent_rows = np.concatenate([pa[:, 0], pa[:, 2], na[:, 0], na[:, 2]])
    ent_grads = np.concatenate([g_p, -g_p, g_n, -g_n])
    rel_rows = np.concatenate([pa[:, 1], na[:, 1]])
    rel_grads = np.concatenate([g_p, g_n])
    grads = Gradients(*_sparse_sum(ent_rows, ent_grads, emb.dim), *_sparse_sum(rel_rows, rel_grads, emb.dim))
    return loss, grads


@dataclass
class NegativeBatch:
    triples: np.ndarray
    replaced_head: np.ndarray


def sample_negatives(
    kg: KnowledgeGraph,
    batch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    known: TripleIndex | None = None,
) -> NegativeBatch:
    """Type-respecting corruptions, ``cfg.negatives_per_positive`` per positive.

    Each corruption picks head or tail with equal probability and a uniform
    replacement among entities of the same type. Candidates found in
    ``known`` (default: ``kg``'s own triples) or equal to the positive are
    redrawn, side included, up to ``cfg.max_resample`` times.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    known = kg.index if known is None else known
    pool, offsets, sizes = kg.type_pools
    codes = kg.type_codes
    for c in np.unique(codes[batch[:, [0, 2]].ravel()]).tolist():
        if sizes[c] < 2:
            raise ContractError(f"entity type {kg.type_names[c]!r} has fewer than 2 entities")

    rows = np.repeat(batch, cfg.negatives_per_positive, axis=0)
    out = rows.copy()
    head = np.zeros(len(rows), dtype=bool)
    pending = np.arange(len(rows))
    for _ in range(cfg.max_resample):
        if len(pending) == 0:
            break
        src = rows[pending]
        side = rng.random(len(pending)) < 0.5
        original = np.where(side, src[:, 0], src[:, 2])
        c = codes[original]
        slot = np.minimum((rng.random(len(pending)) * sizes[c]).astype(np.int64), sizes[c] - 1)
        pick = pool[offsets[c] + slot]
        cand = src.copy()
        cand[side, 0] = pick[side]
        cand[~side, 2] = pick[~side]
        bad = (pick == original) | known.contains(cand)
        ok = pending[~bad]
        out[ok] = cand[~bad]
        head[ok] = side[~bad]
        pending = pending[bad]
    if len(pending):
        h, r, t = rows[pending[0]].tolist()
        raise SamplingExhaustedError(
            f"no valid negative for ({kg.entity_labels[h]}, {kg.relation_labels[r]}, "
            f"{kg.entity_labels[t]}) after {cfg.max_resample} attempts"
        )
    return NegativeBatch(out, head)


class SGD:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, emb: EmbeddingTable, grads: Gradients):
        emb.entities[grads.entity_rows] -= self.learning_rate * grads.entity_grad
        emb.relations[grads.relation_rows] -= self.learning_rate * grads.relation_grad


class Adam:
    """Row-sparse Adam: moments are updated only for rows with a gradient."""

    def __init__(self, learning_rate, shapes, betas=(0.9, 0.999), eps=1e-8):
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, emb: EmbeddingTable, grads: Gradients):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        parts = [
            (emb.entities, grads.entity_rows, grads.entity_grad),
            (emb.relations, grads.relation_rows, grads.relation_grad),
        ]
        for (param, rows, g), m, v in zip(parts, self.m, self.v):
            if len(rows) == 0:
                continue
            m[rows] = b1 * m[rows] + (1 - b1) * g
            v[rows] = b2 * v[rows] + (1 - b2) * g * g
            param[rows] -= self.learning_rate * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, emb: EmbeddingTable):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, [emb.entities.shape, emb.relations.shape])


# callback(epoch, mean_batch_loss, embeddings) -> True to stop early
EpochCallback = Callable[[int, float, EmbeddingTable], "bool | None"]


def train(
    train_triples,
    catalog: KnowledgeGraph,
    cfg: TrainConfig,
    callback: EpochCallback | None = None,
    init: EmbeddingTable | None = None,
) -> EmbeddingTable:
    """Train TransE on ``train_triples`` (ids in ``catalog``'s space).

    Negatives are drawn from ``catalog``'s type pools and must avoid the
    training triples. Deterministic for a fixed ``cfg.seed``.
    """
    train_triples = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
    if len(train_triples) == 0:
        raise ConfigError("training set is empty")
    emb = init.copy() if init is not None else init_embeddings(catalog, cfg)
    known = TripleIndex(train_triples, catalog.num_entities, catalog.num_relations)
    opt = make_optimizer(cfg, emb)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(train_triples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = train_triples[order[start:start + cfg.batch_size]]
            neg = sample_negatives(catalog, batch, cfg, rng, known)
            loss, grads = loss_and_gradients(emb, batch, neg.triples, cfg)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, cfg.learning_rate, loss)
            opt.step(emb, grads)
            losses.append(loss)
        if not (np.isfinite(emb.entities).all() and np.isfinite(emb.relations).all()):
            raise DivergenceError(epoch, cfg.learning_rate, float("nan"))
        if cfg.normalize_entities:
            emb.normalize_entities()
        mean_loss = float(np.mean(losses))
        logger.debug("epoch %d loss %.6f", epoch, mean_loss)
        if callback is not None and callback(epoch, mean_loss, emb):
            logger.info("stopping early after epoch %d", epoch)
            break
    return emb


class EarlyStopping:
    """Epoch callback that stops after ``patience`` checks without improvement.

    ``metric(emb)`` is evaluated every ``every`` epochs (higher is better);
    the best table seen is kept in ``best``.
    """

    def __init__(self, metric: Callable[[EmbeddingTable], float], patience: int, every: int = 1):
        self.metric = metric
        self.patience = patience
        self.every = every
        self.best: EmbeddingTable | None = None
        self.best_value = -np.inf
        self.best_epoch = -1
        self._bad = 0

    def __call__(self, epoch, loss, emb):
        if (epoch + 1) % self.every:
            return False
        value = self.metric(emb)
        if value > self.best_value:
            self.best_value, self.best_epoch, self.best = value, epoch, emb.copy()
            self._bad = 0
            return False
        self._bad += 1
        return self._bad >= self.patience


# -- checkpoints --------------------------------------------------------------

MAGIC = b"TRNE"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")


def save_checkpoint(path, emb: EmbeddingTable, cfg: TrainConfig, epoch=None, losses=()):
    """Binary rows (little-endian float32) plus a ``.json`` metadata sidecar."""
    path = Path(path)
    E, K = emb.entities.shape
    R = len(emb.relations)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, E, R, K, NORMS.index(cfg.norm)))
        f.write(np.ascontiguousarray(emb.entities, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(emb.relations, dtype="<f4").tobytes())
    meta = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "epoch": epoch,
        "losses": [float(x) for x in losses],
    }
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[EmbeddingTable, dict]:
    path = Path(path)
    data = path.read_bytes()
    magic, version, E, R, K, norm_flag = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path} is not a version-{VERSION} checkpoint")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if body.size != (E + R) * K:
        raise ValueError(f"{path}: truncated checkpoint")
    emb = EmbeddingTable(body[:E * K].reshape(E, K).copy(), body[E * K:].reshape(R, K).copy())
    meta_path = path.with_name(path.name + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta["norm"] = NORMS[norm_flag]
    return emb, meta
