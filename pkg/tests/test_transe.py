import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgelab.errors import ConfigError, ContractError, DivergenceError, SamplingExhaustedError
from kgelab.synthetic import random_kg
from kgelab.transe import (
    Adam,
    EarlyStopping,
    EmbeddingTable,
    Gradients,
    SGD,
    TrainConfig,
    init_embeddings,
    load_checkpoint,
    loss_and_gradients,
    sample_negatives,
    save_checkpoint,
    score,
    score_triples,
    train,
)

from conftest import make_kg


def reference_loss(ent, rel, positives, negatives, margin, norm, m):
    """Margin loss written out pair by pair."""
    total = 0.0
    for i, (h, r, t) in enumerate(positives):
        d_pos = _dist(ent[h] + rel[r] - ent[t], norm)
        for j in range(m):
            h2, r2, t2 = negatives[i * m + j]
            d_neg = _dist(ent[h2] + rel[r2] - ent[t2], norm)
            total += max(0.0, margin + d_pos - d_neg)
    return total


def _dist(v, norm):
    if norm == "L1":
        return sum(abs(x) for x in v)
    return math.sqrt(sum(x * x for x in v))


def dense(grads, emb):
    ge = np.zeros_like(emb.entities)
    gr = np.zeros_like(emb.relations)
    ge[grads.entity_rows] = grads.entity_grad
    gr[grads.relation_rows] = grads.relation_grad
    return ge, gr


def random_batch(rng, E=12, R=3, K=6, n=5, m=2):
    emb = EmbeddingTable(rng.normal(size=(E, K)), rng.normal(size=(R, K)))
    pos = np.column_stack([rng.integers(E, size=n), rng.integers(R, size=n), rng.integers(E, size=n)])
    neg = np.repeat(pos, m, axis=0)
    side = rng.random(n * m) < 0.5
    neg[side, 0] = rng.integers(E, size=side.sum())
    neg[~side, 2] = rng.integers(E, size=(~side).sum())
    return emb, pos, neg


# -- init -------------------------------------------------------------------------

def test_init_bounds_and_norms(toy_kg):
    raw = init_embeddings(toy_kg, TrainConfig(dim=4, seed=1, normalize_entities=False))
    assert np.abs(raw.entities).max() <= 3.0 and np.abs(raw.relations).max() <= 3.0
    emb = init_embeddings(toy_kg, TrainConfig(dim=4, seed=1))
    np.testing.assert_allclose(np.linalg.norm(emb.entities, axis=1), 1.0)
    assert np.abs(emb.relations).max() <= 3.0


def test_init_deterministic(toy_kg):
    a = init_embeddings(toy_kg, TrainConfig(dim=8, seed=5))
    b = init_embeddings(toy_kg, TrainConfig(dim=8, seed=5))
    assert a.entities.tobytes() == b.entities.tobytes()
    assert a.relations.tobytes() == b.relations.tobytes()


def test_init_moments():
    kg = random_kg({"x": 1000}, [], seed=0)
    K = 100
    emb = init_embeddings(kg, TrainConfig(dim=K, seed=2, normalize_entities=False))
    draws = emb.entities.ravel()
    bound = 6 / math.sqrt(K)
    sigma = bound / math.sqrt(3) / math.sqrt(draws.size)
    assert draws.size == 10**5
    assert abs(draws.mean()) < 3 * sigma


def test_zero_dim_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(dim=0)


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": 0}, {"negatives_per_positive": 0}, {"norm": "L3"},
    {"optimizer": "rmsprop"}, {"margin": -1}, {"epochs": 0},
])
def test_bad_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_biomedical_optimum_accepted():
    cfg = TrainConfig(optimizer="ADAM", learning_rate=1e-4)
    assert cfg.optimizer == "adam" and cfg.learning_rate == 1e-4 and cfg.dim == 128


# -- score -------------------------------------------------------------------------

def test_score_exact_translation():
    emb = EmbeddingTable(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([[0.0, 1.0]]))
    assert score(emb, (0, 0, 1), "L2") == 0.0


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_score_zero_vectors(norm):
    emb = EmbeddingTable(np.zeros((2, 3)), np.zeros((1, 3)))
    assert score(emb, (0, 0, 1), norm) == 0.0


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_score_matches_direct_norm(rng, norm):
    h, r, t = rng.normal(size=(3, 5))
    emb = EmbeddingTable(np.stack([h, t]), r[None])
    assert score(emb, (0, 0, 1), norm) == pytest.approx(_dist(h + r - t, norm), abs=1e-12)


def test_score_out_of_range():
    emb = EmbeddingTable(np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(IndexError):
        score(emb, (0, 0, 2))
    with pytest.raises(IndexError):
        score(emb, (-1, 0, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["L1", "L2"]))
def test_score_non_negative(seed, norm):
    emb, pos, neg = random_batch(np.random.default_rng(seed))
    assert (score_triples(emb, np.concatenate([pos, neg]), norm) >= 0).all()


# -- loss and gradients ----------------------------------------------------------

def test_identical_negative_zero_margin():
    emb = EmbeddingTable(np.eye(3), np.ones((1, 3)))
    loss, grads = loss_and_gradients(emb, [(0, 0, 1)], [(0, 0, 1)], TrainConfig(margin=0.0))
    assert loss == 0.0
    assert len(grads.entity_rows) == 0 and len(grads.relation_rows) == 0


def test_margin_satisfied():
    # d_pos = 2, d_neg = 5 under L2
    emb = EmbeddingTable(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 5.0]]), np.zeros((1, 2)))
    cfg = TrainConfig(margin=1.0, norm="L2")
    assert score(emb, (0, 0, 1)) == 2.0 and score(emb, (0, 0, 2)) == 5.0
    loss, grads = loss_and_gradients(emb, [(0, 0, 1)], [(0, 0, 2)], cfg)
    assert loss == 0.0 and len(grads.entity_rows) == 0


def test_misaligned_negatives():
    emb = EmbeddingTable(np.eye(3), np.ones((1, 3)))
    with pytest.raises(ContractError):
        loss_and_gradients(emb, [(0, 0, 1)], [(0, 0, 2)], TrainConfig(negatives_per_positive=2))


def finite_difference(emb, pos, neg, cfg, eps=1e-6):
    ge, gr = np.zeros_like(emb.entities), np.zeros_like(emb.relations)
    for param, out in ((emb.entities, ge), (emb.relations, gr)):
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up = reference_loss(emb.entities, emb.relations, pos, neg, cfg.margin, cfg.norm, cfg.negatives_per_positive)
            param[idx] = old - eps
            down = reference_loss(emb.entities, emb.relations, pos, neg, cfg.margin, cfg.norm, cfg.negatives_per_positive)
            param[idx] = old
            out[idx] = (up - down) / (2 * eps)
    return ge, gr


def near_kink(emb, pos, neg, cfg, tol=1e-6):
    """True when a hinge or an L1 coordinate sits within ``tol`` of zero."""
    m = cfg.negatives_per_positive
    rep = np.repeat(pos, m, axis=0)
    E, R = emb.entities, emb.relations
    dp = E[rep[:, 0]] + R[rep[:, 1]] - E[rep[:, 2]]
    dn = E[neg[:, 0]] + R[neg[:, 1]] - E[neg[:, 2]]
    hinge = cfg.margin + score_triples(emb, rep, cfg.norm) - score_triples(emb, neg, cfg.norm)
    if (np.abs(hinge) < tol).any():
        return True
    return cfg.norm == "L1" and (np.abs(np.concatenate([dp, dn])) < tol).any()


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("norm,tol", [("L2", 1e-4), ("L1", 1e-3)])
def test_gradient_matches_finite_differences(norm, tol):
    rng = np.random.default_rng(0 if norm == "L2" else 1)
    cfg = TrainConfig(dim=6, margin=2.0, norm=norm, negatives_per_positive=2)
    checked = 0
    while checked < 5:
        emb, pos, neg = random_batch(rng)
        if near_kink(emb, pos, neg, cfg):
            continue
        loss, grads = loss_and_gradients(emb, pos, neg, cfg)
        assert loss == pytest.approx(
            reference_loss(emb.entities, emb.relations, pos, neg, cfg.margin, norm, 2), rel=1e-12)
        ge, gr = dense(grads, emb)
        fe, fr = finite_difference(emb, pos, neg, cfg)
        assert relative_error(np.concatenate([ge.ravel(), gr.ravel()]),
                              np.concatenate([fe.ravel(), fr.ravel()])) < tol
        checked += 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["L1", "L2"]), st.floats(0, 3))
def test_hinge_and_sparsity(seed, norm, margin):
    rng = np.random.default_rng(seed)
    emb, pos, neg = random_batch(rng, E=30)
    cfg = TrainConfig(margin=margin, norm=norm, negatives_per_positive=2)
    loss, grads = loss_and_gradients(emb, pos, neg, cfg)
    assert loss == pytest.approx(reference_loss(emb.entities, emb.relations, pos, neg, margin, norm, 2))
    touched = set(pos[:, [0, 2]].ravel().tolist()) | set(neg[:, [0, 2]].ravel().tolist())
    assert set(grads.entity_rows.tolist()) <= touched
    assert set(grads.relation_rows.tolist()) <= set(pos[:, 1].tolist())


# -- negative sampling -----------------------------------------------------------

def test_forced_exhaustion():
    types = {"A": "drug", "B": "drug", "X": "disease", "Y": "disease"}
    full = make_kg([(d, "treats", s) for d in "AB" for s in "XY"], types)
    cfg = TrainConfig(max_resample=100)
    with pytest.raises(SamplingExhaustedError, match="A"):
        sample_negatives(full, full.triples[:1], cfg, np.random.default_rng(0))
    # with (B, treats, X) absent the head corruption B is the single drug option
    partial = make_kg([("A", "treats", "X"), ("A", "treats", "Y"), ("B", "treats", "Y")], types)
    neg = sample_negatives(partial, partial.triples[:1], cfg, np.random.default_rng(0))
    assert partial.label_triples(neg.triples) == [("B", "treats", "X")]


def test_replacement_uniformity():
    drugs = [f"d{i}" for i in range(11)]
    types = {**dict.fromkeys(drugs, "drug"), "X": "disease", "Y": "disease"}
    kg = make_kg([("d0", "treats", "X")], types)
    cfg = TrainConfig(negatives_per_positive=50)
    rng = np.random.default_rng(4)
    counts = np.zeros(kg.num_entities, dtype=int)
    total = 0
    while total < 1000:
        neg = sample_negatives(kg, kg.triples, cfg, rng)
        heads = neg.triples[neg.replaced_head, 0][: 1000 - total]
        np.add.at(counts, heads, 1)
        total += len(heads)
    freq = counts[[kg.entity_id[d] for d in drugs[1:]]]
    assert counts[kg.entity_id["d0"]] == 0
    assert freq.sum() == 1000
    assert (np.abs(freq - 100) <= 40).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_negatives_are_typed_and_unseen(seed, m):
    kg = random_kg(
        {"drug": 8, "disease": 6, "gene": 5},
        [("treats", "drug", "disease", 20), ("targets", "drug", "gene", 15)],
        seed=seed,
    )
    cfg = TrainConfig(negatives_per_positive=m)
    neg = sample_negatives(kg, kg.triples, cfg, np.random.default_rng(seed))
    assert len(neg.triples) == m * kg.num_triples
    assert not kg.index.contains(neg.triples).any()
    pos = np.repeat(kg.triples, m, axis=0)
    types = np.array(kg.entity_types)
    assert (types[neg.triples[:, 0]] == types[pos[:, 0]]).all()
    assert (types[neg.triples[:, 2]] == types[pos[:, 2]]).all()
    assert (neg.triples[:, 1] == pos[:, 1]).all()
    changed_head = neg.triples[:, 0] != pos[:, 0]
    np.testing.assert_array_equal(changed_head, neg.replaced_head)
    assert (neg.triples[changed_head, 2] == pos[changed_head, 2]).all()


def test_singleton_type_rejected():
    kg = make_kg([("A", "treats", "X")], {"A": "drug", "X": "disease"})
    with pytest.raises(ContractError):
        sample_negatives(kg, kg.triples, TrainConfig(), np.random.default_rng(0))


# -- optimizers ------------------------------------------------------------------

def test_adam_first_step_and_untouched_rows():
    emb = EmbeddingTable(np.zeros((3, 2)), np.zeros((1, 2)))
    grads = Gradients(np.array([1]), np.array([[0.5, -2.0]]), np.zeros(0, dtype=int), np.zeros((0, 2)))
    opt = Adam(0.1, [emb.entities.shape, emb.relations.shape])
    opt.step(emb, grads)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(emb.entities[1], [-0.1, 0.1], rtol=1e-6)
    assert not emb.entities[[0, 2]].any() and not emb.relations.any()
    opt.step(emb, Gradients(np.array([0]), np.array([[1.0, 1.0]]), np.zeros(0, dtype=int), np.zeros((0, 2))))
    np.testing.assert_allclose(emb.entities[1], [-0.1, 0.1], rtol=1e-6)


def test_sgd_step():
    emb = EmbeddingTable(np.ones((2, 2)), np.ones((1, 2)))
    SGD(0.5).step(emb, Gradients(np.array([0]), np.array([[2.0, 4.0]]), np.array([0]), np.array([[1.0, 1.0]])))
    np.testing.assert_allclose(emb.entities, [[0.0, -1.0], [1.0, 1.0]])
    np.testing.assert_allclose(emb.relations, [[0.5, 0.5]])


# -- training ---------------------------------------------------------------------

@pytest.fixture
def pair_kg():
    return make_kg([("A", "r", "B")], {"A": "thing", "B": "thing"})


def test_training_reduces_positive_distance(pair_kg):
    cfg = TrainConfig(dim=8, margin=0.5, optimizer="sgd", learning_rate=0.1, epochs=200, seed=3)
    before = score(init_embeddings(pair_kg, cfg), (0, 0, 1))
    after = score(train(pair_kg.triples, pair_kg, cfg), (0, 0, 1))
    assert after < before


def test_training_deterministic(toy_kg):
    cfg = TrainConfig(dim=8, epochs=20, batch_size=4, learning_rate=1e-2, seed=11)
    a, b = train(toy_kg.triples, toy_kg, cfg), train(toy_kg.triples, toy_kg, cfg)
    assert a.entities.tobytes() == b.entities.tobytes()
    assert a.relations.tobytes() == b.relations.tobytes()


def test_entities_unit_norm_after_every_epoch(toy_kg):
    norms = []
    cfg = TrainConfig(dim=8, epochs=15, batch_size=3, learning_rate=0.05, seed=2)
    train(toy_kg.triples, toy_kg, cfg,
          callback=lambda e, loss, emb: norms.append(np.linalg.norm(emb.entities, axis=1)))
    assert len(norms) == 15
    for n in norms:
        np.testing.assert_allclose(n, 1.0)


def test_callback_receives_epoch_and_loss(toy_kg):
    seen = []
    train(toy_kg.triples, toy_kg, TrainConfig(dim=4, epochs=5, seed=0),
          callback=lambda e, loss, emb: seen.append((e, loss)))
    assert [e for e, _ in seen] == list(range(5))
    assert all(loss >= 0 for _, loss in seen)


def test_divergence(pair_kg):
    cfg = TrainConfig(dim=4, optimizer="sgd", learning_rate=1e308, normalize_entities=False,
                      margin=1.0, epochs=50, seed=0)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as exc:
        train(pair_kg.triples, pair_kg, cfg)
    assert exc.value.learning_rate == 1e308


def test_empty_training_set(toy_kg):
    with pytest.raises(ConfigError):
        train(np.zeros((0, 3), dtype=int), toy_kg, TrainConfig())


def test_early_stopping(toy_kg):
    values = iter([0.1, 0.5, 0.4, 0.3, 0.2, 0.9])
    stopper = EarlyStopping(lambda emb: next(values), patience=3)
    seen = []

    def cb(epoch, loss, emb):
        seen.append(epoch)
        return stopper(epoch, loss, emb)

    train(toy_kg.triples, toy_kg, TrainConfig(dim=4, epochs=50, seed=0), callback=cb)
    assert seen == [0, 1, 2, 3, 4]
    assert stopper.best_epoch == 1 and stopper.best_value == 0.5


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, toy_kg):
    cfg = TrainConfig(dim=5, norm="L1", seed=9)
    emb = init_embeddings(toy_kg, cfg)
    path = tmp_path / "m.bin"
    save_checkpoint(path, emb, cfg, epoch=3, losses=[1.0, 0.5])
    raw = path.read_bytes()
    magic, version, E, R, K, flag = struct.unpack_from("<4sHIIIB", raw)
    assert (magic, version, E, R, K, flag) == (b"TRNE", 1, toy_kg.num_entities, toy_kg.num_relations, 5, 0)
    assert len(raw) == struct.calcsize("<4sHIIIB") + 4 * (E + R) * K
    back, meta = load_checkpoint(path)
    np.testing.assert_array_equal(back.entities, emb.entities.astype(np.float32))
    np.testing.assert_array_equal(back.relations, emb.relations.astype(np.float32))
    assert meta["norm"] == "L1" and meta["epoch"] == 3 and meta["losses"] == [1.0, 0.5]
    assert json.loads((tmp_path / "m.bin.json").read_text())["config"]["dim"] == 5


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        load_checkpoint(path)
