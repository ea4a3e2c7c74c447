import math

import numpy as np
import pytest

from kgvl.config import Config
from kgvl.data import make_synthetic
from kgvl.model import Model, collate
from kgvl.task import (
    SGD, ScoreVector, accuracy_metrics, build_vocab, cross_entropy, evaluate, metrics_jsonl,
    predict, score_pair, softmax, train,
)

SMALL = dict(d=16, heads=2, layers=2, d_ff=16, d_app=4, batch_size=4, epochs=1)


@pytest.fixture(scope="module")
def tiny():
    train_set, eval_set, kb = make_synthetic(3, 24, 12, n_concepts=80, d_app=4, rationales=True)
    return train_set, eval_set, kb


def model_for(tiny, **changes):
    train_set, eval_set, kb = tiny
    vocab = build_vocab(train_set + eval_set, kb)
    return Model(Config(**{**SMALL, **changes}), vocab)


def test_softmax_and_argmax():
    np.testing.assert_allclose(ScoreVector(np.zeros(4)).probabilities, [0.25] * 4)
    assert ScoreVector(np.array([0.1, 2.0, -1.0, 0.5])).argmax == 1
    # ties resolve to the lowest index
    assert ScoreVector(np.array([1.0, 3.0, 3.0, 0.0])).argmax == 1
    p = softmax(np.array([[1000.0, 0.0, 0.0, 0.0]]))
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)


def test_argmax_invariant_to_shift():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.normal(size=4)
        c = rng.normal() * 100
        assert ScoreVector(s).argmax == ScoreVector(s + c).argmax
        np.testing.assert_allclose(ScoreVector(s).probabilities, ScoreVector(s + c).probabilities)


def test_zero_head_scores_zero(tiny):
    model = model_for(tiny)
    model.params["head.w"][:] = 0
    _, eval_set, kb = tiny
    assert all(score_pair(eval_set[0], c, model, kb) == 0.0 for c in range(4))


def test_identical_candidates_score_identically(tiny):
    model = model_for(tiny)
    _, eval_set, kb = tiny
    inst = eval_set[0]
    same = type(inst)(inst.id, inst.query, [inst.responses[0]] * 4, inst.regions, 0,
                      inst.mode, inst.image_size)
    scores = predict(same, model, kb).scores
    assert np.ptp(scores) < 1e-12


def test_batched_scores_match_single_pairs(tiny):
    model = model_for(tiny)
    _, eval_set, kb = tiny
    inst = eval_set[1]
    batched = predict(inst, model, kb).scores
    single = [score_pair(inst, c, model, kb) for c in range(4)]
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(3, 4))
    gold = np.array([0, 3, 1])
    loss, d = cross_entropy(s, gold)
    eps = 1e-6
    for i in range(3):
        for j in range(4):
            sp, sm = s.copy(), s.copy()
            sp[i, j] += eps
            sm[i, j] -= eps
            num = (cross_entropy(sp, gold)[0] - cross_entropy(sm, gold)[0]) / (2 * eps)
            assert d[i, j] == pytest.approx(num, abs=1e-8)
    assert cross_entropy(np.zeros((2, 4)), np.array([0, 1]))[0] == pytest.approx(math.log(4))


def test_sgd_update_rule():
    p = {"w": np.array([1.0, -2.0])}
    opt = SGD(p, lr=0.1, momentum=0.9, weight_decay=0.01)
    g = np.array([0.5, 0.5])
    opt.step({"w": g})
    v1 = g + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) - 0.1 * v1)
    w1 = p["w"].copy()
    opt.step({"w": g})
    v2 = 0.9 * v1 + g + 0.01 * w1
    np.testing.assert_allclose(p["w"], w1 - 0.1 * v2)


def test_model_backward_matches_finite_differences(tiny):
    model = model_for(tiny, init_scale=0.3)
    _, eval_set, kb = tiny
    batch = collate([model.encode_pair(eval_set[0], c, kb) for c in range(4)])
    rng = np.random.default_rng(2)
    proj = rng.normal(size=4)
    model.forward(batch)
    grads = model.backward(proj)
    eps, worst = 1e-3, 0.0
    for name in ("tok", "seg", "pos", "img", "app", "head.w", "head.b", "layers.0.wq", "layers.1.w2"):
        arr, g = model.params[name].reshape(-1), grads[name].reshape(-1)
        nonzero = np.flatnonzero(g)
        picks = nonzero if len(nonzero) <= 8 else rng.choice(nonzero, 8, replace=False)
        for idx in picks:
            old = arr[idx]
            arr[idx] = old + eps
            up = model.forward(batch) @ proj
            arr[idx] = old - eps
            down = model.forward(batch) @ proj
            arr[idx] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    assert worst < 1e-4


def test_initial_loss_is_near_ln4(tiny):
    train_set, _, kb = tiny
    model = model_for(tiny)
    qa = [i for i in train_set if i.mode == "QtoA"]
    batch = collate([model.encode_pair(i, c, kb) for i in qa for c in range(4)])
    scores = model.forward(batch).reshape(len(qa), 4)
    loss, _ = cross_entropy(scores, np.array([i.gold for i in qa]))
    assert abs(loss - math.log(4)) < 0.05


def test_single_instance_is_memorized(tiny):
    train_set, _, kb = tiny
    cfg = Config(**{**SMALL, "epochs": 60, "batch_size": 1, "lr": 0.05})
    _, history = train(train_set[:1], cfg, kb)
    assert history[-1]["loss"] < 0.01
    assert history[-1]["acc_QA"] == 1.0


def test_training_is_deterministic(tiny):
    train_set, eval_set, kb = tiny
    cfg = Config(**{**SMALL, "epochs": 2})
    runs = [metrics_jsonl(train(train_set, cfg, kb, eval_set=eval_set)[1]) for _ in range(2)]
    assert runs[0] == runs[1]
    records = runs[0].splitlines()
    assert len(records) == 2 and '"acc_joint"' in records[0]


def test_evaluate_threads_agree(tiny):
    _, eval_set, kb = tiny
    model = model_for(tiny, init_scale=0.3)
    one = evaluate(eval_set, model, kb, threads=1, chunk=5)
    many = evaluate(eval_set, model, kb, threads=3, chunk=5)
    assert one == many
    assert one["n_QA"] == one["n_QAR"] == one["n_joint"] == 12


# --- metric laws -----------------------------------------------------------

def test_joint_accuracy_counts_both_correct():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        a, r = rng.random(n) < rng.random(), rng.random(n) < rng.random()
        records = [(f"x{i}", "QtoA", a[i]) for i in range(n)] + [(f"x{i}", "QAtoR", r[i]) for i in range(n)]
        m = accuracy_metrics(records)
        assert m["acc_joint"] == sum(a & r) / n
        assert m["acc_joint"] <= min(m["acc_QA"], m["acc_QAR_given"])


def test_random_predictors_hit_binomial_expectation():
    rng = np.random.default_rng(6)
    n = 4000
    a = rng.integers(0, 4, n) == rng.integers(0, 4, n)
    r = rng.integers(0, 4, n) == rng.integers(0, 4, n)
    records = [(str(i), "QtoA", a[i]) for i in range(n)] + [(str(i), "QAtoR", r[i]) for i in range(n)]
    m = accuracy_metrics(records)
    assert abs(m["acc_QA"] - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n)
    assert abs(m["acc_joint"] - 0.0625) < 3 * math.sqrt(0.0625 * 0.9375 / n)


def test_unpaired_ids_are_reported():
    m = accuracy_metrics([("a", "QtoA", True), ("b", "QtoA", False), ("b", "QAtoR", True)])
    assert m["unpaired"] == ["a"] and m["n_joint"] == 1 and m["acc_joint"] == 0.0
    empty = accuracy_metrics([])
    assert empty["acc_QA"] is None and empty["acc_joint"] is None
