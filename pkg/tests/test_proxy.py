import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustscore.attacks import AttackConfig
from robustscore.errors import DataError, EmptyDataset, LengthMismatch, SingleClassTrainingSet
from robustscore.models import ConstantModel
from robustscore.texture import feature_vector
from robustscore.proxy import (
    EvalMetrics,
    LogRegModel,
    evaluate,
    evaluate_under_attack,
    load_logreg,
    predict_logreg,
    proxy_predictions,
    save_logreg,
    train_logreg,
)


def separable_toy(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.column_stack([y + rng.normal(0, 0.1, n), rng.normal(0, 1, n)])
    return x, y


def zero_model(d=2):
    return LogRegModel(np.zeros(d), 0.0, np.zeros(d), np.ones(d))


class TestTraining:
    def test_zero_epochs(self):
        x, y = separable_toy()
        m = train_logreg(x, y, epochs=0)
        assert not m.weights.any() and m.bias == 0.0
        assert all(predict_logreg(m, row)[0] == 0.5 for row in x)

    def test_separable_toy(self):
        x, y = separable_toy()
        m = train_logreg(x, y, lr=0.1, epochs=500)
        preds = [predict_logreg(m, row)[1] for row in x]
        assert evaluate(preds, y).accuracy == 1.0

    def test_loss_non_increasing(self):
        x, y = separable_toy(seed=3)
        x[:, 1] *= 50  # standardization must absorb the scale
        losses = []
        train_logreg(x, y, lr=0.1, epochs=200, on_epoch=lambda e, loss: losses.append(loss))
        assert all(b <= a + 1e-10 for a, b in zip(losses, losses[1:]))

    def test_standardization(self):
        rng = np.random.default_rng(4)
        x = rng.normal(5, 3, size=(40, 4))
        x[:, 2] = 7.0
        m = train_logreg(x, np.arange(40) % 2, epochs=1)
        z = m.standardize(x)
        live = [0, 1, 3]
        assert np.all(np.abs(z[:, live].mean(axis=0)) < 1e-9)
        np.testing.assert_allclose(z[:, live].std(axis=0), 1.0, atol=1e-9)
        assert m.feature_stds[2] == 1.0
        assert np.all(m.feature_stds > 0)

    def test_seed_does_not_matter(self):
        x, y = separable_toy()
        assert save_logreg(train_logreg(x, y, seed=1)) == save_logreg(train_logreg(x, y, seed=2))

    def test_errors(self):
        x, y = separable_toy()
        with pytest.raises(EmptyDataset):
            train_logreg(np.zeros((0, 2)), [])
        with pytest.raises(LengthMismatch):
            train_logreg(x, y[:-1])
        with pytest.raises(SingleClassTrainingSet):
            train_logreg(x, np.ones(len(y)))
        with pytest.raises(DataError):
            train_logreg(x, y * 2)


class TestPredict:
    def test_zero_model_ties_to_robust(self):
        assert predict_logreg(zero_model(), [1.0, -2.0]) == (0.5, 1)

    def test_log_three(self):
        m = LogRegModel(np.array([1.0, 0.0]), 0.0, np.zeros(2), np.ones(2))
        p, c = predict_logreg(m, [math.log(3), 9.0])
        assert p == pytest.approx(0.75, abs=1e-15)
        assert c == 1

    @settings(max_examples=50)
    @given(st.integers(0, 2**31))
    def test_negation_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        w, b, f = rng.normal(size=3), float(rng.normal()), rng.normal(size=3)
        m = LogRegModel(w, b, np.zeros(3), np.ones(3))
        neg = LogRegModel(-w, -b, np.zeros(3), np.ones(3))
        assert predict_logreg(neg, f)[0] == pytest.approx(1 - predict_logreg(m, f)[0], abs=1e-15)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_positive_scaling_keeps_classes(self, seed, c):
        rng = np.random.default_rng(seed)
        w, b = rng.normal(size=4), float(rng.normal())
        feats = rng.normal(size=(20, 4))
        m = LogRegModel(w, b, np.zeros(4), np.ones(4))
        scaled = LogRegModel(c * w, c * b, np.zeros(4), np.ones(4))
        for f in feats:
            if abs(m.decision(f)) > 1e-12:
                assert predict_logreg(m, f)[1] == predict_logreg(scaled, f)[1]


class TestEvaluate:
    def test_perfect(self):
        r = evaluate([1, 0, 1, 0], [1, 0, 1, 0])
        assert (r.accuracy, r.precision, r.recall) == (1.0, 1.0, 1.0)

    def test_hand_counts(self):
        preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        truth = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
        r = evaluate(preds, truth)
        assert (r.tp, r.fp, r.fn, r.tn) == (3, 1, 2, 4)
        assert r.accuracy == pytest.approx(0.7)
        assert r.precision == pytest.approx(0.75)
        assert r.recall == pytest.approx(0.6)

    def test_all_positive_on_balanced(self):
        r = evaluate([1] * 6, [1, 0] * 3)
        assert (r.recall, r.precision, r.accuracy) == (1.0, 0.5, 0.5)

    def test_zero_over_zero(self):
        r = evaluate([0, 0], [0, 0])
        assert r.precision == 0.0 and r.recall == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate([1, 0], [1])

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40), st.randoms())
    def test_permutation_invariant(self, pairs, random):
        shuffled = list(pairs)
        random.shuffle(shuffled)
        a = evaluate(*zip(*pairs))
        b = evaluate(*zip(*shuffled))
        assert a == b
        assert a.accuracy == (a.tp + a.tn) / len(pairs)


@pytest.fixture(scope="module")
def setup(benchmark):
    images = benchmark["test"].images()[:16]
    labels = [k % 2 for k in range(16)]
    proxy = train_logreg(np.array([feature_vector(x) for x in images]), labels, epochs=50)
    return images, labels, proxy, benchmark["model"]


class TestUnderAttack:
    def test_zero_epsilon_matches_clean(self, setup):
        images, labels, proxy, victim = setup
        clean = evaluate(proxy_predictions(proxy, images), labels)
        assert evaluate_under_attack(proxy, images, labels, AttackConfig(epsilon=0.0), victim) == clean

    def test_constant_victim_matches_clean(self, setup):
        images, labels, proxy, _ = setup
        clean = evaluate(proxy_predictions(proxy, images), labels)
        attacked = evaluate_under_attack(proxy, images, labels, AttackConfig(epsilon=0.05), ConstantModel([0.0, 1.0, 0.0]))
        assert attacked == clean

    def test_pixel_proxy_path(self, setup):
        images, labels, _, victim = setup
        preds = proxy_predictions(ConstantModel([0.0, 1.0]), images)
        assert preds == [1] * len(images)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        x, y = separable_toy()
        m = train_logreg(x, y)
        blob = save_logreg(m, tmp_path / "p.pdlr")
        assert blob[:5] == b"PDLR1"
        assert len(blob) == 5 + 8 * (3 * 2 + 1)
        again = load_logreg(tmp_path / "p.pdlr")
        assert save_logreg(again) == blob

    @pytest.mark.parametrize("blob", [b"PDLR2" + bytes(56), b"PDLR1" + bytes(7), b"PDLR1" + bytes(16)])
    def test_corrupt(self, blob):
        with pytest.raises(DataError):
            load_logreg(blob)

    def test_metrics_dict(self):
        assert EvalMetrics(1.0, 1.0, 1.0, 1, 0, 0, 1).to_dict()["tp"] == 1
