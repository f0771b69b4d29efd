import pickle
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustscore.errors import (
    ChildError,
    DataError,
    DimensionMismatch,
    EmptyDataset,
    LabelOutOfRange,
    ProcessSpawnFailure,
    ProtocolViolation,
)
from robustscore.imageio import Image
from robustscore.models import (
    ConstantModel,
    Mlp,
    SubprocessModel,
    TrainConfig,
    cross_entropy,
    finite_diff_gradient,
    init_mlp,
    input_gradient,
    load_mlp,
    predict,
    save_mlp,
    subprocess_model,
    train_mlp,
)

from conftest import random_image


def linear(w, b=None):
    w = np.asarray(w, dtype=float)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=float)
    return Mlp((w.shape[1], w.shape[0]), (w,), (b,))


def relative_error(g, f):
    return float(np.max(np.abs(g - f) / np.maximum(np.abs(g), 1e-8)))


def toy_dataset(n=40, seed=0):
    """Two linearly separable classes of 2x2 images."""
    rng = np.random.default_rng(seed)
    data = []
    for k in range(n):
        y = k % 2
        base = 0.25 if y == 0 else 0.75
        data.append((Image(np.clip(base + rng.normal(0, 0.05, (2, 2, 1)), 0, 1)), y))
    return data


class TestPredict:
    def test_hand_matrix_product(self):
        m = linear([[1, 0], [0, 1]])
        p = predict(m, Image(np.array([[0.8, 0.2]])))
        assert p.logits.tolist() == [0.8, 0.2]
        assert p.predicted_class == 0

    def test_tie_goes_to_lowest_index(self):
        p = predict(ConstantModel([1.0, 3.0, 3.0]), Image(np.zeros((1, 1))))
        assert p.predicted_class == 1

    def test_deterministic(self, small_mlp, rng):
        img = random_image(rng)
        assert np.array_equal(predict(small_mlp, img).logits, predict(small_mlp, img).logits)

    def test_dimension_mismatch(self, small_mlp):
        with pytest.raises(DimensionMismatch):
            predict(small_mlp, Image(np.zeros((2, 2))))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
    def test_shift_invariance(self, logits, shift):
        z = np.array(logits)
        base = predict(ConstantModel(z), Image(np.zeros((1, 1)))).predicted_class
        # exact ties can split under rounding, so only assert when the top is unique
        if np.sum(z == z.max()) == 1 and np.sort(z)[-1] - np.sort(z)[-2] > 1e-9 * (1 + abs(shift)):
            assert predict(ConstantModel(z + shift), Image(np.zeros((1, 1)))).predicted_class == base


class TestGradient:
    def test_zero_weights_give_zero_gradient(self):
        m = linear(np.zeros((3, 4)))
        g = input_gradient(m, Image(np.full((2, 2), 0.3)), 1)
        assert np.array_equal(g, np.zeros((2, 2, 1)))

    def test_linear_closed_form(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0]])
        b = np.array([0.1, -0.2])
        x = np.array([0.4, 0.7])
        z = w @ x + b
        p = np.exp(z) / np.exp(z).sum()
        expected = w.T @ (p - np.array([0.0, 1.0]))
        g = input_gradient(linear(w, b), Image(x.reshape(1, 2)), 1)
        np.testing.assert_allclose(g.ravel(), expected, rtol=0, atol=1e-15)

    def test_label_out_of_range(self, small_mlp, rng):
        with pytest.raises(LabelOutOfRange):
            input_gradient(small_mlp, random_image(rng), 4)

    def test_matches_finite_differences(self, rng):
        worst = 0.0
        for k in range(20):
            dims = (16, int(rng.integers(4, 12)), int(rng.integers(2, 5)))
            model = init_mlp(dims, seed=int(rng.integers(2**31)))
            img = random_image(rng, 4, 4)
            label = int(rng.integers(dims[-1]))
            worst = max(worst, relative_error(input_gradient(model, img, label), finite_diff_gradient(model, img, label, 1e-3)))
        assert worst < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 5))
    def test_smooth_model_matches_finite_differences(self, seed, classes):
        rng = np.random.default_rng(seed)
        model = init_mlp((9, classes), seed)
        img = random_image(rng, 3, 3)
        label = int(rng.integers(classes))
        g = input_gradient(model, img, label)
        f = finite_diff_gradient(model, img, label, 1e-3)
        np.testing.assert_allclose(g, f, rtol=1e-4, atol=1e-9)

    def test_finite_diff_constant_model(self):
        f = finite_diff_gradient(ConstantModel([0.0, 1.0]), Image(np.full((2, 2), 0.5)), 0)
        assert np.array_equal(f, np.zeros((2, 2, 1)))

    def test_finite_diff_may_step_outside_unit_range(self):
        m = linear([[1.0], [-1.0]])
        f = finite_diff_gradient(m, Image(np.ones((1, 1))), 0, h=1e-3)
        assert np.isfinite(f).all()

    def test_finite_diff_second_order(self, rng):
        model = init_mlp((9, 3), 5)
        img = random_image(rng, 3, 3, lo=0.2, hi=0.8)
        g = input_gradient(model, img, 2)
        e1 = np.max(np.abs(finite_diff_gradient(model, img, 2, 1e-3) - g))
        e2 = np.max(np.abs(finite_diff_gradient(model, img, 2, 5e-4) - g))
        change = np.max(np.abs(finite_diff_gradient(model, img, 2, 1e-3) - finite_diff_gradient(model, img, 2, 5e-4)))
        assert change < 1e-6
        assert e2 <= e1 + 1e-12

    def test_cross_entropy_stable(self):
        assert cross_entropy(np.array([1000.0, 0.0]), 0) == pytest.approx(0.0)
        assert cross_entropy(np.array([0.0, 0.0]), 1) == pytest.approx(np.log(2))


class TestTraining:
    def test_zero_epochs_returns_initialization(self):
        data = toy_dataset()
        trained = train_mlp(data, (4, 3, 2), TrainConfig(epochs=0, seed=11))
        assert save_mlp(trained) == save_mlp(init_mlp((4, 3, 2), 11))

    def test_initialization_range(self):
        m = init_mlp((30, 20, 5), 0)
        for w, b in zip(m.weights, m.biases):
            limit = np.sqrt(6 / (w.shape[0] + w.shape[1]))
            assert np.all(np.abs(w) <= limit)
            assert not b.any()

    def test_bit_identical_reruns(self):
        data = toy_dataset()
        cfg = TrainConfig(learning_rate=0.1, epochs=5, batch_size=8, seed=3)
        assert save_mlp(train_mlp(data, (4, 5, 2), cfg)) == save_mlp(train_mlp(data, (4, 5, 2), cfg))

    def test_full_batch_loss_non_increasing(self):
        data = toy_dataset()
        losses = []
        cfg = TrainConfig(learning_rate=0.05, epochs=60, batch_size=len(data), seed=0)
        train_mlp(data, (4, 2), cfg, on_epoch=lambda e, loss: losses.append(loss))
        assert len(losses) == 60
        assert all(b <= a + 1e-10 for a, b in zip(losses, losses[1:]))

    def test_learns_toy(self):
        data = toy_dataset()
        m = train_mlp(data, (4, 8, 2), TrainConfig(learning_rate=0.5, epochs=50, batch_size=8))
        assert all(predict(m, x).predicted_class == y for x, y in data)

    def test_errors(self):
        with pytest.raises(EmptyDataset):
            train_mlp([], (4, 2), TrainConfig())
        with pytest.raises(DimensionMismatch):
            train_mlp(toy_dataset(), (5, 2), TrainConfig())
        with pytest.raises(LabelOutOfRange):
            train_mlp([(Image(np.zeros((2, 2))), 2)], (4, 2), TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)

    def test_held_out_accuracy_on_benchmark(self, benchmark):
        test = benchmark["test"].labelled()
        acc = np.mean([predict(benchmark["model"], x).predicted_class == y for x, y in test])
        assert acc >= 0.90


class TestSerialization:
    def test_round_trip(self, small_mlp, tmp_path):
        blob = save_mlp(small_mlp, tmp_path / "m.pdmlp")
        again = load_mlp(tmp_path / "m.pdmlp")
        assert save_mlp(again) == blob
        assert again.layer_dims == small_mlp.layer_dims

    def test_layout(self):
        m = linear([[1.0, 2.0]], [3.0])
        blob = save_mlp(m)
        assert blob[:6] == b"PDMLP1"
        assert np.frombuffer(blob[6:10], "<u4")[0] == 2
        assert np.frombuffer(blob[10:18], "<u4").tolist() == [2, 1]
        assert np.frombuffer(blob[18:], "<f8").tolist() == [1.0, 2.0, 3.0]

    @pytest.mark.parametrize("blob", [b"", b"PDMLP2", b"PDMLP1\x02\x00\x00\x00\x02\x00\x00\x00\x01\x00\x00\x00"])
    def test_corrupt(self, blob):
        with pytest.raises(DataError):
            load_mlp(blob)


CHILD_ECHO_ZERO = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    n = len(req["pixels"])
    if req["op"] == "predict":
        out = {"id": req["id"], "logits": [0.0, 0.0, 0.0]}
    else:
        out = {"id": req["id"], "grad": [0.0] * n}
    print(json.dumps(out), flush=True)
"""

CHILD_BAD_LENGTH = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"], "grad": [0.0]}), flush=True)
"""

CHILD_WRONG_ID = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"] + 7, "logits": [0.0, 1.0]}), flush=True)
"""

CHILD_GARBAGE = """
import sys
for line in sys.stdin:
    print("not json", flush=True)
"""

CHILD_ERROR = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    print(json.dumps({"id": req["id"], "error": "boom"}), flush=True)
"""


def child(tmp_path, source):
    path = tmp_path / "child.py"
    path.write_text(textwrap.dedent(source))
    return f"{sys.executable} {path}"


class TestSubprocess:
    def test_echo_zero_child(self, tmp_path, rng):
        with subprocess_model(child(tmp_path, CHILD_ECHO_ZERO)) as m:
            for _ in range(3):
                assert predict(m, random_image(rng)).predicted_class == 0
            assert m.num_classes == 3

    def test_loopback_matches_in_process(self, small_mlp, tmp_path, rng):
        save_mlp(small_mlp, tmp_path / "m.pdmlp")
        with SubprocessModel(f"{sys.executable} -m robustscore.serve {tmp_path / 'm.pdmlp'}") as m:
            for _ in range(5):
                img = random_image(rng)
                assert np.array_equal(m.logits(img), small_mlp.logits(img))
                assert np.array_equal(m.input_gradient(img, 2), small_mlp.input_gradient(img, 2))

    def test_wrong_length(self, tmp_path, rng):
        with subprocess_model(child(tmp_path, CHILD_BAD_LENGTH)) as m:
            with pytest.raises(ProtocolViolation):
                m.input_gradient(random_image(rng), 0)

    def test_wrong_logits_length_after_first(self, tmp_path, rng):
        source = CHILD_ECHO_ZERO.replace('[0.0, 0.0, 0.0]', '[0.0] * (2 + req["id"] % 2)')
        with subprocess_model(child(tmp_path, source)) as m:
            m.logits(random_image(rng))
            with pytest.raises(ProtocolViolation):
                m.logits(random_image(rng))

    def test_id_mismatch(self, tmp_path, rng):
        with subprocess_model(child(tmp_path, CHILD_WRONG_ID)) as m:
            with pytest.raises(ProtocolViolation):
                m.logits(random_image(rng))

    def test_malformed_line(self, tmp_path, rng):
        with subprocess_model(child(tmp_path, CHILD_GARBAGE)) as m:
            with pytest.raises(ProtocolViolation):
                m.logits(random_image(rng))

    def test_child_error(self, tmp_path, rng):
        with subprocess_model(child(tmp_path, CHILD_ERROR)) as m:
            with pytest.raises(ChildError, match="boom"):
                m.logits(random_image(rng))

    def test_spawn_failure(self, rng):
        with pytest.raises(ProcessSpawnFailure):
            subprocess_model("/nonexistent/binary-xyz").logits(random_image(rng))

    def test_pickles_as_command(self, tmp_path, rng):
        m = subprocess_model(child(tmp_path, CHILD_ECHO_ZERO))
        m.logits(random_image(rng))
        clone = pickle.loads(pickle.dumps(m))
        assert clone.command == m.command
        assert clone.logits(random_image(rng)).tolist() == [0.0, 0.0, 0.0]
        m.close()
        clone.close()
