import math

import numpy as np
import pytest

from amortix.errors import DimensionError, FormatError, NonFiniteGradientError
from amortix.nn import (MLP, AdamState, cross_entropy_loss, finite_diff_check,
                        load_checkpoint, model_grads_for_loss, read_sidecar,
                        save_checkpoint, softmax)
from amortix.rng import RngStream


def test_zero_weight_softmax_is_uniform():
    model = MLP([2, 3], "softmax")
    out = model.forward(np.array([[5.0, -3.0]]))
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_zero_weight_sigmoid_is_half():
    model = MLP([4, 4], "sigmoid")
    out = model.forward(np.zeros((2, 4)))
    assert np.allclose(out, 0.5, atol=1e-15)


def test_single_layer_affine_definition():
    model = MLP([1, 1], "linear")
    model.W[0][0, 0] = 1.75
    model.b[0][0] = -0.25
    out = model.forward(np.array([[2.0]]))
    assert out[0, 0] == pytest.approx(2.0 * 1.75 - 0.25, abs=1e-15)


def _manual_forward(model, x):
    """Straight-line matrix arithmetic oracle: explicit loops, no numpy dot."""
    h = list(x)
    for layer, (W, b) in enumerate(zip(model.W, model.b)):
        nxt = []
        for j in range(W.shape[1]):
            acc = b[j]
            for i in range(W.shape[0]):
                acc += h[i] * W[i, j]
            nxt.append(acc)
        if layer != len(model.W) - 1:
            nxt = [v if v > 0 else 0.0 for v in nxt]
        h = nxt
    mx = max(h)
    exps = [math.exp(v - mx) for v in h]
    tot = sum(exps)
    return [e / tot for e in exps]


def test_forward_matches_handrolled_matrix_oracle():
    model = MLP.init([4, 8, 2], "softmax", RngStream(5, "oracle-net"))
    x = RngStream(6, "oracle-x").normal(4)
    got = model.forward(x)
    want = _manual_forward(model, x)
    assert np.allclose(got, want, atol=1e-12)


def test_softmax_rows_sum_to_one():
    model = MLP.init([3, 7, 5], "softmax", RngStream(1, "rows"))
    out = model.forward(RngStream(2, "rows-x").normal(11, 3))
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert out.shape == (11, 5)


def test_sigmoid_outputs_strictly_inside_unit_interval():
    model = MLP.init([3, 6, 4], "sigmoid", RngStream(3, "sig"))
    out = model.forward(RngStream(4, "sig-x").normal(9, 3))
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_shape_mismatch_raises_dimension_error():
    model = MLP([3, 2], "softmax")
    with pytest.raises(DimensionError):
        model.forward(np.zeros((4, 5)))


def test_softmax_permutation_equivariance():
    logits = RngStream(9, "perm").normal(6, 5)
    perm = RngStream(10, "perm-p").permutation(5)
    assert np.allclose(softmax(logits)[:, perm], softmax(logits[:, perm]),
                       atol=1e-15)


class TestCrossEntropy:
    def test_certain_correct_prediction_has_zero_loss(self):
        loss, _, clamped = cross_entropy_loss(np.array([[1.0, 0.0]]), [0])
        assert loss == 0.0 and not clamped

    def test_uniform_binary_is_ln2(self):
        loss, _, _ = cross_entropy_loss(np.array([[0.5, 0.5]]), [1])
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_batch_matches_per_term_oracle(self):
        probs = np.array([[0.7, 0.2, 0.1],
                          [0.05, 0.9, 0.05],
                          [0.3, 0.3, 0.4]])
        labels = [0, 2, 1]
        want = -(math.log(0.7) + math.log(0.05) + math.log(0.3)) / 3
        loss, dlogits, _ = cross_entropy_loss(probs, labels)
        assert loss == pytest.approx(want, rel=1e-12)
        onehot = np.zeros_like(probs)
        onehot[np.arange(3), labels] = 1
        assert np.allclose(dlogits, (probs - onehot) / 3, atol=1e-15)

    def test_zero_probability_clamps_instead_of_nan(self):
        loss, _, clamped = cross_entropy_loss(np.array([[0.0, 1.0]]), [0])
        assert clamped and np.isfinite(loss)
        assert loss == pytest.approx(-math.log(1e-12))

    def test_bad_label_rejected(self):
        with pytest.raises(DimensionError):
            cross_entropy_loss(np.array([[0.5, 0.5]]), [2])


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = np.array([1.0, -2.0])
        adam = AdamState(lr=0.1)
        adam.step([("w", p)], [np.zeros(2)])
        assert np.array_equal(p, [1.0, -2.0])

    def test_first_step_closed_form(self):
        # bias-corrected ratio is 1 on the first step, so the move is ~lr
        p = np.array([0.0])
        adam = AdamState(lr=0.1)
        adam.step([("w", p)], [np.array([1.0])])
        assert p[0] == pytest.approx(-0.1, abs=1e-6)

    def test_hundred_steps_on_quadratic_match_reference_rule(self):
        # independent reference implementation of the update rule
        w_ref, m, v = 1.0, 0.0, 0.0
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        for t in range(1, 101):
            g = 2.0 * w_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w_ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)

        p = np.array([1.0])
        adam = AdamState(lr=lr)
        for _ in range(100):
            adam.step([("w", p)], [2.0 * p.copy()])
        assert p[0] == pytest.approx(w_ref, abs=1e-9)
        assert abs(p[0]) < 0.5

    def test_nonfinite_gradient_rejected_with_path(self):
        p = np.array([1.0])
        adam = AdamState(lr=0.1)
        with pytest.raises(NonFiniteGradientError, match="layer0.b"):
            adam.step([("layer0.W", p), ("layer0.b", p.copy())],
                      [np.array([1.0]), np.array([np.nan])])
        assert p[0] == 1.0   # the step was not applied


class TestFiniteDiff:
    def test_trained_mlp_under_1e4(self):
        model = MLP.init([5, 12, 8, 3], "softmax", RngStream(11, "fd"))
        X = RngStream(12, "fd-x").normal(16, 5)
        y = RngStream(13, "fd-y").integers(0, 3, size=16)
        err = finite_diff_check(model, lambda m, x: model_grads_for_loss(m, x, y),
                                X, eps=1e-5)
        assert err <= 1e-4

    def test_linear_model_is_essentially_exact(self):
        model = MLP.init([3, 2], "softmax", RngStream(14, "fd-lin"))
        X = RngStream(15, "fd-lin-x").normal(8, 3)
        y = np.zeros(8, dtype=np.int64)
        err = finite_diff_check(model, lambda m, x: model_grads_for_loss(m, x, y),
                                X, eps=1e-5)
        assert err <= 1e-8

    def test_corrupted_gradient_detected(self):
        model = MLP.init([3, 4, 2], "softmax", RngStream(16, "fd-bad"))
        X = RngStream(17, "fd-bad-x").normal(6, 3)
        y = np.zeros(6, dtype=np.int64)

        def corrupted(m, x):
            loss, grads = model_grads_for_loss(m, x, y)
            grads[0][0][0, 0] += 1.0
            return loss, grads

        assert finite_diff_check(model, corrupted, X, eps=1e-5) >= 0.5

    def test_eps_contract(self):
        model = MLP([2, 2], "softmax")
        with pytest.raises(ValueError):
            finite_diff_check(model, lambda m, x: (0.0, []), np.zeros((1, 2)),
                              eps=1e-2)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = MLP.init([4, 6, 3], "softmax", RngStream(20, "ckpt"))
        path = tmp_path / "model.amx"
        save_checkpoint(model, path, config_hash="abc123", seed=9)
        back = load_checkpoint(path)
        assert back.widths == model.widths and back.head == model.head
        for W1, W2 in zip(model.W, back.W):
            assert np.array_equal(W1, W2)
        for b1, b2 in zip(model.b, back.b):
            assert np.array_equal(b1, b2)
        side = read_sidecar(path)
        assert side == {"config_hash": "abc123", "seed": "9"}

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.amx"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        model = MLP.init([4, 6, 3], "softmax", RngStream(21, "trunc"))
        path = tmp_path / "model.amx"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)
