import numpy as np
import pytest

from conftest import balanced_dataset
from fedsim.core import ParamVector, Rng
from fedsim.errors import IncompatibleShape, InvalidArgument, NumericError
from fedsim.model import (
    LocalTrainSpec,
    ModelSpec,
    OptState,
    client_update,
    evaluate,
    forward_loss_grad,
    init_params,
    local_steps,
    sgd_step,
)

LOGREG = ModelSpec("logreg", n_features=4, n_classes=3)
MLP = ModelSpec("mlp", n_features=4, n_classes=3, hidden=5)


def random_batch(rng: Rng, n: int, spec: ModelSpec):
    x = rng.uniform(n * spec.n_features).reshape(n, spec.n_features)
    y = np.array([rng.randbelow(spec.n_classes) for _ in range(n)], dtype=np.int64)
    return x, y


def finite_difference_grad(spec, params, batch, anchor, prox_mu, h=1e-5):
    """Central differences around every coordinate; the independent oracle."""
    base = params.values
    grad = np.zeros_like(base)
    for i in range(len(base)):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        lp, _ = forward_loss_grad(spec, params.with_values(plus), batch, anchor, prox_mu)
        lm, _ = forward_loss_grad(spec, params.with_values(minus), batch, anchor, prox_mu)
        grad[i] = (lp - lm) / (2 * h)
    return grad


class TestInit:
    def test_zero_scale_gives_zero_vector(self):
        spec = ModelSpec("logreg", 4, 3, init_scale=0.0)
        assert np.all(init_params(spec, Rng(1)).values == 0.0)

    def test_logreg_layout_shapes(self):
        pv = init_params(LOGREG, Rng(2))
        assert [(s.name, s.length) for s in pv.layout] == [("w", 12), ("b", 3)]

    def test_mlp_layout_shapes(self):
        pv = init_params(MLP, Rng(2))
        assert [(s.name, s.length) for s in pv.layout] == [
            ("w1", 20),
            ("b1", 5),
            ("w2", 15),
            ("b2", 3),
        ]

    def test_biases_zero_weights_bounded(self):
        spec = ModelSpec("mlp", 4, 3, hidden=5, init_scale=0.05)
        pv = init_params(spec, Rng(3))
        assert np.all(pv.segment("b1") == 0.0)
        assert np.all(np.abs(pv.segment("w1")) <= 0.05)

    def test_deterministic(self):
        a = init_params(MLP, Rng(4))
        b = init_params(MLP, Rng(4))
        assert a == b


class TestForwardLossGrad:
    def test_zero_params_uniform_softmax(self):
        x, y = random_batch(Rng(5), 16, LOGREG)
        zero = init_params(ModelSpec("logreg", 4, 3, init_scale=0.0), Rng(1))
        loss, grad = forward_loss_grad(LOGREG, zero, (x, y))
        assert loss == pytest.approx(np.log(3), abs=1e-12)
        # with uniform softmax, bias gradient for class c is mean(1/3 - onehot_c)
        onehot = np.zeros((16, 3))
        onehot[np.arange(16), y] = 1.0
        expected_gb = (1.0 / 3.0 - onehot).mean(axis=0)
        assert np.allclose(grad.segment("b"), expected_gb, atol=1e-12)

    def test_prox_zero_at_anchor(self):
        x, y = random_batch(Rng(6), 8, LOGREG)
        params = init_params(LOGREG, Rng(7))
        plain_loss, plain_grad = forward_loss_grad(LOGREG, params, (x, y))
        prox_loss, prox_grad = forward_loss_grad(LOGREG, params, (x, y), anchor=params, prox_mu=0.5)
        assert prox_loss == pytest.approx(plain_loss, abs=1e-15)
        assert np.allclose(prox_grad.values, plain_grad.values, atol=1e-15)

    def test_anchor_required_iff_prox(self):
        x, y = random_batch(Rng(6), 4, LOGREG)
        params = init_params(LOGREG, Rng(7))
        with pytest.raises(InvalidArgument):
            forward_loss_grad(LOGREG, params, (x, y), anchor=None, prox_mu=0.1)
        with pytest.raises(InvalidArgument):
            forward_loss_grad(LOGREG, params, (x, y), anchor=params, prox_mu=0.0)

    def test_gradient_matches_finite_differences(self):
        # 50 random (model, batch, prox) instances vs the central
        # finite-difference oracle at h=1e-5.
        meta = Rng(8)
        for trial in range(50):
            spec = LOGREG if trial % 2 == 0 else MLP
            params = init_params(
                ModelSpec(spec.kind, 4, 3, hidden=spec.hidden, init_scale=0.5),
                Rng(100 + trial),
            )
            batch = random_batch(meta, 2 + meta.randbelow(6), spec)
            if trial % 3 == 0:
                anchor = init_params(
                    ModelSpec(spec.kind, 4, 3, hidden=spec.hidden, init_scale=0.5),
                    Rng(200 + trial),
                )
                prox = 0.2
            else:
                anchor, prox = None, 0.0
            _, grad = forward_loss_grad(spec, params, batch, anchor, prox)
            fd = finite_difference_grad(spec, params, batch, anchor, prox)
            rel = np.linalg.norm(grad.values - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel <= 1e-5, f"trial {trial}: rel err {rel}"

    def test_softmax_probabilities_normalized(self):
        from fedsim.model import _logits, _softmax

        x, _ = random_batch(Rng(9), 32, MLP)
        params = init_params(MLP, Rng(10))
        probs = _softmax(_logits(MLP, params.values, x))
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-9)

    def test_numeric_error_names_segment(self):
        x, y = random_batch(Rng(11), 4, LOGREG)
        # large enough that the matmul overflows to inf in the forward pass
        huge = init_params(LOGREG, Rng(12)).with_values(np.full(15, 1e308))
        with pytest.raises(NumericError, match="segment"):
            forward_loss_grad(LOGREG, huge, (x, y))

    def test_empty_batch_rejected(self):
        params = init_params(LOGREG, Rng(13))
        with pytest.raises(InvalidArgument):
            forward_loss_grad(LOGREG, params, (np.zeros((0, 4)), np.zeros(0, dtype=int)))


class TestSgdStep:
    def test_plain_sgd_without_momentum(self):
        params = init_params(LOGREG, Rng(14))
        x, y = random_batch(Rng(15), 8, LOGREG)
        _, grad = forward_loss_grad(LOGREG, params, (x, y))
        opt = OptState.initial(0.1, 0.0, LOGREG)
        new, _ = sgd_step(params, grad, opt)
        assert np.allclose(new.values, params.values - 0.1 * grad.values, atol=1e-15)

    def test_zero_grad_zero_velocity_no_move(self):
        params = init_params(LOGREG, Rng(16))
        zero_grad = params.zeros_like()
        opt = OptState.initial(0.1, 0.9, LOGREG)
        new, _ = sgd_step(params, zero_grad, opt)
        assert new == params

    def test_two_momentum_steps_hand_unrolled(self):
        # v1 = g, p1 = p0 - eta*g; v2 = 0.9 g + g; total displacement
        # eta * g * (1 + 1.9).
        params = init_params(LOGREG, Rng(17))
        g = params.with_values(np.full(15, 0.5))
        opt = OptState.initial(0.01, 0.9, LOGREG)
        p1, opt1 = sgd_step(params, g, opt)
        p2, _ = sgd_step(p1, g, opt1)
        expected = params.values - 0.01 * 0.5 * (1.0 + 1.9)
        assert np.allclose(p2.values, expected, atol=1e-15)

    def test_layout_mismatch(self):
        params = init_params(LOGREG, Rng(18))
        other = init_params(MLP, Rng(18))
        with pytest.raises(IncompatibleShape):
            sgd_step(params, other, OptState.initial(0.1, 0.0, LOGREG))

    def test_loss_descent_small_step(self):
        # One eta=1e-3 full-batch step must not increase the loss.
        meta = Rng(19)
        for trial in range(50):
            spec = LOGREG if trial % 2 else MLP
            params = init_params(
                ModelSpec(spec.kind, 4, 3, hidden=spec.hidden, init_scale=0.3),
                Rng(300 + trial),
            )
            batch = random_batch(meta, 16, spec)
            loss0, grad = forward_loss_grad(spec, params, batch)
            opt = OptState.initial(1e-3, 0.0, spec)
            new, _ = sgd_step(params, grad, opt)
            loss1, _ = forward_loss_grad(spec, new, batch)
            assert loss1 <= loss0 + 1e-12


class TestClientUpdate:
    def _data(self, n=20, spec=LOGREG, seed=21):
        return random_batch(Rng(seed), n, spec)

    def test_zero_epochs_identity(self):
        params = init_params(LOGREG, Rng(20))
        out = client_update(
            LOGREG, params, self._data(), LocalTrainSpec(0, 4), OptState.initial(0.1, 0.9, LOGREG), Rng(1)
        )
        assert out == params

    def test_single_full_batch_epoch_equals_one_step(self):
        x, y = self._data()
        params = init_params(LOGREG, Rng(22))
        opt = OptState.initial(0.05, 0.0, LOGREG)
        out = client_update(LOGREG, params, (x, y), LocalTrainSpec(1, 50), opt, Rng(2))
        _, grad = forward_loss_grad(LOGREG, params, (x, y))
        expected, _ = sgd_step(params, grad, opt)
        assert np.allclose(out.values, expected.values, atol=1e-15)

    def test_deterministic_rerun(self):
        x, y = self._data()
        params = init_params(LOGREG, Rng(23))
        opt = OptState.initial(0.05, 0.9, LOGREG)
        a = client_update(LOGREG, params, (x, y), LocalTrainSpec(5, 4), opt, Rng(99))
        b = client_update(LOGREG, params, (x, y), LocalTrainSpec(5, 4), opt, Rng(99))
        assert a == b

    def test_short_remainder_batch_kept(self):
        x, y = self._data(n=10)
        assert local_steps(10, LocalTrainSpec(1, 4)) == 3  # 4 + 4 + 2
        params = init_params(LOGREG, Rng(24))
        opt = OptState.initial(0.05, 0.0, LOGREG)
        out = client_update(LOGREG, params, (x, y), LocalTrainSpec(1, 4), opt, Rng(3))
        assert not np.array_equal(out.values, params.values)

    def test_local_only_mask_keeps_global_segments(self):
        spec = ModelSpec("mlp", 4, 3, hidden=5, layer_split=2)
        params = init_params(spec, Rng(25))
        x, y = self._data(spec=spec)
        opt = OptState.initial(0.05, 0.9, spec)
        out = client_update(
            spec, params, (x, y), LocalTrainSpec(3, 4, mask="local-only"), opt, Rng(4)
        )
        boundary = spec.local_boundary()
        assert np.array_equal(out.values[:boundary], params.values[:boundary])
        assert not np.array_equal(out.values[boundary:], params.values[boundary:])

    def test_global_only_mask_keeps_local_segments(self):
        spec = ModelSpec("mlp", 4, 3, hidden=5, layer_split=1)
        params = init_params(spec, Rng(26))
        x, y = self._data(spec=spec)
        opt = OptState.initial(0.05, 0.9, spec)
        out = client_update(
            spec, params, (x, y), LocalTrainSpec(3, 4, mask="global-only"), opt, Rng(5)
        )
        boundary = spec.local_boundary()
        assert np.array_equal(out.values[boundary:], params.values[boundary:])


class TestEvaluate:
    def test_zero_params_tie_breaks_to_class_zero(self):
        train, _ = balanced_dataset(n_classes=4, per_class=25, n_features=6)
        spec = ModelSpec("logreg", 6, 4, init_scale=0.0)
        zero = init_params(spec, Rng(1))
        acc = evaluate(spec, zero, train, np.arange(train.n_samples))
        assert acc == pytest.approx(0.25)  # share of the tie-break class

    def test_perfect_separation_scores_one(self):
        from fedsim.data import SyntheticSpec, generate_synthetic

        # near-noiseless blobs on distinct axes; scoring class c by its
        # axis coordinate is a perfect classifier
        spec_data = SyntheticSpec(3, 6, 30, 40, separation=10.0, sigma=0.05)
        _, test = generate_synthetic(spec_data, Rng(42))
        spec = ModelSpec("logreg", 6, 3)
        w = np.zeros((6, 3))
        for c in range(3):
            w[c, c] = 10.0
        params = ParamVector(np.concatenate([w.ravel(), np.zeros(3)]), spec.layout())
        assert evaluate(spec, params, test, np.arange(test.n_samples)) == 1.0

    def test_additive_over_disjoint_index_sets(self):
        train, _ = balanced_dataset(n_classes=3, per_class=20, n_features=6, seed=9)
        spec = ModelSpec("logreg", 6, 3)
        params = init_params(spec, Rng(30))
        a = np.arange(0, 25)
        b = np.arange(25, 60)
        acc_a = evaluate(spec, params, train, a)
        acc_b = evaluate(spec, params, train, b)
        acc_all = evaluate(spec, params, train, np.arange(60))
        assert acc_all == pytest.approx((25 * acc_a + 35 * acc_b) / 60, abs=1e-12)

    def test_empty_index_set_rejected(self):
        train, _ = balanced_dataset(n_classes=3, per_class=5, n_features=6)
        spec = ModelSpec("logreg", 6, 3)
        with pytest.raises(InvalidArgument):
            evaluate(spec, init_params(spec, Rng(31)), train, np.array([], dtype=int))
