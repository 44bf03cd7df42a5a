import numpy as np
import pytest

from modeconn.nets import (
    DimensionError,
    Network,
    NetworkSpec,
    SpecError,
    SpectralNormError,
    TrainConfig,
    TrainingDivergedError,
    accuracy,
    backward,
    clamp_spectral_norms,
    forward,
    grad_to_vector,
    init_network,
    loss,
    params_to_vector,
    spectral_norm,
    train_sgd,
    vector_to_params,
)
from modeconn.data import make_blobs

from conftest import fd_gradient, gaussian_dataset, jacobi_svd_norm, random_net, rel_error


def scalar_chain_forward(net, x):
    """Straight-line per-sample evaluator using plain Python floats; the
    independent oracle for the vectorized forward pass."""
    spec = net.spec
    h = [float(v) for v in x]
    skips = set(spec.skip_layers())
    stored = {0: h}
    for l in range(1, spec.n_layers + 1):
        W = net.weights[l - 1]
        z = []
        for i in range(W.shape[0]):
            acc = 0.0
            for j in range(W.shape[1]):
                acc += float(W[i, j]) * h[j]
            if net.biases is not None:
                acc += float(net.biases[l - 1][i])
            z.append(acc)
        if l == spec.n_layers:
            return z
        out = []
        for v in z:
            if spec.activation == "relu":
                out.append(max(v, 0.0))
            elif spec.activation == "tanh":
                out.append(float(np.tanh(v)))
            elif spec.activation == "identity":
                out.append(v)
            else:
                d = spec.huber_delta
                out.append(0.0 if v <= 0 else (v - d / 2 if v >= d else v * v / (2 * d)))
        if l in skips:
            out = [a + b for a, b in zip(out, stored[l - spec.residual_period])]
        h = out
        stored[l] = h


class TestSpecValidation:
    def test_too_few_widths(self):
        with pytest.raises(SpecError):
            NetworkSpec((4,))

    def test_huber_needs_delta(self):
        with pytest.raises(SpecError):
            NetworkSpec((2, 3, 2), activation="huberized_relu")

    def test_residual_width_mismatch(self):
        # skip into layer 3 comes from layer 1: widths 4 vs 6 cannot add
        with pytest.raises(SpecError):
            NetworkSpec((2, 4, 5, 6, 2), residual_period=2)

    def test_residual_groups(self):
        spec = NetworkSpec((2, 8, 8, 8, 8, 2), residual_period=2)
        assert spec.skip_layers() == [3]
        assert spec.permutation_groups() == [[1, 3], [2], [4]]

    def test_weight_shape_checked(self):
        spec = NetworkSpec((2, 3, 2))
        with pytest.raises(DimensionError, match="layer 1"):
            Network(spec, [np.zeros((3, 3)), np.zeros((2, 3))],
                    [np.zeros(3), np.zeros(2)])


class TestForward:
    def test_identity_network_is_identity_map(self):
        spec = NetworkSpec((3, 3, 3), activation="identity")
        net = Network(spec, [np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
        X = np.random.default_rng(0).standard_normal((5, 3))
        logits, _ = forward(net, X)
        np.testing.assert_array_equal(logits, X)

    def test_hand_computed_relu_chain(self):
        # W1 = [[1], [-1]], W2 = [[1, 1]], x = 2: hidden pre (2, -2),
        # post (2, 0), logit 2
        spec = NetworkSpec((1, 2, 1), activation="relu", has_bias=False)
        net = Network(spec, [np.array([[1.0], [-1.0]]), np.array([[1.0, 1.0]])])
        logits, pre = forward(net, np.array([[2.0]]), capture="pre_activations")
        _, post = forward(net, np.array([[2.0]]), capture="post_activations")
        np.testing.assert_allclose(pre[0], [[2.0, -2.0]])
        np.testing.assert_allclose(post[0], [[2.0, 0.0]])
        np.testing.assert_allclose(logits, [[2.0]])
        assert logits[0].tolist() == scalar_chain_forward(net, [2.0])

    def test_matches_scalar_chain_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            net = random_net(rng)
            x = rng.standard_normal(net.spec.layer_widths[0])
            logits, _ = forward(net, x[None, :])
            np.testing.assert_allclose(logits[0], scalar_chain_forward(net, x), atol=1e-12)

    def test_residual_matches_scalar_chain(self):
        rng = np.random.default_rng(8)
        spec = NetworkSpec((3, 5, 5, 5, 5, 2), activation="relu", residual_period=2)
        net = init_network(spec, rng)
        x = rng.standard_normal(3)
        logits, _ = forward(net, x[None, :])
        np.testing.assert_allclose(logits[0], scalar_chain_forward(net, x), atol=1e-12)

    def test_huberized_branch_value(self):
        spec = NetworkSpec((1, 1, 1), activation="huberized_relu", huber_delta=1.0,
                           has_bias=False)
        net = Network(spec, [np.array([[1.0]]), np.array([[1.0]])])
        _, post = forward(net, np.array([[0.5]]), capture="post_activations")
        assert post[0][0, 0] == pytest.approx(0.125, abs=1e-15)

    def test_dimension_error_names_layer(self):
        net = random_net(np.random.default_rng(1), in_dim=4)
        with pytest.raises(DimensionError, match="width 4"):
            forward(net, np.zeros((2, 5)))

    def test_capture_shapes(self):
        rng = np.random.default_rng(2)
        spec = NetworkSpec((3, 4, 5, 2))
        net = init_network(spec, rng)
        X = rng.standard_normal((7, 3))
        _, caps = forward(net, X, capture="post_activations")
        assert [c.shape for c in caps] == [(7, 4), (7, 5)]


class TestLoss:
    def test_uniform_logits_cross_entropy_is_log_k(self):
        for k in (2, 5, 9):
            logits = np.zeros((4, k))
            labels = np.arange(4) % k
            assert loss(logits, labels) == pytest.approx(np.log(k), rel=1e-12)

    def test_sharp_one_hot_drives_loss_to_zero(self):
        labels = np.array([0, 1])
        prev = np.inf
        for mag in (1.0, 5.0, 20.0, 80.0):
            logits = np.eye(2) * mag
            val = loss(logits, labels)
            assert val < prev
            prev = val
        assert prev < 1e-30

    def test_binary_closed_form(self):
        # logits (1, 0), label 0: CE = ln(1 + e^{-1})
        val = loss(np.array([[1.0, 0.0]]), np.array([0]))
        assert val == pytest.approx(np.log(1 + np.exp(-1)), rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            loss(np.zeros((2, 3)), np.array([0, 3]))

    def test_mse_is_mean_squared_distance_to_onehot(self):
        logits = np.array([[0.5, 0.5], [1.0, 0.0]])
        labels = np.array([0, 0])
        want = (0.25 + 0.25 + 0.0 + 0.0) / 2
        assert loss(logits, labels, "mse") == pytest.approx(want, rel=1e-14)


class TestBackward:
    def test_zero_gradient_for_constant_objective(self):
        # identity activation, perfect one-hot fit: mse loss is exactly 0
        spec = NetworkSpec((2, 2, 2), activation="identity")
        net = Network(spec, [np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
        X = np.eye(2)
        y = np.array([0, 1])
        g = backward(net, X, y, "mse")
        assert all(np.all(W == 0) for W in g.weights)
        assert all(np.all(b == 0) for b in g.biases)

    @pytest.mark.parametrize("kind", ["cross_entropy", "mse"])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(11)
        checked = 0
        for case in range(30):
            net = random_net(rng)
            X = rng.standard_normal((6, net.spec.layer_widths[0]))
            y = rng.integers(0, net.spec.layer_widths[-1], 6)
            g = grad_to_vector(net.spec, backward(net, X, y, kind))
            fd = fd_gradient(net.spec, params_to_vector(net), X, y, kind)
            err = rel_error(g, fd)
            if err >= 1e-4:
                # redraw relu-kink collisions once; a systematic bug fails anyway
                X = rng.standard_normal((6, net.spec.layer_widths[0]))
                g = grad_to_vector(net.spec, backward(net, X, y, kind))
                fd = fd_gradient(net.spec, params_to_vector(net), X, y, kind)
                err = rel_error(g, fd)
            assert err < 1e-4
            checked += 1
        assert checked == 30

    def test_residual_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        spec = NetworkSpec((3, 4, 4, 4, 2), activation="tanh", residual_period=2)
        net = init_network(spec, rng)
        X = rng.standard_normal((5, 3))
        y = rng.integers(0, 2, 5)
        g = grad_to_vector(spec, backward(net, X, y))
        fd = fd_gradient(spec, params_to_vector(net), X, y, "cross_entropy")
        assert rel_error(g, fd) < 1e-6

    def test_huberized_kink_is_c1(self):
        # derivative approaches 1 from both sides of t = delta
        spec = NetworkSpec((1, 1, 1), activation="huberized_relu", huber_delta=0.7,
                           has_bias=False)
        net = Network(spec, [np.array([[1.0]]), np.array([[1.0]])])
        y = np.array([0])
        for x0 in (0.7 - 1e-7, 0.7 + 1e-7):
            g = grad_to_vector(spec, backward(net, np.array([[x0]]), y, "mse"))
            fd = fd_gradient(spec, params_to_vector(net), np.array([[x0]]), y, "mse")
            assert rel_error(g, fd) < 1e-4

    def test_empty_batch_rejected(self):
        net = random_net(np.random.default_rng(3))
        with pytest.raises(ValueError, match="empty"):
            backward(net, np.zeros((0, net.spec.layer_widths[0])), np.zeros(0, dtype=int))


class TestTrainSgd:
    def test_zero_epochs_returns_unchanged(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, in_dim=2, out_dim=2)
        ds = make_blobs(n=60, seed=1)
        out, log = train_sgd(net, ds, TrainConfig(epochs=0))
        assert out.allclose(net)
        assert log == []

    def test_separable_blobs_reach_high_accuracy(self):
        # logistic-regression oracle first: the task is linearly separable
        ds = make_blobs(n=400, noise=0.3, seed=2)
        X, y = ds.train_arrays()
        w = np.zeros(X.shape[1])
        b = 0.0
        for _ in range(300):
            p = 1 / (1 + np.exp(-(X @ w + b)))
            w -= 0.5 * (X.T @ (p - y)) / len(y)
            b -= 0.5 * float(np.mean(p - y))
        oracle_acc = np.mean(((X @ w + b) > 0) == (y == 1))
        assert oracle_acc >= 0.99

        spec = NetworkSpec((2, 16, 2))
        net = init_network(spec, np.random.default_rng(3))
        trained, log = train_sgd(net, ds, TrainConfig(epochs=30, batch_size=64, seed=0))
        assert log[-1]["train_acc"] >= 0.99

    def test_same_seed_bitwise_identical(self):
        ds = make_blobs(n=120, seed=4)
        spec = NetworkSpec((2, 8, 2))
        runs = []
        for _ in range(2):
            net = init_network(spec, np.random.default_rng(9))
            trained, _ = train_sgd(net, ds, TrainConfig(epochs=5, batch_size=32, seed=7))
            runs.append(trained)
        for a, b in zip(runs[0].weights, runs[1].weights):
            assert np.array_equal(a, b)
        for a, b in zip(runs[0].biases, runs[1].biases):
            assert np.array_equal(a, b)

    def test_small_lr_step_decreases_regularized_objective(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            net = random_net(rng, in_dim=3, out_dim=2)
            X = rng.standard_normal((16, 3))
            y = rng.integers(0, 2, 16)
            wd = 1e-3

            def objective(n):
                reg = 0.5 * wd * sum(float(np.sum(W * W)) for W in n.weights)
                return loss(forward(n, X)[0], y) + reg

            before = objective(net)
            g = backward(net, X, y)
            stepped = net.copy()
            for l in range(len(stepped.weights)):
                stepped.weights[l] -= 1e-4 * (g.weights[l] + wd * stepped.weights[l])
                stepped.biases[l] -= 1e-4 * g.biases[l]
            assert objective(stepped) < before

    def test_divergence_carries_last_state(self):
        ds = make_blobs(n=80, seed=5)
        spec = NetworkSpec((2, 8, 2))
        net = init_network(spec, np.random.default_rng(1))
        with pytest.raises(TrainingDivergedError) as exc:
            train_sgd(net, ds, TrainConfig(lr=1e6, epochs=50, batch_size=16, seed=0,
                                           weight_decay=0.0))
        assert isinstance(exc.value.last_network, Network)

    def test_spectral_constraint_enforced_every_step(self):
        ds = make_blobs(n=100, seed=6)
        spec = NetworkSpec((2, 8, 2))
        net = init_network(spec, np.random.default_rng(2))
        bound = 1.5
        trained, _ = train_sgd(
            net, ds, TrainConfig(epochs=8, batch_size=25, seed=1,
                                 max_weight_spectral_norm=bound, lr=0.5)
        )
        for W in trained.weights:
            assert spectral_norm(W) <= bound + 1e-8


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(6)) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal(self):
        assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, abs=1e-12)

    def test_random_matches_jacobi_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            A = rng.standard_normal((5, 4))
            assert spectral_norm(A, tol=1e-12) == pytest.approx(
                jacobi_svd_norm(A), abs=1e-8
            )

    def test_nonconvergence_reports_residual(self):
        A = np.random.default_rng(0).standard_normal((8, 8))
        with pytest.raises(SpectralNormError) as exc:
            spectral_norm(A, tol=1e-16, max_iters=2)
        assert exc.value.residual >= 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            spectral_norm(np.zeros((0, 3)))

    def test_clamp(self):
        rng = np.random.default_rng(14)
        net = random_net(rng)
        for W in net.weights:
            W *= 10.0
        clamp_spectral_norms(net, 2.0)
        for W in net.weights:
            assert spectral_norm(W) <= 2.0 + 1e-8
