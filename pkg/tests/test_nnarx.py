import json

import numpy as np
import pytest

from narxmpc.nnarx import (FfnnLayer, FfnnParams, InputBox, Normalization,
                           build_shift_matrices, contraction_margin,
                           contraction_margin_with_grad, eta, eta_jacobians,
                           jacobians, load_model, make_model, model_from_dict,
                           model_to_dict, save_model, shift_window, simulate,
                           spectral_norm, step)
from conftest import random_model, random_params


def regression_rollout(params, y_hist, u_hist, u_seq):
    """Direct window recursion, written independently of the state-space
    path: keeps raw histories, concatenates oldest-first [y; u] blocks, and
    evaluates the network layer by layer."""
    ys = list(y_hist)
    us = list(u_hist)
    out = []
    for u in u_seq:
        window = []
        for i in range(len(ys)):
            window.extend(ys[i])
            window.extend(us[i])
        x = np.array(window, float)
        h = x
        uu = np.asarray(u, float).ravel()
        for layer in params.layers:
            a = layer.W @ uu + layer.U @ h + layer.b
            h = np.tanh(a) if layer.activation == "tanh" else a
        y_next = params.U0 @ h + params.b0
        out.append(y_next)
        ys = ys[1:] + [y_next]
        us = us[1:] + [uu]
    return np.array(out)


def zero_params(N, m=1, p=1, hidden=4, activation="tanh", b0=None):
    n = N * (m + p)
    return FfnnParams(
        [FfnnLayer(np.zeros((hidden, m)), np.zeros((hidden, n)),
                   np.zeros(hidden), activation)],
        np.zeros((p, hidden)),
        np.zeros(p) if b0 is None else np.asarray(b0, float),
    )


class TestShiftMatrices:
    def test_smallest_window(self):
        A, B_u, B_x, C = build_shift_matrices(1, 1, 1)
        assert np.array_equal(A, np.zeros((2, 2)))
        assert np.array_equal(B_u, [[0.0], [1.0]])
        assert np.array_equal(B_x, [[1.0], [0.0]])
        assert np.array_equal(C, [[1.0, 0.0]])

    def test_one_step_matches_regression_any_eta(self, rng):
        # brute force: a state-space step with an arbitrary eta value must
        # place that value in the output slot and u in the input slot
        for N in (1, 2, 3):
            A, B_u, B_x, C = build_shift_matrices(N, 1, 1)
            x = rng.standard_normal(2 * N)
            u = rng.standard_normal(1)
            e = rng.standard_normal(1)
            x_next = A @ x + B_u @ u + B_x @ e
            assert np.allclose(x_next[:-2], x[2:])
            assert x_next[-2] == e[0]
            assert x_next[-1] == u[0]
            assert C @ x_next == pytest.approx(e[0])

    def test_two_block_shift(self):
        A, _, _, _ = build_shift_matrices(2, 1, 1)
        expected = np.zeros((4, 4))
        expected[0:2, 2:4] = np.eye(2)
        assert np.array_equal(A, expected)

    def test_benchmark_dimension(self):
        A, _, _, _ = build_shift_matrices(5, 1, 1)
        assert A.shape == (10, 10)

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            build_shift_matrices(0, 1, 1)
        with pytest.raises(ValueError):
            build_shift_matrices(3, 2, 1)

    def test_shift_nilpotency(self):
        for N in (1, 2, 5):
            A, _, _, _ = build_shift_matrices(N, 1, 1)
            assert not np.any(np.linalg.matrix_power(A, N))


class TestEta:
    def test_zero_weights_gives_bias(self, rng):
        params = zero_params(2, b0=[0.37])
        model = make_model(2, params)
        x = rng.standard_normal(4)
        u = rng.standard_normal(1)
        assert eta(model, x, u) == pytest.approx([0.37])

    def test_tanh_of_zero_is_zero(self, rng):
        params = zero_params(3, b0=[1.5])
        model = make_model(3, params)
        assert eta(model, rng.standard_normal(6), [2.0]) == pytest.approx([1.5])

    def test_matches_straight_line_formula(self, rng):
        params = random_params(rng, N=2, hidden=(6,))
        model = make_model(2, params)
        x = rng.standard_normal(4)
        u = rng.standard_normal(1)
        # independent one-shot evaluation of the single-layer formula
        layer = params.layers[0]
        expected = params.U0 @ np.tanh(layer.W @ u + layer.U @ x + layer.b) + params.b0
        assert eta(model, x, u) == pytest.approx(expected, rel=1e-14)

    def test_dimension_errors(self, rng):
        model = random_model(rng)
        with pytest.raises(ValueError):
            eta(model, np.zeros(model.n + 1), np.zeros(model.m))


class TestStep:
    def test_zero_weights_from_origin(self):
        model = make_model(2, zero_params(2, b0=[0.8]))
        x_next = step(model, np.zeros(4), np.zeros(1))
        assert np.allclose(x_next, [0.0, 0.0, 0.8, 0.0])

    def test_shift_structure(self, rng):
        model = random_model(rng, N=3)
        x = rng.standard_normal(model.n)
        u = rng.standard_normal(1)
        x_next = step(model, x, u)
        assert np.array_equal(x_next[:-2], x[2:])
        assert x_next[-1] == u[0]

    def test_matches_dense_matrix_form(self, rng):
        for _ in range(5):
            model = random_model(rng, N=4, hidden=(5,))
            x = rng.standard_normal(model.n)
            u = rng.standard_normal(1)
            dense = model.A @ x + model.B_u @ u + model.B_x @ eta(model, x, u)
            assert np.allclose(step(model, x, u), dense, atol=1e-14)

    def test_rollout_matches_regression_recursion(self, rng):
        model = random_model(rng, N=3, hidden=(7,))
        y_hist = [rng.standard_normal(1) for _ in range(3)]
        u_hist = [rng.standard_normal(1) for _ in range(3)]
        u_seq = rng.standard_normal((20, 1))
        x = np.concatenate([np.concatenate([y, u]) for y, u in zip(y_hist, u_hist)])
        ys = simulate(model, x, u_seq)
        expected = regression_rollout(model.params, y_hist, u_hist, u_seq)
        assert np.allclose(ys[1:], expected, atol=1e-12)


class TestSimulate:
    def test_constant_at_fixed_point(self, rng):
        # a zero-weight model has equilibrium y = b0 for any input
        model = make_model(2, zero_params(2, b0=[0.6]))
        x_eq = model.stacked_state([0.6], [0.3])
        ys = simulate(model, x_eq, np.full((15, 1), 0.3))
        assert np.allclose(ys, 0.6)

    def test_single_step_returns_two_outputs(self, rng):
        model = random_model(rng)
        ys = simulate(model, rng.standard_normal(model.n), [[0.1]])
        assert ys.shape == (2, 1)

    def test_empty_input_rejected(self, rng):
        model = random_model(rng)
        with pytest.raises(ValueError):
            simulate(model, np.zeros(model.n), np.zeros((0, 1)))

    def test_contractive_model_forgets_initial_state(self, rng):
        model = random_model(rng, N=2, hidden=(6,), target_margin=0.6)
        xa = rng.standard_normal(model.n)
        xb = rng.standard_normal(model.n)
        u_seq = rng.uniform(-1, 1, size=(60, 1))
        gaps = []
        for _ in range(60):
            gaps.append(np.linalg.norm(xa - xb))
            k = len(gaps) - 1
            xa = step(model, xa, u_seq[k])
            xb = step(model, xb, u_seq[k])
        assert gaps[-1] < 1e-6 * gaps[0]


class TestJacobians:
    def test_zero_weights(self, rng):
        model = make_model(2, zero_params(2))
        Ad, Bd = jacobians(model, rng.standard_normal(4), rng.standard_normal(1))
        assert np.array_equal(Ad, model.A)
        assert np.array_equal(Bd, model.B_u)

    def test_finite_difference_agreement(self, rng):
        model = random_model(rng, N=2, hidden=(6,))
        h = 1e-5
        for _ in range(20):
            x = rng.standard_normal(model.n)
            u = rng.standard_normal(1)
            Ad, Bd = jacobians(model, x, u)
            Ad_fd = np.empty_like(Ad)
            for j in range(model.n):
                dx = np.zeros(model.n)
                dx[j] = h
                Ad_fd[:, j] = (step(model, x + dx, u) - step(model, x - dx, u)) / (2 * h)
            Bd_fd = ((step(model, x, u + h) - step(model, x, u - h)) / (2 * h))[:, None]
            assert np.linalg.norm(Ad - Ad_fd) < 1e-5 * max(1.0, np.linalg.norm(Ad))
            assert np.linalg.norm(Bd - Bd_fd) < 1e-5 * max(1.0, np.linalg.norm(Bd))

    def test_linear_network_has_constant_jacobian(self, rng):
        model = random_model(rng, N=2, hidden=(5,), activation="identity")
        layer = model.params.layers[0]
        Ad1, Bd1 = jacobians(model, rng.standard_normal(4), rng.standard_normal(1))
        Ad2, Bd2 = jacobians(model, rng.standard_normal(4), rng.standard_normal(1))
        assert np.allclose(Ad1, Ad2)
        assert np.allclose(Bd1, Bd2)
        assert np.allclose(Ad1, model.A + model.B_x @ model.params.U0 @ layer.U)

    def test_two_layer_finite_difference(self, rng):
        params = random_params(rng, N=2, hidden=(5, 4))
        model = make_model(2, params)
        x = rng.standard_normal(4)
        u = rng.standard_normal(1)
        Jx, Ju = eta_jacobians(params, x, u)
        h = 1e-6
        for j in range(4):
            dx = np.zeros(4)
            dx[j] = h
            fd = (eta(model, x + dx, u) - eta(model, x - dx, u)) / (2 * h)
            assert np.allclose(Jx[:, j], fd, atol=1e-7)
        fd_u = (eta(model, x, u + h) - eta(model, x, u - h)) / (2 * h)
        assert np.allclose(Ju[:, 0], fd_u, atol=1e-7)


class TestContractionMargin:
    def test_zero_weights(self):
        assert contraction_margin(zero_params(2)) == 0.0

    def test_half_identity_product(self):
        # hidden U is 0.5*I and U0 a 0.5-norm row, so the product is 0.25
        params = FfnnParams(
            [FfnnLayer(np.zeros((4, 1)), 0.5 * np.eye(4), np.zeros(4), "tanh")],
            (0.5 * np.eye(4))[:1, :],
            np.zeros(1),
        )
        assert contraction_margin(params) == pytest.approx(0.25, abs=1e-9)

    def test_matches_svd(self, rng):
        for _ in range(10):
            M = rng.standard_normal((6, 9))
            assert spectral_norm(M) == pytest.approx(
                np.linalg.svd(M, compute_uv=False)[0], rel=1e-8)

    def test_gradient_matches_finite_differences(self, rng):
        params = random_params(rng, N=2, hidden=(5,))
        r, g = contraction_margin_with_grad(params)
        v = params.to_vector()
        h = 1e-6
        for idx in rng.choice(v.size, size=12, replace=False):
            vp = v.copy(); vp[idx] += h
            vm = v.copy(); vm[idx] -= h
            fd = (contraction_margin(params.from_vector(vp))
                  - contraction_margin(params.from_vector(vm))) / (2 * h)
            assert g[idx] == pytest.approx(fd, abs=2e-5)


class TestDeltaIssProperty:
    def test_trajectory_pairs_contract(self, rng):
        # empirical incremental stability: same inputs, different initial
        # states, gap bounded by a fitted decaying exponential
        model = random_model(rng, N=2, hidden=(8,), target_margin=0.6)
        for _ in range(20):
            xa = rng.standard_normal(model.n)
            xb = rng.standard_normal(model.n)
            gap0 = np.linalg.norm(xa - xb)
            u_seq = rng.uniform(-1, 1, size=(200, 1))
            gaps = [gap0]
            for k in range(200):
                xa = step(model, xa, u_seq[k])
                xb = step(model, xb, u_seq[k])
                gaps.append(np.linalg.norm(xa - xb))
            gaps = np.array(gaps)
            below = np.nonzero(gaps < 1e-8)[0]
            assert below.size and below[0] <= 200
            # envelope fit on the pre-floor section
            mask = gaps > 1e-13
            ks = np.nonzero(mask)[0]
            lam = np.exp(np.polyfit(ks, np.log(gaps[mask] + 1e-300), 1)[0])
            assert 0.0 < lam < 1.0
            rho = np.max(gaps[mask] / (gap0 * lam ** ks)) if gap0 > 0 else 1.0
            assert np.all(gaps[mask] <= 1.0000001 * rho * gap0 * lam ** ks)


class TestStateSpaceEquivalence:
    def test_fifty_step_equivalence(self, rng):
        for _ in range(20):
            N = int(rng.integers(1, 5))
            model = random_model(rng, N=N, hidden=(int(rng.integers(2, 9)),))
            y_hist = [rng.standard_normal(1) for _ in range(N)]
            u_hist = [rng.standard_normal(1) for _ in range(N)]
            u_seq = rng.standard_normal((50, 1))
            x0 = np.concatenate([np.concatenate([y, u])
                                 for y, u in zip(y_hist, u_hist)])
            ys = simulate(model, x0, u_seq)
            expected = regression_rollout(model.params, y_hist, u_hist, u_seq)
            assert np.max(np.abs(ys[1:] - expected)) < 1e-12


class TestSerialization:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        model = random_model(rng, N=3, hidden=(6,))
        model.normalization = Normalization([0.1], [0.03], [310.0], [7.5])
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.N == model.N
        for la, lb in zip(loaded.params.layers, model.params.layers):
            assert np.array_equal(la.W, lb.W)
            assert np.array_equal(la.U, lb.U)
            assert np.array_equal(la.b, lb.b)
            assert la.activation == lb.activation
        assert np.array_equal(loaded.params.U0, model.params.U0)
        assert np.array_equal(loaded.params.b0, model.params.b0)
        assert np.array_equal(loaded.normalization.y_scale,
                              model.normalization.y_scale)
        # a second save must produce identical bytes
        path2 = tmp_path / "model2.json"
        save_model(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_foreign_documents(self):
        with pytest.raises(ValueError):
            model_from_dict({"kind": "other"})

    def test_dict_is_json_clean(self, rng):
        doc = model_to_dict(random_model(rng))
        json.dumps(doc)


class TestInputBoxAndNormalization:
    def test_box_validation(self):
        with pytest.raises(ValueError):
            InputBox([0.2], [0.1])

    def test_clip_and_contains(self):
        box = InputBox([0.05], [0.18])
        assert box.clip([0.3]) == pytest.approx([0.18])
        assert box.contains([0.1])
        assert not box.contains([0.2])
        assert box.violation([0.2]) == pytest.approx(0.02)

    def test_normalization_round_trip(self, rng):
        nz = Normalization([0.11], [0.04], [320.0], [8.0])
        u = rng.uniform(0.05, 0.18, size=5)
        y = rng.uniform(300, 340, size=5)
        assert np.allclose(nz.denorm_u(nz.norm_u(u)), u, atol=1e-12)
        assert np.allclose(nz.denorm_y(nz.norm_y(y)), y, atol=1e-12)

    def test_box_normalization(self):
        nz = Normalization([0.1], [0.05], [0.0], [1.0])
        nbox = InputBox([0.05], [0.18]).normalized(nz)
        assert nbox.lower == pytest.approx([-1.0])
        assert nbox.upper == pytest.approx([1.6])


class TestParamsVector:
    def test_round_trip(self, rng):
        params = random_params(rng, N=2, hidden=(5, 3))
        v = params.to_vector()
        back = params.from_vector(v)
        assert np.array_equal(back.to_vector(), v)
        with pytest.raises(ValueError):
            params.from_vector(v[:-1])
