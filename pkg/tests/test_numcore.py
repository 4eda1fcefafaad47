import numpy as np
import pytest

from spfm_lab.numcore import (AdamState, RngStream, adam_step, forward_batch,
                              mlp_forward, mlp_grad, mlp_init)

from helpers import finite_difference_grads, max_rel_error, linear_model, \
    random_velocity_model


class TestRngStream:
    def test_same_seed_same_sequence(self):
        a = RngStream(42, "noise").normal(size=100)
        b = RngStream(42, "noise").normal(size=100)
        assert a.tobytes() == b.tobytes()

    def test_streams_are_independent(self):
        a = RngStream(42, "noise").normal(size=5000)
        b = RngStream(42, "data").normal(size=5000)
        assert not np.array_equal(a, b)
        corr = np.corrcoef(a, b)[0, 1]
        assert abs(corr) < 0.05
        assert abs(a.mean()) < 0.05 and abs(b.mean()) < 0.05

    def test_substreams_distinct_and_reproducible(self):
        root = RngStream(7, "data")
        s0 = root.substream(0).normal(size=50)
        s1 = root.substream(1).normal(size=50)
        assert not np.array_equal(s0, s1)
        again = RngStream(7, "data").substream(0).normal(size=50)
        assert s0.tobytes() == again.tobytes()

    def test_unknown_stream_id(self):
        with pytest.raises(ValueError, match="stream_id"):
            RngStream(0, "bogus")

    def test_draw_count_instrumentation(self):
        rng = RngStream(0, "noise")
        assert rng.draw_count == 0
        rng.normal(size=3)
        rng.uniform(size=2)
        assert rng.draw_count == 2

    def test_state_roundtrip_continues_sequence(self):
        rng = RngStream(3, "train")
        rng.normal(size=10)
        state = rng.state_dict()
        rest = rng.normal(size=10)
        resumed = RngStream.from_state_dict(state)
        assert resumed.normal(size=10).tobytes() == rest.tobytes()


class TestMlpInit:
    def test_deterministic_parameter_bytes(self):
        m1 = mlp_init([3, 4, 2], "tanh", RngStream(11, "init"))
        m2 = mlp_init([3, 4, 2], "tanh", RngStream(11, "init"))
        for a, b in zip(m1.params(), m2.params()):
            assert a.tobytes() == b.tobytes()

    def test_too_few_layers(self):
        with pytest.raises(ValueError, match="2 layer"):
            mlp_init([2], "tanh", RngStream(0, "init"))

    def test_zero_layer_size_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            mlp_init([3, 0, 2], "tanh", RngStream(0, "init"))

    def test_first_layer_init_bound(self):
        # scale 1/sqrt(fan_in) with fan_in=2
        m = mlp_init([2, 8, 2], "tanh", RngStream(7, "init"))
        bound = 1.0 / np.sqrt(2.0)
        assert np.all(np.abs(m.weights[0]) <= bound)
        assert np.all(np.abs(m.weights[1]) <= 1.0 / np.sqrt(8.0))

    def test_embeddings_need_consistent_widths(self):
        with pytest.raises(ValueError, match="input width"):
            mlp_init([4, 8, 2], "tanh", RngStream(0, "init"), n_classes=3, embed_dim=5)

    def test_bad_activation(self):
        with pytest.raises(ValueError, match="activation"):
            mlp_init([3, 2], "sigmoid", RngStream(0, "init"))

    def test_null_embedding_is_distinct_row(self):
        m = random_velocity_model(5)
        assert not np.shares_memory(m.null_embedding, m.class_embeddings)
        for k in range(m.n_classes):
            assert not np.array_equal(m.null_embedding, m.class_embeddings[k])


class TestMlpForward:
    def test_zero_model_maps_to_zero(self):
        m = random_velocity_model(1)
        for p in m.params():
            p[:] = 0.0
        v = mlp_forward(m, np.array([0.3, -2.0, 1.0, 0.5]), 0.7, 2)
        assert np.array_equal(v, np.zeros(4))

    def test_cond_and_null_outputs_differ(self):
        m = random_velocity_model(2)
        x = np.array([0.1, 0.2, -0.4, 1.3])
        v_c = mlp_forward(m, x, 0.5, 0)
        v_n = mlp_forward(m, x, 0.5, None)
        assert not np.allclose(v_c, v_n)

    def test_single_linear_layer_identity(self):
        # W acts on [x | t]; zero t column leaves W_x @ x
        W = np.array([[1.0, 2.0, 0.0], [3.0, -1.0, 0.0]])
        m = linear_model(W)
        x = np.array([0.5, -1.5])
        v = mlp_forward(m, x, 0.9, None)
        assert np.allclose(v, W[:, :2] @ x, atol=0, rtol=0)

    def test_class_id_out_of_range(self):
        m = random_velocity_model(3)
        x = np.zeros(4)
        with pytest.raises(ValueError, match="class id"):
            mlp_forward(m, x, 0.5, 3)

    def test_t_outside_unit_interval(self):
        m = random_velocity_model(3)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            mlp_forward(m, np.zeros(4), 1.5, 0)

    def test_wrong_input_dim(self):
        m = random_velocity_model(3)
        with pytest.raises(ValueError, match="dim"):
            mlp_forward(m, np.zeros(3), 0.5, 0)

    def test_nonfinite_output_raises(self):
        m = random_velocity_model(4)
        for w in m.weights:
            w[:] = 1e308
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(FloatingPointError):
                mlp_forward(m, np.full(4, 1e30), 0.5, 0)


class TestMlpGrad:
    def test_zero_upstream_zero_grads(self):
        m = random_velocity_model(6)
        g = mlp_grad(m, np.array([0.4, 0.1, -0.2, 0.9]), 0.3, 1, np.zeros(4))
        for arr in g.params():
            assert np.array_equal(arr, np.zeros_like(arr))

    def test_only_selected_embedding_row_gets_gradient(self):
        m = random_velocity_model(7)
        x = np.array([0.4, 0.1, -0.2, 0.9])
        g = mlp_grad(m, x, 0.3, 2, np.ones(4))
        row_norms = np.abs(g.class_embeddings).sum(axis=1)
        assert row_norms[2] > 0
        assert np.all(row_norms[[0, 1]] == 0.0)
        assert np.all(g.null_embedding == 0.0)
        g_null = mlp_grad(m, x, 0.3, None, np.ones(4))
        assert np.all(np.abs(g_null.class_embeddings) == 0.0)
        assert np.abs(g_null.null_embedding).sum() > 0

    def test_upstream_shape_mismatch(self):
        m = random_velocity_model(8)
        with pytest.raises(ValueError, match="upstream"):
            mlp_grad(m, np.zeros(4), 0.5, 0, np.zeros(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        m = random_velocity_model(seed, data_dim=2, hidden=(8, 8), embed_dim=1)
        x = rng.normal(size=2)
        t = float(rng.uniform())
        cond = int(rng.integers(0, 3)) if seed % 2 == 0 else None
        upstream = rng.normal(size=2)
        analytic = mlp_grad(m, x, t, cond, upstream).params()
        numeric = finite_difference_grads(m, x, t, cond, upstream)
        assert max_rel_error(analytic, numeric) < 1e-4

    def test_relu_backward_matches_finite_differences(self):
        # fixed seed chosen so no pre-activation sits near the relu kink
        m = random_velocity_model(12, data_dim=4, hidden=(8,), embed_dim=3,
                                  activation="relu")
        rng = np.random.default_rng(55)
        x = rng.normal(size=4)
        upstream = rng.normal(size=4)
        _, cache = forward_batch(m, x[None, :], 0.37, np.array([1]))
        assert min(np.min(np.abs(p)) for p in cache["pres"]) > 1e-4
        analytic = mlp_grad(m, x, 0.37, 1, upstream).params()
        numeric = finite_difference_grads(m, x, 0.37, 1, upstream)
        assert max_rel_error(analytic, numeric) < 1e-4


class TestAdam:
    def _scalar_setup(self, lr=0.1):
        params = [np.array([1.0])]
        state = AdamState.for_params(params, lr=lr)
        return params, state

    def test_zero_gradient_leaves_parameter(self):
        params, state = self._scalar_setup()
        adam_step(state, params, [np.array([0.0])])
        assert params[0][0] == 1.0
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        # step 1 collapses to -lr * g / (|g| + eps)
        params, state = self._scalar_setup(lr=0.1)
        adam_step(state, params, [np.array([0.5])])
        delta = params[0][0] - 1.0
        assert abs(delta + 0.1) < 1e-7 * 0.1
        assert delta != -0.1  # eps keeps it a hair short of the full step

    def test_deterministic(self):
        p1, s1 = self._scalar_setup()
        p2, s2 = self._scalar_setup()
        for _ in range(5):
            adam_step(s1, p1, [np.array([0.3])])
            adam_step(s2, p2, [np.array([0.3])])
        assert p1[0].tobytes() == p2[0].tobytes()

    def test_nan_gradient_rejected_without_touching_state(self):
        params, state = self._scalar_setup()
        with pytest.raises(ValueError, match="non-finite"):
            adam_step(state, params, [np.array([np.nan])])
        assert params[0][0] == 1.0
        assert state.step_count == 0

    def test_shape_mismatch(self):
        params, state = self._scalar_setup()
        with pytest.raises(ValueError, match="shape"):
            adam_step(state, params, [np.zeros(2)])

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError, match="lr"):
            AdamState.for_params([np.zeros(1)], lr=0.0)
