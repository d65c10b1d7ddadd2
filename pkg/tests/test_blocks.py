import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fadingnet import autodiff as ad
from fadingnet.autodiff import Tensor
from fadingnet.blocks import (
    BlockBankNormState,
    MLPBlock,
    block_forward,
    init_block,
    normalize_bank,
    so_penalty,
)
from fadingnet.errors import ConfigError, ContractError, DimensionError

from oracles import bank_norm_oracle, ema, max_rel_err, mlp_oracle, so_penalty_oracle


class TestInitBlock:
    def test_reference_parameter_count(self):
        block = init_block([4, 100, 100, 100, 100, 100, 1], "tanh", seed=0)
        assert block.n_params() == 41001

    def test_biases_start_at_zero(self):
        block = init_block([2, 1], "tanh", seed=3)
        np.testing.assert_array_equal(block.biases[0].values, [0.0])

    def test_same_seed_same_parameters(self):
        a = init_block([4, 8, 1], "relu", seed=42)
        b = init_block([4, 8, 1], "relu", seed=42)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.values, pb.values)

    def test_weight_bound_respected(self):
        block = init_block([16, 8, 1], "tanh", seed=1)
        assert np.all(np.abs(block.weights[0].values) <= np.sqrt(1.0 / 16))

    def test_non_positive_dim_rejected(self):
        with pytest.raises(ConfigError):
            init_block([4, 0, 1], "tanh", seed=0)

    def test_bad_activation_rejected(self):
        with pytest.raises(ConfigError):
            init_block([4, 1], "softsign", seed=0)

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ConfigError):
            init_block([4, 8, 2], "tanh", seed=0)


class TestBlockForward:
    def test_zero_weights_give_output_bias(self):
        block = init_block([4, 3, 1], "tanh", seed=0)
        for w in block.weights:
            w.values = np.zeros_like(w.values)
        block.biases[-1].values = np.array([0.7])
        out = block_forward(block, np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_allclose(out.values, np.full((5, 1), 0.7))

    def test_single_linear_layer_dot_product(self):
        block = MLPBlock([Tensor(np.ones((1, 4)))], [Tensor(np.zeros(1))], "tanh")
        out = block_forward(block, np.array([[1.0, 2.0, 3.0, 4.0]]))
        assert out.values[0, 0] == 10.0

    def test_width_mismatch(self):
        block = init_block([4, 3, 1], "tanh", seed=0)
        with pytest.raises(DimensionError):
            block_forward(block, np.zeros((2, 6)))

    @pytest.mark.parametrize("activation", ["tanh", "relu", "elu", "sigmoid"])
    def test_matches_straight_line_oracle(self, activation):
        block = init_block([4, 6, 5, 1], activation, seed=9)
        window = np.random.default_rng(1).uniform(-2, 2, (7, 4))
        got = block_forward(block, window).values
        want = mlp_oracle(
            [w.values for w in block.weights],
            [b.values for b in block.biases],
            activation,
            window,
        )
        # batched BLAS vs per-row oracle differ only in summation order
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


class TestSOPenalty:
    def test_orthonormal_columns_give_zero(self):
        q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(8, 8)))
        block = MLPBlock([Tensor(q[:, :4])], [Tensor(np.zeros(8))], "tanh")
        assert so_penalty(block).item() < 1e-24

    def test_scaled_identity(self):
        block = MLPBlock(
            [Tensor(2.0 * np.eye(2)), Tensor(np.ones((1, 2)))],
            [Tensor(np.zeros(2)), Tensor(np.zeros(1))],
            "tanh",
        )
        # first layer contributes ||4I - I||_F^2 = 18
        single = MLPBlock([Tensor(np.ones((1, 2)))], [Tensor(np.zeros(1))], "tanh")
        assert so_penalty(block).item() - so_penalty(single).item() == pytest.approx(18.0)

    def test_matches_bruteforce_oracle(self):
        block = init_block([4, 6, 5, 1], "tanh", seed=14)
        got = so_penalty(block).item()
        want = so_penalty_oracle([w.values for w in block.weights])
        assert max_rel_err(got, want) < 1e-12

    @given(seed=st.integers(0, 9999))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        block = init_block([3, 5, 1], "tanh", seed=seed)
        assert so_penalty(block).item() >= 0.0

    def test_zero_iff_orthonormal(self):
        rng = np.random.default_rng(8)
        q1, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        q2, _ = np.linalg.qr(rng.normal(size=(7, 7)))
        # orthonormal columns in every layer: W^T W = I exactly
        block = MLPBlock(
            [Tensor(q1[:, :3]), Tensor(q2[:, :5])],
            [Tensor(np.zeros(5)), Tensor(np.zeros(7))],
            "tanh",
        )
        assert so_penalty(block).item() == pytest.approx(0.0, abs=1e-28)
        block.weights[0].values = block.weights[0].values + 0.05
        assert so_penalty(block).item() > 0.0


class TestNormalizeBank:
    def make_state(self, k=3):
        return BlockBankNormState.create(k)

    def test_constant_column_maps_to_beta(self):
        state = self.make_state(2)
        state.beta.values = np.asarray(0.25)
        raw = np.column_stack([np.full(6, 3.0), np.arange(6.0)])
        out = normalize_bank(Tensor(raw), state, "train").values
        np.testing.assert_allclose(out[:, 0], np.full(6, 0.25))

    def test_train_mode_standardizes(self):
        state = self.make_state(3)
        raw = np.random.default_rng(3).normal(2.0, 5.0, size=(64, 3))
        out = normalize_bank(Tensor(raw), state, "train").values
        assert np.all(np.abs(out.mean(axis=0)) < 1e-12)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)

    def test_running_stats_match_independent_ema(self):
        state = self.make_state(2)
        rng = np.random.default_rng(4)
        batches = [rng.normal(1.5, 2.0, size=(32, 2)) for _ in range(40)]
        for b in batches:
            normalize_bank(Tensor(b), state, "train")
        want_mean = ema([b.mean(axis=0) for b in batches], state.rho, np.zeros(2))
        want_var = ema([b.var(axis=0) for b in batches], state.rho, np.ones(2))
        np.testing.assert_allclose(state.running_mean, want_mean, rtol=1e-12)
        np.testing.assert_allclose(state.running_var, want_var, rtol=1e-12)
        # after many batches the running mean sits within O(rho) of the truth
        assert np.all(np.abs(state.running_mean - 1.5) < 4 * state.rho)

    def test_eval_mode_uses_running_stats_and_is_pure(self):
        state = self.make_state(2)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 9.0])
        raw = np.random.default_rng(5).normal(size=(10, 2))
        out1 = normalize_bank(Tensor(raw), state, "eval").values
        out2 = normalize_bank(Tensor(raw), state, "eval").values
        np.testing.assert_array_equal(out1, out2)
        want = bank_norm_oracle(raw, 1.0, 0.0, state.eps,
                                mean=state.running_mean, var=state.running_var)
        np.testing.assert_allclose(out1, want, rtol=1e-12)

    def test_eval_mode_does_not_touch_running_stats(self):
        state = self.make_state(2)
        before = (state.running_mean.copy(), state.running_var.copy())
        normalize_bank(Tensor(np.random.default_rng(0).normal(size=(8, 2))), state, "eval")
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])

    def test_small_batch_rejected_in_train_mode(self):
        state = self.make_state(2)
        with pytest.raises(ContractError):
            normalize_bank(Tensor(np.ones((1, 2))), state, "train")

    def test_bad_mode_rejected(self):
        state = self.make_state(2)
        with pytest.raises(ContractError):
            normalize_bank(Tensor(np.ones((4, 2))), state, "test")

    def test_column_count_mismatch(self):
        state = self.make_state(3)
        with pytest.raises(DimensionError):
            normalize_bank(Tensor(np.ones((4, 2))), state, "train")

    @pytest.mark.parametrize("scale", [0.1, 10.0])
    def test_scale_invariance_pre_affine(self, scale):
        # identifiability: rescaling all raw outputs leaves the standardized
        # bank unchanged once column variances dominate eps
        state = self.make_state(2)
        state.gamma.values = np.asarray(1.0)
        state.beta.values = np.asarray(0.0)
        raw = np.random.default_rng(6).normal(0.0, 60.0, size=(128, 2))
        base = normalize_bank(Tensor(raw), self.make_state(2), "train").values
        scaled = normalize_bank(Tensor(scale * raw), self.make_state(2), "train").values
        assert np.max(np.abs(base - scaled)) < 1e-6

    def test_matches_oracle_train_mode(self):
        state = self.make_state(3)
        state.gamma.values = np.asarray(1.7)
        state.beta.values = np.asarray(-0.4)
        raw = np.random.default_rng(7).normal(1.0, 2.0, size=(32, 3))
        got = normalize_bank(Tensor(raw), state, "train").values
        want = bank_norm_oracle(raw, 1.7, -0.4, state.eps)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_gradients_flow_through_bank(self):
        from oracles import fd_gradient

        rng = np.random.default_rng(8)
        raw = rng.normal(size=(12, 2))
        # a plain sum of squared standardized values is nearly invariant to
        # the raw inputs; weight entries so the gradient is non-degenerate
        weight = Tensor(rng.normal(size=(12, 2)))
        state = self.make_state(2)
        state.gamma.values = np.asarray(1.3)
        state.beta.values = np.asarray(0.2)

        def build(traw, s):
            return ad.square(ad.mul(normalize_bank(traw, s, "train"), weight)).sum()

        tape = ad.Tape()
        traw = tape.watch(Tensor(raw))
        tape.watch(state.gamma)
        tape.watch(state.beta)
        tape.backward(build(traw, state))

        def f():
            s = BlockBankNormState.create(2)
            s.gamma.values = state.gamma.values
            s.beta.values = state.beta.values
            return float(build(Tensor(raw), s).values)

        fd_raw, fd_gamma, fd_beta = fd_gradient(
            f, [raw, state.gamma.values, state.beta.values]
        )
        assert max_rel_err(traw.grad, fd_raw) < 1e-4
        assert max_rel_err(state.gamma.grad, fd_gamma) < 1e-4
        assert max_rel_err(state.beta.grad, fd_beta) < 1e-4
