import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgclora.adapters import (
    INIT_STD,
    CgcLoraLayer,
    ExpertBank,
    LoraAdapter,
    cgc_forward,
    expert_param_count,
    init_lora,
    lora_forward,
    split_ranks,
)
from cgclora.autograd import Tensor, grad_check, parameter
from cgclora.exceptions import ConfigurationError, ContractError, DimensionError, TaskNotRegisteredError


def random_layer(rng, ranks, d_in=4, d_out=4, n_common=1, tasks=(0, 1), alpha=2.0):
    bank = ExpertBank.build(d_in, d_out, n_common, list(tasks), ranks, rng)
    for e in bank.experts:
        e.B.data[...] = rng.normal(size=e.B.shape)
        e.A.data[...] = rng.normal(size=e.A.shape)
    return CgcLoraLayer(rng.normal(size=(d_out, d_in)), bank, alpha)


def random_weights(rng, n):
    w = rng.random(n) + 0.1
    return w / w.sum()


class TestInitLora:
    def test_shapes(self):
        ad = init_lora(4, 4, 2, 1.0, seed=0)
        assert ad.A.shape == (2, 4) and ad.B.shape == (4, 2)

    def test_b_zero_and_a_gaussian(self):
        ad = init_lora(64, 32, 16, 1.0, seed=3)
        assert not ad.B.data.any()
        assert abs(ad.A.data.std() - INIT_STD) < 0.002
        assert abs(ad.A.data.mean()) < 0.002

    def test_seed_determinism(self):
        assert init_lora(8, 8, 4, 1.0, seed=5).A.data.tobytes() == init_lora(8, 8, 4, 1.0, seed=5).A.data.tobytes()

    @pytest.mark.parametrize("r", [0, 5])
    def test_rank_bounds(self, r):
        with pytest.raises(ConfigurationError):
            init_lora(4, 6, r, 1.0, seed=0)

    def test_zero_delta(self):
        rng = np.random.default_rng(0)
        W0 = rng.normal(size=(5, 3))
        x = rng.normal(size=(7, 3))
        out = lora_forward(Tensor(x), Tensor(W0), init_lora(3, 5, 2, 4.0, seed=1))
        np.testing.assert_array_equal(out.data, x @ W0.T)


class TestLoraForward:
    def test_hand_value(self):
        ad = LoraAdapter(B=parameter([[1.0], [2.0]]), A=parameter([[3.0, 4.0]]), alpha=1.0)
        out = lora_forward(Tensor([1.0, 1.0]), Tensor(np.zeros((2, 2))), ad)
        assert out.data.tolist() == [7.0, 14.0]

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d_in, d_out, r, alpha = 6, 5, 3, 0.7
        ad = LoraAdapter(B=parameter(rng.normal(size=(d_out, r))), A=parameter(rng.normal(size=(r, d_in))), alpha=alpha)
        W0 = rng.normal(size=(d_out, d_in))
        x = rng.normal(size=d_in)
        expected = (W0 + alpha / r * ad.B.data @ ad.A.data) @ x
        np.testing.assert_allclose(lora_forward(Tensor(x), Tensor(W0), ad).data, expected, rtol=0, atol=1e-12)

    def test_w0_gets_no_gradient(self):
        ad = init_lora(3, 3, 1, 1.0, seed=0)
        W0 = Tensor(np.eye(3), requires_grad=True)
        lora_forward(Tensor(np.ones(3)), W0, ad).sum().backward()
        assert W0.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            lora_forward(Tensor(np.ones(4)), Tensor(np.eye(3)), init_lora(3, 3, 1, 1.0, seed=0))


class TestSplitRanks:
    def test_even(self):
        assert split_ranks(16, 8) == [2] * 8

    def test_overrides(self):
        assert split_ranks(16, 8, [1, 1, 2, 2, 2, 2, 3, 3]) == [1, 1, 2, 2, 2, 2, 3, 3]

    def test_indivisible_names_overrides(self):
        with pytest.raises(ConfigurationError, match="overrides"):
            split_ranks(16, 5)

    @pytest.mark.parametrize("ov", [[2] * 7 + [3], [2] * 7, [0] * 7 + [16]])
    def test_bad_overrides(self, ov):
        with pytest.raises(ConfigurationError):
            split_ranks(16, 8, ov)


class TestParameterCount:
    def test_even_split(self):
        bank = ExpertBank.build(64, 64, 4, [0, 1, 2, 3], [2] * 8, np.random.default_rng(0))
        assert expert_param_count(bank, 64, 64) == 2048 == 16 * 128

    def test_single_expert(self):
        bank = ExpertBank.build(64, 64, 1, [], [16], np.random.default_rng(0))
        assert expert_param_count(bank, 64, 64) == 2048

    def test_uneven(self):
        bank = ExpertBank.build(64, 64, 4, [0, 1, 2, 3], [1, 1, 2, 2, 2, 2, 3, 3], np.random.default_rng(0))
        assert expert_param_count(bank, 64, 64) == 2048

    def test_counts_actual_tensors(self):
        bank = ExpertBank.build(10, 6, 2, [0, 1], [1, 2, 3, 2], np.random.default_rng(0))
        assert sum(p.data.size for p in bank.parameters()) == expert_param_count(bank, 10, 6) == 8 * 16

    def test_ranks_must_match_experts(self):
        with pytest.raises(ConfigurationError):
            ExpertBank.build(4, 4, 2, [0], [1, 1], np.random.default_rng(0))


class TestCgcForward:
    def test_zero_b_gives_base(self):
        rng = np.random.default_rng(0)
        bank = ExpertBank.build(4, 3, 2, [0, 1], [1, 1, 1, 1], rng)
        layer = CgcLoraLayer(rng.normal(size=(3, 4)), bank, 4.0)
        x = rng.normal(size=(2, 4))
        for t in (0, 1):
            out = cgc_forward(Tensor(x), t, layer, [0.2, 0.3, 0.5])
            np.testing.assert_array_equal(out.data, x @ layer.W0.data.T)

    def test_reduces_to_lora(self):
        rng = np.random.default_rng(1)
        bank = ExpertBank.build(5, 4, 1, [], [4], rng)
        bank.common[0].B.data[...] = rng.normal(size=(4, 4))
        layer = CgcLoraLayer(rng.normal(size=(4, 5)), bank, 3.0)
        ad = LoraAdapter(B=bank.common[0].B, A=bank.common[0].A, alpha=3.0)
        x = rng.normal(size=(6, 5))
        np.testing.assert_allclose(
            cgc_forward(Tensor(x), None, layer, [1.0]).data, lora_forward(Tensor(x), layer.W0, ad).data, rtol=0, atol=1e-12
        )

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_materialized_delta(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng, [2, 1, 1])
        w = random_weights(rng, 2)
        x = rng.normal(size=4)
        for t in (0, 1):
            e_c, e_s = layer.bank.common[0], layer.bank.specific[t]
            delta = w[0] * e_c.B.data @ e_c.A.data + w[1] * e_s.B.data @ e_s.A.data
            expected = (layer.W0.data + layer.alpha / 4 * delta) @ x
            np.testing.assert_allclose(cgc_forward(Tensor(x), t, layer, w).data, expected, rtol=0, atol=1e-12)

    def test_scale_uses_total_rank(self):
        rng = np.random.default_rng(0)
        layer = random_layer(rng, [1, 2, 3, 2], n_common=2, tasks=(0, 1), alpha=5.0)
        assert layer.r == 8 and layer.scale == 5.0 / 8

    def test_other_tasks_specific_expert_unused(self):
        rng = np.random.default_rng(2)
        layer = random_layer(rng, [2, 1, 1])
        x = Tensor(rng.normal(size=4))
        before = cgc_forward(x, 0, layer, [0.5, 0.5]).data
        layer.bank.specific[1].B.data[...] += 10.0
        np.testing.assert_array_equal(cgc_forward(x, 0, layer, [0.5, 0.5]).data, before)

    def test_unknown_task(self):
        layer = random_layer(np.random.default_rng(0), [2, 1, 1])
        with pytest.raises(TaskNotRegisteredError):
            cgc_forward(Tensor(np.ones(4)), 7, layer, [0.5, 0.5])

    def test_weight_length(self):
        layer = random_layer(np.random.default_rng(0), [2, 1, 1])
        with pytest.raises(ContractError):
            cgc_forward(Tensor(np.ones(4)), 0, layer, [0.2, 0.3, 0.5])

    def test_expert_shape_checked(self):
        bank = ExpertBank.build(4, 4, 1, [], [2], np.random.default_rng(0))
        with pytest.raises(DimensionError):
            CgcLoraLayer(np.zeros((4, 5)), bank, 1.0)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        layer = random_layer(rng, [2, 1, 1])
        w = parameter(random_weights(rng, 2))
        x = Tensor(rng.normal(size=(3, 4)))
        f = lambda: (cgc_forward(x, 1, layer, w).tanh() ** 2).sum()
        assert grad_check(f, layer.parameters() + [w]) < 1e-4


class TestForwardMixed:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_per_sample_form(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng, [2, 1, 1, 2, 1], n_common=2, tasks=(0, 1, 2))
        table = np.stack([random_weights(rng, 3) for _ in range(3)])
        rows = np.array([2, 0, 0, 1])
        x = rng.normal(size=(4, 5, 4))
        out = layer.forward_mixed(Tensor(x), rows, Tensor(table), [0, 1, 2]).data
        for i, r in enumerate(rows):
            ref = cgc_forward(Tensor(x[i]), r, layer, table[r]).data
            np.testing.assert_allclose(out[i], ref, rtol=0, atol=1e-12)

    def test_foreign_specific_expert_gets_zero_gradient(self):
        rng = np.random.default_rng(0)
        layer = random_layer(rng, [2, 1, 1])
        out = layer.forward_mixed(Tensor(rng.normal(size=(2, 3, 4))), np.array([0, 0]), Tensor([[0.5, 0.5], [0.5, 0.5]]), [0, 1])
        out.sum().backward()
        assert not layer.bank.specific[1].B.grad.any()
        assert not layer.bank.specific[1].A.grad.any()
        assert layer.bank.specific[0].B.grad.any()


@settings(max_examples=40, deadline=None)
@given(
    d_in=st.integers(1, 12),
    d_out=st.integers(1, 12),
    ranks=st.lists(st.integers(1, 6), min_size=2, max_size=6),
    n_tasks=st.integers(0, 1),
)
def test_param_parity_property(d_in, d_out, ranks, n_tasks):
    tasks = list(range(n_tasks))
    bank = ExpertBank.build(d_in, d_out, len(ranks) - n_tasks, tasks, ranks, np.random.default_rng(0))
    count = sum(p.data.size for p in bank.parameters())
    assert count == expert_param_count(bank, d_in, d_out) == sum(ranks) * (d_in + d_out)
