import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snipcl import tensor as tn
from snipcl.data import AugmentPolicy, SkeletonSequence, SyntheticConfig, generate_synthetic_dataset, preprocess_sequence
from snipcl.encoder import EncoderConfig
from snipcl.errors import ConfigError, ContractError, DegenerateError, TrainingError
from snipcl.pretrain import (MemoryBank, PretrainConfig, dense_contrastive_loss, dense_project,
                             global_project, info_nce, info_nce_from_similarities, init_pretrain,
                             init_projectors, match_snippets, memory_enqueue,
                             negative_snippet_embedding, pretrain, pretrain_losses, pretrain_step,
                             total_loss, warm_up_banks)
from snipcl.tensor import Tensor

from oracles import fifo_oracle, match_oracle


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def tiny_setup(seed=0, **overrides):
    enc = EncoderConfig(levels=2, channels=(4, 6), strides=(1, 2), kernel_size=3, J=8, T=16)
    cfg = PretrainConfig(bank_size=8, snippets=4, embed_dim=5, batch_size=2, **overrides)
    return enc, cfg, init_pretrain(enc, cfg, seed)


def tiny_sequences(n=6, T=48, seed=0):
    ds = generate_synthetic_dataset(SyntheticConfig(num_sequences=n, T=max(T, 48), seed=seed,
                                                    background_fraction=0.1))
    return [preprocess_sequence(SkeletonSequence(s.joints[:T], s.frame_labels[:T])) for s, _ in ds]


class TestProjection:
    def test_single_frame_pooling(self):
        rng = np.random.default_rng(0)
        params = init_projectors(4, 3, rng)
        h = rng.normal(size=(1, 4))
        z = h[0] @ params["gproj.w"].data + params["gproj.b"].data
        np.testing.assert_allclose(global_project(Tensor(h), params).data, unit(z))

    def test_zero_weights_degenerate(self):
        params = {"gproj.w": Tensor(np.zeros((4, 3))), "gproj.b": Tensor(np.zeros(3))}
        with pytest.raises(DegenerateError):
            global_project(Tensor(np.ones((5, 4))), params)

    def test_identity_map(self):
        h = np.random.default_rng(1).normal(size=(7, 3))
        params = {"gproj.w": Tensor(np.eye(3)), "gproj.b": Tensor(np.zeros(3))}
        np.testing.assert_allclose(global_project(Tensor(h), params).data, unit(h.mean(axis=0)), atol=1e-12)

    def test_dense_shapes_and_identity_pooling(self):
        rng = np.random.default_rng(2)
        params = init_projectors(6, 4, rng)
        h = rng.normal(size=(9, 6))
        for n in range(1, 10):
            s, f = dense_project(Tensor(h), params, n)
            assert s.shape == (n, 4) and f.shape == (n, 6)
            np.testing.assert_allclose(np.linalg.norm(s.data, axis=-1), 1.0, atol=1e-9)
        _, f = dense_project(Tensor(h), params, 9)
        np.testing.assert_array_equal(f.data, h)
        _, f1 = dense_project(Tensor(h), params, 1)
        np.testing.assert_allclose(f1.data[0], h.mean(axis=0), atol=1e-12)

    def test_nineteen_snippets_of_300_frames(self):
        params = init_projectors(2, 2, np.random.default_rng(3))
        params["dproj.b2"] = Tensor(np.ones(2))  # keep embeddings away from zero
        h = np.repeat(np.arange(300.0)[:, None], 2, axis=1)
        _, f = dense_project(Tensor(h), params, 19)
        bins = [((i * 300) // 19, ((i + 1) * 300) // 19) for i in range(19)]
        assert {b - a for a, b in bins} == {15, 16}
        np.testing.assert_allclose(f.data[:, 0], [(a + b - 1) / 2 for a, b in bins])

    def test_too_many_snippets(self):
        params = init_projectors(2, 2, np.random.default_rng(4))
        with pytest.raises(ConfigError):
            dense_project(Tensor(np.ones((3, 2))), params, 4)


class TestMatching:
    def test_identity(self):
        f = np.random.default_rng(0).normal(size=(6, 4))
        np.testing.assert_array_equal(match_snippets(f, f), np.arange(6))

    def test_hand_example(self):
        assert match_snippets(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]))[0] == 1

    def test_ties_go_to_smallest_index(self):
        fk = np.array([[0.0, 1.0], [2.0, 0.0], [4.0, 0.0]])
        assert match_snippets(np.array([[1.0, 0.0]]), fk)[0] == 1

    def test_zero_row(self):
        with pytest.raises(DegenerateError):
            match_snippets(np.zeros((2, 3)), np.ones((2, 3)))

    def test_uses_pooled_features_not_embeddings(self):
        # F favours key 0 while S would favour key 1: the loss must index S with F's j*
        f_q, f_k = np.array([[1.0, 0.0]]), np.array([[1.0, 0.1], [0.0, 1.0]])
        s_q, s_k = unit([[0.0, 1.0]]), unit([[1.0, 0.0], [0.0, 1.0]])
        j = match_snippets(f_q, f_k)
        assert j[0] == 0
        loss = dense_contrastive_loss(Tensor(s_q), s_k, j, unit([[1.0, 1.0]]), 1.0).item()
        expected = -math.log(math.exp(0.0) / (math.exp(0.0) + math.exp(math.sqrt(0.5))))
        assert loss == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 10))
    def test_matches_brute_force(self, seed, n):
        rng = np.random.default_rng(seed)
        fq, fk = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        assert match_snippets(fq, fk).tolist() == match_oracle(fq, fk)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000))
    def test_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        fq, fk = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
        scales = 2.0 ** rng.integers(-4, 5, size=(6, 1))
        np.testing.assert_array_equal(match_snippets(fq, fk), match_snippets(fq, fk * scales))


class TestInfoNCE:
    def test_no_negatives(self):
        a = unit([1.0, 2.0, 2.0])
        assert info_nce(a, unit([0.0, 1.0, 0.0]), [], 0.007).item() == 0.0

    @pytest.mark.parametrize("m", [1, 3, 17])
    def test_equal_similarities(self, m):
        a = np.array([1.0, 0.0, 0.0])
        # every key at the same angle to the anchor
        keys = unit([[0.5, math.cos(t), math.sin(t)] for t in np.linspace(0, 2 * math.pi, m + 1, endpoint=False)])
        loss = info_nce(a, keys[0], keys[1:], 0.007).item()
        assert loss == pytest.approx(math.log(m + 1), abs=1e-9)

    def test_scalar_example(self):
        loss = info_nce(np.array([1.0, 0.0]), np.array([1.0, 0.0]), [np.array([0.0, 1.0])], 1.0).item()
        assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-9)

    def test_stable_at_small_temperature(self):
        a = unit([1.0, 0.0])
        loss = info_nce(a, a, [unit([-1.0, 0.0])], 1e-4).item()
        assert math.isfinite(loss) and loss >= 0.0

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            info_nce(unit([1.0, 0.0]), unit([1.0, 0.0]), [], 0.0)

    def test_requires_unit_vectors(self):
        with pytest.raises(ContractError):
            info_nce(np.array([2.0, 0.0]), unit([1.0, 0.0]), [], 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 8))
    def test_positive_and_permutation_invariant(self, seed, m):
        rng = np.random.default_rng(seed)
        a, p, q = unit(rng.normal(size=4)), unit(rng.normal(size=4)), unit(rng.normal(size=(m, 4)))
        loss = info_nce(a, p, q, 0.1).item()
        assert loss > 0.0
        assert info_nce(a, p, q[rng.permutation(m)], 0.1).item() == pytest.approx(loss, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_in_similarities(self, seed):
        rng = np.random.default_rng(seed)
        pos = Tensor(rng.uniform(-1, 1), requires_grad=True)
        neg = Tensor(rng.uniform(-1, 1, size=4), requires_grad=True)
        h = 1e-6

        def value(dp=0.0, dn=None):
            n = neg.data.copy()
            if dn is not None:
                n[dn] += h
            return info_nce_from_similarities(Tensor(pos.data + dp), Tensor(n), 0.5).item()

        base = value()
        assert (value(dp=h) - base) / h < 0
        for k in range(4):
            assert (value(dn=k) - base) / h > 0


class TestDenseLoss:
    def test_single_snippet_is_info_nce(self):
        rng = np.random.default_rng(0)
        s, k, bank = unit(rng.normal(size=(1, 3))), unit(rng.normal(size=(1, 3))), unit(rng.normal(size=(4, 3)))
        got = dense_contrastive_loss(Tensor(s), k, [0], bank, 0.07).item()
        assert got == pytest.approx(info_nce(s[0], k[0], bank, 0.07).item(), abs=1e-12)

    def test_empty_bank(self):
        s = unit(np.random.default_rng(1).normal(size=(3, 4)))
        assert dense_contrastive_loss(Tensor(s), s, [0, 1, 2], MemoryBank(4, 4), 0.07).item() == 0.0

    def test_two_snippets_hand_oracle(self):
        s_q = np.array([[1.0, 0.0], [0.0, 1.0]])
        s_k = np.array([[0.0, 1.0], [1.0, 0.0]])
        bank = np.array([[-1.0, 0.0], [0.0, -1.0]])
        got = dense_contrastive_loss(Tensor(s_q), s_k, [1, 0], bank, 1.0).item()
        # each snippet: positive sim 1, negatives -1 and 0
        term = -math.log(math.e / (math.e + math.exp(-1.0) + 1.0))
        assert got == pytest.approx(2 * term, abs=1e-12)

    def test_j_star_length(self):
        s = unit(np.ones((3, 2)))
        with pytest.raises(ContractError):
            dense_contrastive_loss(Tensor(s), s, [0, 1], s, 1.0)


class TestTotalLoss:
    def test_lambda_zero(self):
        lg = Tensor(1.25)
        assert total_loss(lg, Tensor(9.0), 0.0) is lg

    def test_arithmetic(self):
        assert total_loss(1.0, 2.0, 0.5) == 2.0

    def test_default_lambda(self):
        assert PretrainConfig().lam == 1.5

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 1.0, -0.1)


class TestNegativeEmbedding:
    def test_single_row(self):
        row = unit([[0.6, 0.8]])
        np.testing.assert_allclose(negative_snippet_embedding(row), row[0])

    def test_antipodal_rows(self):
        assert negative_snippet_embedding(np.array([[1.0, 0.0], [-1.0, 0.0]])) is None

    def test_mean_then_normalize(self):
        out = negative_snippet_embedding(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(out, [math.sqrt(0.5)] * 2)


class TestMemoryBank:
    def test_three_into_two(self):
        bank = memory_enqueue(MemoryBank(2, 2), unit([[1, 0], [0, 1], [1, 1]]))
        np.testing.assert_array_equal(bank.entries(), unit([[0, 1], [1, 1]]))

    def test_empty_batch(self):
        bank = MemoryBank(3, 2)
        memory_enqueue(bank, unit([[1, 0]]))
        before = bank.entries()
        memory_enqueue(bank, np.zeros((0, 2)))
        np.testing.assert_array_equal(bank.entries(), before)

    def test_fill_exactly(self):
        rows = unit(np.random.default_rng(0).normal(size=(4, 3)))
        bank = memory_enqueue(MemoryBank(4, 3), rows)
        assert len(bank) == 4
        np.testing.assert_array_equal(bank.entries(), rows)

    def test_wrong_dim(self):
        with pytest.raises(ContractError):
            memory_enqueue(MemoryBank(4, 3), unit([[1, 0]]))

    def test_rejects_non_unit(self):
        with pytest.raises(ContractError):
            memory_enqueue(MemoryBank(4, 2), np.array([[2.0, 0.0]]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.lists(st.integers(0, 12), min_size=1, max_size=8), st.integers(0, 1000))
    def test_matches_fifo_oracle(self, capacity, sizes, seed):
        rng = np.random.default_rng(seed)
        batches = [unit(rng.normal(size=(n, 3))) if n else np.zeros((0, 3)) for n in sizes]
        bank = MemoryBank(capacity, 3)
        for b in batches:
            bank.enqueue(b)
        expected = fifo_oracle(batches, capacity)
        if expected is None:
            assert len(bank) == 0
        else:
            np.testing.assert_array_equal(bank.entries(), expected)
            assert len(bank) <= capacity
            np.testing.assert_allclose(np.linalg.norm(bank.entries(), axis=1), 1.0, atol=1e-6)


class TestPretrainStep:
    def test_bank_fills_and_step_counts(self):
        _, _, state = tiny_setup()
        seqs = tiny_sequences(T=16)
        stats = pretrain_step(seqs[:2], state, AugmentPolicy(), np.random.default_rng(0))
        assert stats.step == 1 and state.step == 1
        assert stats.bank_size == 2 and stats.dense_bank_size == 2
        assert math.isfinite(stats.l_total)

    def test_frozen_keys_with_unit_momentum(self):
        _, _, state = tiny_setup(key_momentum=1.0)
        before = {k: v.data.tobytes() for k, v in state.params.key.items()}
        seqs = tiny_sequences(T=16)
        for _ in range(3):
            pretrain_step(seqs[:2], state, AugmentPolicy(), np.random.default_rng(1))
        assert before == {k: v.data.tobytes() for k, v in state.params.key.items()}

    def test_keys_get_no_gradient(self):
        _, _, state = tiny_setup()
        seqs = tiny_sequences(T=16)
        warm_up_banks(state, seqs, AugmentPolicy(), np.random.default_rng(2))
        joints = np.stack([s.joints for s in seqs[:2]])
        total, *_ = pretrain_losses(state, joints, joints)
        tn.backward(total)
        assert all(k.grad is None for k in state.params.key.values())
        assert any(q.grad is not None and q.grad.any() for q in state.params.query.values())

    def test_lambda_zero_is_video_level_baseline(self):
        seqs = tiny_sequences(T=16)
        runs = []
        for dense in (True, False):
            _, _, state = tiny_setup(lam=0.0, dense_loss=dense)
            stats = pretrain_step(seqs[:2], state, AugmentPolicy(), np.random.default_rng(3))
            runs.append((stats.l_total, {k: v.data.copy() for k, v in state.params.query.items()}))
        assert runs[0][0] == runs[1][0]
        for name, value in runs[1][1].items():
            np.testing.assert_array_equal(runs[0][1][name], value)

    def test_no_dense_loss_has_no_dense_bank_stats(self):
        _, _, state = tiny_setup(dense_loss=False)
        stats = pretrain_step(tiny_sequences(T=16)[:2], state, AugmentPolicy(), np.random.default_rng(4))
        assert stats.l_dense is None and stats.dense_bank_size is None

    def test_nan_aborts_with_diagnostics(self):
        _, _, state = tiny_setup()
        state.params.query["gproj.w"].data[:] = np.nan
        with pytest.raises(TrainingError, match="non-finite loss at step 1"):
            pretrain_step(tiny_sequences(T=16)[:2], state, AugmentPolicy(), np.random.default_rng(5))

    def test_unequal_lengths(self):
        _, _, state = tiny_setup()
        a, b = tiny_sequences(n=1, T=16)[0], tiny_sequences(n=1, T=48)[0]
        with pytest.raises(ContractError):
            pretrain_step([a, b], state, AugmentPolicy(), np.random.default_rng(6))

    def test_total_loss_gradient_on_tiny_instance(self):
        _, _, state = tiny_setup(tau=0.1)
        seqs = tiny_sequences(T=16)
        warm_up_banks(state, seqs * 2, AugmentPolicy(), np.random.default_rng(7))
        assert len(state.bank) == 8
        rng = np.random.default_rng(8)
        q = np.stack([s.joints for s in seqs[:2]])
        k = q + rng.normal(0, 0.01, size=q.shape)
        names = ["gproj.w", "dproj.w2", "enc.1.temporal_w", "enc.0.graph_b"]
        f = lambda: pretrain_losses(state, q, k)[0]  # noqa: E731
        assert tn.grad_check(f, [state.params.query[n] for n in names]) <= 1e-4

    def test_deterministic_training(self):
        seqs = tiny_sequences(T=16)
        histories = []
        for _ in range(2):
            _, _, state = tiny_setup(epochs=2)
            histories.append([(s.l_global, s.l_dense, s.l_total) for s in pretrain(seqs, state, AugmentPolicy(), 9)])
        assert histories[0] == histories[1]

    def test_warmup_and_clip_validation(self):
        with pytest.raises(ConfigError):
            dataclasses.replace(PretrainConfig(), grad_clip=-1.0).validate()
