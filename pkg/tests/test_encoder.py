import numpy as np
import pytest

from snipcl import tensor as tn
from snipcl.data import skeleton_layout
from snipcl.encoder import (EncoderConfig, EncoderState, clone_tree, encode, init_encoder,
                            momentum_update, normalized_adjacency, pad_time)
from snipcl.errors import ConfigError, ContractError
from snipcl.tensor import Tensor


def adjacency(J):
    _, edges = skeleton_layout(J)
    return normalized_adjacency(J, edges)


def setup(cfg, seed=0):
    return init_encoder(cfg, np.random.default_rng(seed)), adjacency(cfg.J)


class TestAdjacency:
    def test_symmetric_with_self_loops(self):
        a = adjacency(8)
        np.testing.assert_allclose(a, a.T)
        assert (np.diag(a) > 0).all()
        assert (a >= 0).all() and np.isfinite(a).all()

    def test_normalization(self):
        a = normalized_adjacency(3, [(0, 1), (1, 2)])
        raw = np.eye(3) + np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        d = raw.sum(axis=1)
        np.testing.assert_allclose(a, raw / np.sqrt(np.outer(d, d)))


class TestConfig:
    def test_default_schedule(self):
        cfg = EncoderConfig()
        assert cfg.strides == (1, 2, 2)
        assert cfg.level_lengths(300) == [300, 150, 75]

    def test_mismatched_lengths(self):
        with pytest.raises(ConfigError):
            EncoderConfig(levels=2, channels=(4, 8, 16)).validate()

    def test_zero_stride(self):
        with pytest.raises(ConfigError):
            EncoderConfig(levels=1, channels=(4,), strides=(0,)).validate()


class TestEncode:
    def test_single_level_keeps_length(self):
        cfg = EncoderConfig(levels=1, channels=(6,), strides=(1,), J=5, T=17)
        params, adj = setup(cfg)
        h, inter = encode(np.random.default_rng(1).normal(size=(17, 5, 3)), params, cfg, adj)
        assert h.shape == (17, 6) and len(inter) == 1

    def test_300_frames_three_levels(self):
        cfg = EncoderConfig()
        params, adj = setup(cfg)
        h, inter = encode(np.random.default_rng(2).normal(size=(2, 300, 8, 3)), params, cfg, adj)
        assert [z.shape for z in inter] == [(2, 300, 16), (2, 150, 32), (2, 75, 64)]
        assert h is inter[-1]

    def test_zero_input_gives_zero_features(self):
        cfg = EncoderConfig(T=40)
        params, adj = setup(cfg)
        _, inter = encode(np.zeros((40, 8, 3)), params, cfg, adj)
        for z in inter:
            assert not z.data.any()

    def test_non_divisible_length_is_padded(self):
        cfg = EncoderConfig(strides=(2, 2, 2), T=30)
        params, adj = setup(cfg)
        _, inter = encode(np.random.default_rng(3).normal(size=(30, 8, 3)), params, cfg, adj)
        assert [z.shape[0] for z in inter] == [16, 8, 4]

    def test_pad_time_replicates_edge(self):
        x = np.arange(3 * 2 * 3, dtype=float).reshape(3, 2, 3)
        out = pad_time(x, 4)
        assert out.shape == (4, 2, 3)
        np.testing.assert_array_equal(out[3], x[2])

    def test_wrong_joint_count(self):
        cfg = EncoderConfig(T=8)
        params, adj = setup(cfg)
        with pytest.raises(ContractError):
            encode(np.zeros((8, 5, 3)), params, cfg, adj)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_through_tiny_encoder(self, seed):
        cfg = EncoderConfig(levels=2, channels=(3, 4), strides=(1, 2), kernel_size=3, J=3, T=8)
        params, adj = setup(cfg, seed)
        x = np.random.default_rng(seed + 10).normal(size=(8, 3, 3))
        w = np.random.default_rng(seed + 20).normal(size=(4, 4))

        def f():
            h, _ = encode(x, params, cfg, adj)
            return tn.sum(tn.mul(h, Tensor(w)))

        names = ["enc.0.graph_w", "enc.1.temporal_w", "enc.1.scale"]
        assert tn.grad_check(f, [params[n] for n in names]) <= 1e-4


class TestMomentum:
    def tree(self, value, shape=(2, 3)):
        return {"w": Tensor(np.full(shape, value)), "b": Tensor(np.full(3, value))}

    def test_one_keeps_key(self):
        key = self.tree(0.5)
        momentum_update(self.tree(2.0), key, 1.0)
        assert (key["w"].data == 0.5).all()

    def test_zero_copies_query(self):
        query = {"w": Tensor(np.random.default_rng(0).normal(size=(2, 3)))}
        key = {"w": Tensor(np.zeros((2, 3)))}
        momentum_update(query, key, 0.0)
        assert key["w"].data.tobytes() == query["w"].data.tobytes()

    def test_scalar(self):
        key = self.tree(0.0)
        momentum_update(self.tree(1.0), key, 0.999)
        np.testing.assert_allclose(key["w"].data, 0.001, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            momentum_update(self.tree(1.0), self.tree(0.0, shape=(3, 2)), 0.5)

    def test_name_mismatch(self):
        with pytest.raises(ContractError):
            momentum_update({"a": Tensor(np.zeros(2))}, {"b": Tensor(np.zeros(2))}, 0.5)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            momentum_update(self.tree(1.0), self.tree(0.0), 1.5)

    def test_state_clones_key_without_grad(self):
        cfg = EncoderConfig(T=8)
        params, _ = setup(cfg)
        state = EncoderState(params)
        for name, p in state.key.items():
            assert not p.requires_grad
            assert p.shape == params[name].shape
            assert p.data is not params[name].data

    def test_clone_is_deep(self):
        tree = self.tree(1.0)
        copy = clone_tree(tree)
        copy["w"].data[0, 0] = 5.0
        assert tree["w"].data[0, 0] == 1.0
