import struct
import zlib

import numpy as np
import pytest

from dml.analysis import dataset_loss
from dml.model import (
    CheckpointChecksumError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    MlpSpec,
    NetworkParams,
    forward,
    init_mlp,
    load_checkpoint,
    perturb,
    predict_logits,
    save_checkpoint,
)
from dml.tensor import ShapeError


def _spec(seed=1, hidden=(8, 6)):
    return MlpSpec(4, hidden, 3, init_seed=seed)


class TestSpec:
    def test_widths(self):
        assert _spec().widths == [4, 8, 6, 3]

    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=0, hidden_dims=(), num_classes=3),
        dict(input_dim=2, hidden_dims=(), num_classes=1),
        dict(input_dim=2, hidden_dims=(0,), num_classes=3),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MlpSpec(**kwargs)

    def test_params_reject_chain_mismatch(self):
        with pytest.raises(ShapeError):
            NetworkParams(((np.zeros((2, 3)), np.zeros(3)), (np.zeros((4, 2)), np.zeros(2))))


class TestInit:
    def test_deterministic(self):
        assert init_mlp(_spec(7)).equals(init_mlp(_spec(7)))

    def test_seeds_differ_almost_everywhere(self):
        a, b = init_mlp(_spec(1, (64, 64))), init_mlp(_spec(2, (64, 64)))
        wa = np.concatenate([w.ravel() for w, _ in a.layers])
        wb = np.concatenate([w.ravel() for w, _ in b.layers])
        assert np.mean(wa != wb) >= 0.99

    def test_zero_biases_and_he_scale(self):
        p = init_mlp(MlpSpec(200, (300,), 2, init_seed=0))
        w, b = p.layers[0]
        assert np.all(b == 0)
        assert abs(np.std(w) - np.sqrt(2 / 200)) < 0.003

    def test_degenerate_linear(self):
        p = init_mlp(MlpSpec(5, (), 3, init_seed=0))
        assert len(p.layers) == 1 and p.layers[0][0].shape == (5, 3)


class TestForward:
    def test_zero_params_give_zero_logits(self):
        p = NetworkParams(((np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))))
        np.testing.assert_array_equal(predict_logits(p, np.ones((5, 3))), np.zeros((5, 2)))

    def test_one_hot_selects_weight_row(self):
        w = np.arange(12.0).reshape(4, 3)
        p = NetworkParams(((w, np.zeros(3)),))
        np.testing.assert_array_equal(predict_logits(p, np.eye(4)[[2]]), w[[2]])

    def test_matches_extended_precision_evaluator(self):
        # 40-digit straight-line evaluation of this exact network and input
        p = init_mlp(MlpSpec(3, (4,), 2, init_seed=9))
        out = predict_logits(p, np.array([[0.3, -1.2, 0.7]]))
        np.testing.assert_allclose(out[0], [-0.252239325663613, 0.8023419109970866], rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="input_dim"):
            forward(init_mlp(_spec()), np.ones((2, 5)))

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        p = init_mlp(_spec())
        x = rng.normal(size=(10, 4))
        perm = rng.permutation(10)
        np.testing.assert_allclose(predict_logits(p, x[perm]), predict_logits(p, x)[perm], rtol=0, atol=1e-14)


class TestPerturb:
    def test_zero_sigma_identity(self):
        p = init_mlp(_spec())
        q = perturb(p, 0.0, 3)
        assert q.equals(p)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            perturb(init_mlp(_spec()), -0.1, 0)

    def test_noise_statistics(self):
        p = init_mlp(MlpSpec(100, (99,), 2, init_seed=0))
        assert p.num_parameters >= 10_000
        q = perturb(p, 0.1, noise_seed=4)
        diff = np.concatenate([(b - a).ravel() for a, b in zip(p.arrays(), q.arrays())])
        assert 0.095 <= np.std(diff) <= 0.105

    def test_deterministic_and_non_mutating(self):
        p = init_mlp(_spec())
        before = [a.copy() for a in p.arrays()]
        assert perturb(p, 0.05, 8).equals(perturb(p, 0.05, 8))
        assert all(np.array_equal(a, b) for a, b in zip(before, p.arrays()))

    def test_relative_scales_by_layer_std(self):
        p = init_mlp(MlpSpec(200, (), 2, init_seed=0))
        q = perturb(p, 0.5, 1, relative=True)
        ratio = np.std(q.layers[0][0] - p.layers[0][0]) / np.std(p.layers[0][0])
        assert 0.45 < ratio < 0.55

    @pytest.mark.parametrize("sigma,tol", [(1e-4, 1e-6), (1e-3, 1e-4)])
    def test_small_sigma_limit(self, sigma, tol):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(20, 4)), rng.integers(0, 3, size=20)
        p = init_mlp(_spec())
        base = dataset_loss(p, x, y)
        mean = np.mean([dataset_loss(perturb(p, sigma, s), x, y) for s in range(1000)])
        assert abs(mean - base) < tol


class TestCheckpoint:
    def test_roundtrip_bit_exact(self):
        p = init_mlp(_spec())
        assert load_checkpoint(save_checkpoint(p)).equals(p)

    def test_layout(self):
        p = NetworkParams(((np.array([[1.0, 2.0]]), np.array([3.0, 4.0])),))
        blob = save_checkpoint(p)
        body = b"DMLC" + bytes([1]) + struct.pack("<III", 1, 1, 2) + struct.pack("<4d", 1, 2, 3, 4)
        assert blob == body + struct.pack("<I", zlib.crc32(body))

    def test_bad_magic(self):
        blob = bytearray(save_checkpoint(init_mlp(_spec())))
        blob[0] ^= 0xFF
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(save_checkpoint(init_mlp(_spec())))
        blob[4] = 2
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(bytes(blob))

    def test_truncated(self):
        blob = save_checkpoint(init_mlp(_spec()))
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(blob[:-20])

    def test_checksum(self):
        blob = bytearray(save_checkpoint(init_mlp(_spec())))
        blob[30] ^= 0x01
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(bytes(blob))

    def test_shape_mismatch_against_spec(self):
        blob = save_checkpoint(init_mlp(_spec(hidden=(8, 6))))
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(blob, _spec(hidden=(8, 5)))
