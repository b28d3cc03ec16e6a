"""Loss, ground-truth pyramids, gradients, Adam training, and checkpoints."""

import numpy as np
import pytest

from mvdepth.classical_depth import DepthMap
from mvdepth.cost_volume import CostVolume
from mvdepth.depthnet import (
    TrainConfig,
    backward,
    build_gt_pyramid,
    build_network,
    downsample_gt,
    forward,
    gradient_check,
    load_checkpoint,
    loss,
    save_checkpoint,
    train_toy,
)
from mvdepth.depthnet.graph import MultiScalePrediction
from mvdepth.geometry import sample_inverse_depths


def _volume(nd, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return CostVolume(
        rng.random((nd, h, w)),
        np.ones((nd, h, w), dtype=np.int16),
        sample_inverse_depths(0.5, 50.0, nd),
    )


def _sample(nd=8, h=32, w=32, seed=0):
    rng = np.random.default_rng(seed)
    ref = rng.random((h, w, 3))
    vol = _volume(nd, h, w, seed)
    gt = DepthMap(rng.uniform(1.0, 8.0, (h, w)), rng.random((h, w)) > 0.15)
    return ref, vol, gt


class TestDownsampleGt:
    def test_uniform_map_every_scale(self):
        gt = DepthMap(np.full((32, 32), 2.5), np.ones((32, 32), bool))
        for s in range(4):
            down = downsample_gt(gt, s)
            assert down.shape == (32 >> s, 32 >> s)
            np.testing.assert_allclose(down.depths, 2.5, rtol=1e-12)
            assert down.validity.all()

    def test_block_mean_in_inverse_space(self):
        # inverse depths (1, 1, 3, 3) average to 2 -> depth 0.5
        depths = np.array([[1.0, 1.0], [1.0 / 3.0, 1.0 / 3.0]])
        gt = DepthMap(depths, np.ones((2, 2), bool))
        down = downsample_gt(gt, 1)
        assert down.depths[0, 0] == pytest.approx(0.5, rel=1e-12)

    def test_single_valid_pixel_carries_block(self):
        depths = np.array([[4.0, 9.0], [9.0, 9.0]])
        validity = np.array([[True, False], [False, False]])
        down = downsample_gt(DepthMap(depths, validity), 1)
        assert down.validity[0, 0]
        assert down.depths[0, 0] == pytest.approx(4.0)

    def test_empty_block_invalid(self):
        gt = DepthMap(np.ones((4, 4)), np.zeros((4, 4), bool))
        down = downsample_gt(gt, 1)
        assert not down.validity.any()


class TestLoss:
    def _prediction_matching(self, pyramid):
        return MultiScalePrediction([p.inverse() for p in pyramid])

    def test_perfect_prediction_zero_loss(self):
        _, _, gt = _sample()
        pyramid = build_gt_pyramid(gt)
        assert loss(self._prediction_matching(pyramid), pyramid) == 0.0

    def test_single_valid_pixel_contributes_its_error(self):
        h = w = 16
        maps = [np.full((h >> s, w >> s), 0.5) for s in range(4)]
        pyramid = []
        for s in range(4):
            validity = np.zeros((h >> s, w >> s), bool)
            depths = np.ones((h >> s, w >> s))
            if s == 0:
                validity[3, 3] = True
            pyramid.append(DepthMap(depths, validity))
        # One valid pixel at scale 0: |0.5 - 1/1| = 0.5; other scales empty.
        assert loss(MultiScalePrediction(maps), pyramid) == pytest.approx(0.5)

    def test_all_invalid_gt_zero_loss(self):
        h = w = 16
        maps = [np.full((h >> s, w >> s), 0.7) for s in range(4)]
        pyramid = [
            DepthMap(np.ones((h >> s, w >> s)), np.zeros((h >> s, w >> s), bool))
            for s in range(4)
        ]
        assert loss(MultiScalePrediction(maps), pyramid) == 0.0


class TestBackward:
    def test_no_valid_gt_gives_exactly_zero_gradients(self):
        net = build_network(8, 0.125, seed=1)
        ref, vol, gt = _sample(seed=1)
        empty = DepthMap(gt.depths, np.zeros_like(gt.validity))
        value, grads = backward(net, ref, vol, build_gt_pyramid(empty))
        assert value == 0.0
        for layer in grads.values():
            for g in layer.values():
                assert not g.any()

    def test_scale_contributions_add_linearly(self):
        # Gradients of the summed multi-scale loss equal the sum of each
        # scale's gradients (backprop is linear in the upstream signal).
        net = build_network(8, 0.125, seed=2)
        ref, vol, gt = _sample(seed=2)
        pyramid = build_gt_pyramid(gt)

        def masked(scales):
            out = []
            for s, p in enumerate(pyramid):
                keep = p.validity if s in scales else np.zeros_like(p.validity)
                out.append(DepthMap(p.depths, keep))
            return out

        _, full = backward(net, ref, vol, pyramid)
        _, lo = backward(net, ref, vol, masked({0, 1}))
        _, hi = backward(net, ref, vol, masked({2, 3}))
        for name in full:
            for key in full[name]:
                np.testing.assert_allclose(
                    full[name][key], lo[name][key] + hi[name][key], atol=1e-12
                )

    def test_gradient_check_small_net(self):
        net = build_network(8, 0.125, seed=3)
        ref, vol, gt = _sample(seed=3)
        worst, records = gradient_check(net, ref, vol, build_gt_pyramid(gt),
                                        n_params=12, step=1e-5, seed=3)
        assert len(records) == 12
        assert worst < 1e-4

    def test_gradient_check_single_precision(self):
        # The f32 analytic gradients are checked against the float64
        # finite-difference oracle at the looser single-precision bound.
        net = build_network(8, 0.125, seed=4, dtype=np.float32)
        ref, vol, gt = _sample(seed=4)
        worst, _ = gradient_check(net, ref, vol, build_gt_pyramid(gt),
                                  n_params=12, step=1e-5, seed=4)
        assert worst < 1e-2


class TestTrainToy:
    def _tiny_dataset(self, n=3):
        out = []
        for i in range(n):
            ref, vol, gt = _sample(nd=8, h=16, w=16, seed=10 + i)
            out.append((ref, vol, gt))
        return out

    def test_zero_learning_rate_keeps_loss_constant(self):
        net = build_network(8, 0.125, seed=4)
        log = train_toy(net, self._tiny_dataset(),
                        TrainConfig(iterations=12, learning_rate=0.0, seed=4))
        per_sample = {}
        for i, sample_idx in enumerate(log.sample_order):
            per_sample.setdefault(int(sample_idx), []).append(log.losses[i])
        for values in per_sample.values():
            assert len(set(values)) == 1

    def test_same_seed_bitwise_identical_logs(self):
        a = train_toy(build_network(8, 0.125, seed=5), self._tiny_dataset(),
                      TrainConfig(iterations=15, seed=9))
        b = train_toy(build_network(8, 0.125, seed=5), self._tiny_dataset(),
                      TrainConfig(iterations=15, seed=9))
        np.testing.assert_array_equal(a.losses, b.losses)
        np.testing.assert_array_equal(a.sample_order, b.sample_order)

    def test_loss_decreases_on_short_run(self):
        net = build_network(8, 0.125, seed=6)
        log = train_toy(net, self._tiny_dataset(),
                        TrainConfig(iterations=120, learning_rate=1e-3, seed=6))
        assert log.losses[-20:].mean() < log.losses[:20].mean()

    def test_lr_step_decay(self):
        net = build_network(8, 0.125, seed=7)
        log = train_toy(net, self._tiny_dataset(),
                        TrainConfig(iterations=10, learning_rate=1e-4, seed=7,
                                    lr_decay_every=4, lr_decay_factor=0.5))
        assert log.learning_rates[0] == 1e-4
        assert log.learning_rates[-1] == pytest.approx(2.5e-5)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_toy(build_network(8, 0.125), [], TrainConfig(iterations=1))


class TestCheckpoint:
    def test_roundtrip_preserves_forward(self, tmp_path):
        net = build_network(8, 0.25, sigmoid_scale=1.7, seed=8)
        ref, vol, _ = _sample(seed=8)
        before = forward(net, ref, vol)
        path = tmp_path / "net.mvdn"
        save_checkpoint(net, path, norm_mean=np.array([0.5, 0.5, 0.5]),
                        norm_std=np.array([0.2, 0.2, 0.2]))
        loaded, extras = load_checkpoint(path)
        assert loaded.n_depth_samples == 8
        assert loaded.sigmoid_scale == pytest.approx(1.7)
        np.testing.assert_allclose(extras["norm.mean"], [0.5, 0.5, 0.5])
        after = forward(loaded, ref, vol)
        for x, y in zip(before.maps, after.maps):
            # parameters pass through f32 storage
            np.testing.assert_allclose(x, y, atol=1e-5)

    def test_header_magic(self, tmp_path):
        net = build_network(8, 0.125, seed=9)
        path = tmp_path / "net.mvdn"
        save_checkpoint(net, path)
        assert path.read_bytes()[:4] == b"MVDN"

    def test_bad_file_rejected(self, tmp_path):
        from mvdepth.errors import FormatError

        path = tmp_path / "junk.mvdn"
        path.write_bytes(b"WHAT" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_checkpoint(path)
