"""Loaders, association, PFM/PNG roundtrips, and renderer cross-validation."""

import numpy as np
import pytest

from mvdepth.classical_depth import DepthMap
from mvdepth.cost_volume import sample_bilinear_field
from mvdepth.dataset_io import (
    associate,
    depth_map_from_pfm,
    load_depth_png,
    load_intrinsics,
    load_rgb_png,
    load_sequence,
    make_plane_scene,
    parse_key_value_file,
    quaternion_from_rotation,
    read_pfm,
    read_trajectory,
    render_scene,
    write_depth_png,
    write_pfm,
    write_rgb_png,
    write_tum_sequence,
)
from mvdepth.errors import BitDepthError, EmptyResult, FormatError
from mvdepth.geometry import (
    identity_pose,
    pose_from_quaternion,
    relative_pose,
    rotation_about_axis,
    warp_matrix,
)


class TestKeyValueFiles:
    def test_parse_with_comments(self, tmp_path):
        p = tmp_path / "conf.txt"
        p.write_text("# camera\nfx 100.0\nfy 100.0 # trailing\ncx 160\ncy 128\nwidth 320\nheight 256\n")
        intr = load_intrinsics(p)
        assert intr.fx == 100.0 and intr.width == 320

    def test_missing_key_is_format_error(self, tmp_path):
        p = tmp_path / "conf.txt"
        p.write_text("fx 100\nfy 100\ncx 1\ncy 1\nwidth 4\n")
        with pytest.raises(FormatError):
            load_intrinsics(p)

    def test_unparseable_line(self, tmp_path):
        p = tmp_path / "conf.txt"
        p.write_text("just_one_token\n")
        with pytest.raises(FormatError):
            parse_key_value_file(p)


class TestAssociation:
    def _poses(self, stamps):
        return [(t, identity_pose()) for t in stamps]

    def test_identical_timestamps_fully_match(self):
        stamps = [0.0, 0.1, 0.2, 0.3]
        rgb = [(t, f"rgb/{t}.png") for t in stamps]
        depth = [(t, f"depth/{t}.png") for t in stamps]
        index = associate(rgb, depth, self._poses(stamps))
        assert len(index) == 4
        assert index.dropped_rgb == 0

    def test_small_offsets_within_tolerance(self):
        rgb = [(t, "r") for t in (0.0, 0.1, 0.2)]
        depth = [(t + 0.01, "d") for t in (0.0, 0.1, 0.2)]
        poses = self._poses([t - 0.01 for t in (0.0, 0.1, 0.2)])
        index = associate(rgb, depth, poses, tolerance_s=0.02)
        assert len(index) == 3

    def test_rate_mismatch_matches_slower_stream(self):
        rgb = [(i / 30.0, "r") for i in range(30)]       # 30 Hz for 1 s
        depth = [(i / 10.0, "d") for i in range(10)]     # 10 Hz
        poses = self._poses([i / 30.0 for i in range(30)])
        index = associate(rgb, depth, poses, tolerance_s=0.02)
        assert len(index) == len(depth)

    def test_nothing_matches(self):
        rgb = [(0.0, "r")]
        depth = [(5.0, "d")]
        with pytest.raises(EmptyResult):
            associate(rgb, depth, self._poses([10.0]), tolerance_s=0.02)

    def test_timestamps_strictly_increasing(self):
        stamps = [0.3, 0.0, 0.2, 0.1]
        rgb = [(t, "r") for t in stamps]
        depth = [(t, "d") for t in stamps]
        index = associate(rgb, depth, self._poses(stamps))
        out = [e.timestamp for e in index.entries]
        assert out == sorted(out)


class TestDepthPng:
    def test_scale_and_invalid_zero(self, tmp_path):
        depths = np.array([[1.0, 0.2], [3.0, 2.0]])
        validity = np.array([[True, True], [False, True]])
        path = tmp_path / "d.png"
        write_depth_png(DepthMap(depths, validity), path)
        loaded = load_depth_png(path)
        assert loaded.depths[0, 0] == pytest.approx(1.0)
        assert not loaded.validity[1, 0]
        assert loaded.validity[0, 1]

    def test_roundtrip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(3)
        depths = rng.uniform(0.5, 10.0, (32, 32))
        path = tmp_path / "d.png"
        write_depth_png(DepthMap(depths, np.ones_like(depths, bool)), path)
        loaded = load_depth_png(path)
        assert np.abs(loaded.depths - depths).max() <= 0.5 / 5000.0 + 1e-12

    def test_eight_bit_rejected(self, tmp_path):
        from PIL import Image

        path = tmp_path / "gray8.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(BitDepthError):
            load_depth_png(path)

    def test_rgb_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.random((8, 8, 3)).astype(np.float32)
        path = tmp_path / "c.png"
        write_rgb_png(img, path)
        loaded = load_rgb_png(path)
        assert loaded.shape == (8, 8, 3)
        assert np.abs(loaded - img).max() <= 0.5 / 255.0 + 1e-6

    def test_rgb_loader_rejects_gray(self, tmp_path):
        from PIL import Image

        path = tmp_path / "gray.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(BitDepthError):
            load_rgb_png(path)


class TestPfm:
    def test_roundtrip_bitwise_for_f32(self, tmp_path):
        rng = np.random.default_rng(5)
        data = rng.standard_normal((13, 17)).astype(np.float32)
        path = tmp_path / "m.pfm"
        write_pfm(data, path)
        out = read_pfm(path)
        np.testing.assert_array_equal(out, data)

    def test_nan_marks_invalid_and_survives(self, tmp_path):
        depths = np.array([[1.0, 2.0], [3.0, 4.0]])
        validity = np.array([[True, False], [True, True]])
        path = tmp_path / "m.pfm"
        write_pfm(DepthMap(depths, validity), path)
        raw = read_pfm(path)
        assert np.isnan(raw[0, 1])
        loaded = depth_map_from_pfm(path)
        assert not loaded.validity[0, 1]
        assert loaded.depths[1, 0] == 3.0

    def test_golden_byte_layout(self, tmp_path):
        # 2x2 map, rows stored bottom-to-top, little-endian f32.
        data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        path = tmp_path / "m.pfm"
        write_pfm(data, path)
        raw = path.read_bytes()
        header = b"Pf\n2 2\n-1.0\n"
        assert raw[: len(header)] == header
        expected = np.array([3.0, 4.0, 1.0, 2.0], dtype="<f4").tobytes()
        assert raw[len(header):] == expected

    def test_color_pfm_rejected(self, tmp_path):
        path = tmp_path / "c.pfm"
        path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
        with pytest.raises(FormatError):
            read_pfm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.pfm"
        path.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 10)
        with pytest.raises(FormatError):
            read_pfm(path)


class TestQuaternions:
    def test_matrix_quaternion_roundtrip(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            r = rotation_about_axis(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
            q = quaternion_from_rotation(r)
            p = pose_from_quaternion(np.zeros(3), q)
            np.testing.assert_allclose(p.rotation, r, atol=1e-9)


class TestRenderer:
    def test_fronto_plane_constant_depth(self, intr):
        scene = make_plane_scene(intr, depth=2.0, seed=1)
        _, gt = render_scene(scene, 0)
        assert gt.validity.all()
        np.testing.assert_allclose(gt.depths, 2.0, rtol=0, atol=1e-12)

    def test_tilted_plane_matches_closed_form(self, intr):
        tilt = 25.0
        scene = make_plane_scene(intr, depth=2.0, tilt_deg=tilt, seed=2)
        _, gt = render_scene(scene, 0)
        # Independent derivation: depth = n.(p0) / (n.dir) with dir the pixel ray.
        n = np.array([0.0, -np.sin(np.deg2rad(tilt)), np.cos(np.deg2rad(tilt))])
        u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
        dirs = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, float)], -1)
        expected = (n @ np.array([0.0, 0.0, 2.0])) / (dirs @ n)
        np.testing.assert_allclose(gt.depths[gt.validity], expected[gt.validity], atol=1e-9)

    def test_translated_render_equals_warped_render(self, intr):
        # Render from a second pose and compare against warping the first
        # render with the depth-2 homography: this cross-validates the
        # renderer and the warp on the exact same geometry.
        scene = make_plane_scene(intr, depth=2.0, seed=3, x_offsets=[0.0, 0.1])
        ref_a, _ = render_scene(scene, 0)
        ref_b, _ = render_scene(scene, 1)
        rel = relative_pose(ref_a.pose, ref_b.pose)
        warp = warp_matrix(intr, rel, 2.0)
        u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
        warped_uv, in_front = warp.apply(np.stack([u, v], axis=-1))
        sampled, in_bounds = sample_bilinear_field(ref_a.image, warped_uv)
        mask = in_front & in_bounds
        assert mask.mean() > 0.9
        diff = np.abs(sampled - ref_b.image)[mask]
        assert diff.max() < 1e-5

    def test_deterministic_given_seed(self, intr):
        a, _ = render_scene(make_plane_scene(intr, 2.0, seed=7), 0)
        b, _ = render_scene(make_plane_scene(intr, 2.0, seed=7), 0)
        np.testing.assert_array_equal(a.image, b.image)


class TestTumSequenceRoundtrip:
    def test_write_then_load(self, intr, tmp_path):
        scene = make_plane_scene(intr, depth=2.0, n_frames=4, step=(0.1, 0.0, 0.0), seed=8)
        out = tmp_path / "seq"
        write_tum_sequence(scene, out)
        index, loaded_intr = load_sequence(out)
        assert len(index) == 4
        assert loaded_intr == intr
        # Poses survive the quaternion text roundtrip.
        for i, entry in enumerate(index.entries):
            np.testing.assert_allclose(entry.pose.translation, [0.1 * i, 0.0, 0.0], atol=1e-8)
            np.testing.assert_allclose(entry.pose.rotation, np.eye(3), atol=1e-8)
        # Depth PNGs reproduce the analytic ground truth to quantization.
        gt = load_depth_png(out / index.entries[0].depth_path)
        np.testing.assert_allclose(gt.depths[gt.validity], 2.0, atol=1e-3)

    def test_trajectory_file_parses(self, intr, tmp_path):
        scene = make_plane_scene(intr, depth=2.0, n_frames=2, seed=9)
        out = tmp_path / "seq"
        write_tum_sequence(scene, out)
        poses = read_trajectory(out / "groundtruth.txt")
        assert len(poses) == 2
        assert poses[0][0] == pytest.approx(0.0)
