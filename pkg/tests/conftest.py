"""Shared fixtures: cameras, random pose generation, and oracle scenes."""

import numpy as np
import pytest

from mvdepth.cost_volume import build_cost_volume
from mvdepth.dataset_io import make_plane_scene, render_scene
from mvdepth.geometry import Intrinsics, Pose, rotation_about_axis, sample_inverse_depths


@pytest.fixture
def intr():
    """The spec's worked-example camera: fx=fy=100, cx=160, cy=128, 320x256."""
    return Intrinsics(100.0, 100.0, 160.0, 128.0, 320, 256)


@pytest.fixture
def small_intr():
    return Intrinsics(80.0, 80.0, 31.5, 23.5, 64, 48)


def random_pose(rng: np.random.Generator, max_angle: float = 0.4, max_t: float = 0.5) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle)
    return Pose(rotation_about_axis(axis, angle), rng.uniform(-max_t, max_t, size=3))


@pytest.fixture
def plane_scene(intr):
    """Fronto-parallel smoothed-noise plane 2 m ahead, three poses 0.1 m apart."""
    return make_plane_scene(intr, depth=2.0, n_frames=3, step=(0.1, 0.0, 0.0), seed=11)


@pytest.fixture
def plane_volume(plane_scene):
    """64-hypothesis volume for the fronto plane, reference frame at origin."""
    ref, gt = render_scene(plane_scene, 0)
    m1, _ = render_scene(plane_scene, 1)
    m2, _ = render_scene(plane_scene, 2)
    hyp = sample_inverse_depths(0.5, 50.0, 64)
    return build_cost_volume(ref, [m1, m2], hyp), ref, gt
