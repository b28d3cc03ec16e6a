"""Geometric and photometric training augmentations.

World scaling runs BEFORE cost-volume construction (it rescales poses and
ground truth together, leaving projective geometry unchanged); flip and
spatial scale run AFTER construction and are applied identically to the cost
volume, the reference image, and the ground-truth depth map so per-pixel
multiview consistency survives. Everything is a pure function of its inputs
and a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classical_depth import DepthMap
from .cost_volume import CostVolume, Frame
from .dataset_io import parse_key_value_file
from .errors import InvalidFactor
from .geometry import Pose

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class AugmentationConfig:
    depth_scale_min: float = 0.5
    depth_scale_max: float = 1.5
    spatial_scale_min: float = 1.0
    spatial_scale_max: float = 1.2
    flip_probability: float = 0.5
    noise_sigma: float = 0.0
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0
    color_delta: float = 0.0
    seed: int = 0


def load_augmentation_config(path) -> AugmentationConfig:
    """Read an AugmentationConfig from the flat key-value file format."""
    kv = parse_key_value_file(path)
    fields = {k: type(getattr(AugmentationConfig, k))(v) for k, v in kv.items()}
    return AugmentationConfig(**fields)


def scale_world(
    frames: list[Frame], gt: DepthMap, s: float
) -> tuple[list[Frame], DepthMap]:
    """Scale the world by ``s``: pose translations and GT depths multiply by
    ``s``; rotations and images are untouched. Run before volume construction
    (with hypotheses scaled the same way, the cost volume is invariant)."""
    if s <= 0:
        raise InvalidFactor(f"world scale must be positive, got {s}")
    scaled_frames = [
        Frame(f.image, Pose(f.pose.rotation, f.pose.translation * s), f.intrinsics, f.id)
        for f in frames
    ]
    scaled_gt = DepthMap(gt.depths * s, gt.validity)
    return scaled_frames, scaled_gt


def _flip_axis(axis: str) -> int:
    if axis == HORIZONTAL:
        return -1
    if axis == VERTICAL:
        return -2
    raise ValueError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")


def flip_sample(
    volume: CostVolume, reference: np.ndarray, gt: DepthMap, axis: str = HORIZONTAL
) -> tuple[CostVolume, np.ndarray, DepthMap]:
    """Mirror the cost volume, the reference image, and the GT about one axis.

    Horizontal flips reverse x in every depth slice, image channel, and GT
    row identically; the operation is a bitwise involution.
    """
    ax = _flip_axis(axis)
    img_ax = ax - 1 if reference.ndim == 3 else ax  # channel-last images
    flipped_volume = CostVolume(
        np.flip(volume.costs, axis=ax).copy(),
        np.flip(volume.valid_counts, axis=ax).copy(),
        volume.hypotheses,
        volume.reference_id,
    )
    flipped_ref = np.flip(reference, axis=img_ax).copy()
    flipped_gt = DepthMap(np.flip(gt.depths, axis=ax).copy(), np.flip(gt.validity, axis=ax).copy())
    return flipped_volume, flipped_ref, flipped_gt


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize, half-pixel-center (align-corners-false)
    convention, edge-clamped."""
    h, w = image.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    # Interpolate rows, then columns (works for 2-D and channel-last 3-D).
    top = image[y0]
    bot = image[y1]
    wy_shaped = wy.reshape((-1,) + (1,) * (image.ndim - 1))
    mid = top * (1.0 - wy_shaped) + bot * wy_shaped
    left = mid[:, x0]
    right = mid[:, x1]
    wx_shaped = wx.reshape((1, -1) + (1,) * (image.ndim - 2))
    return left * (1.0 - wx_shaped) + right * wx_shaped


def _resize_nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(np.rint(src).astype(np.intp), 0, n_in - 1)


def spatial_scale_sample(
    volume: CostVolume, reference: np.ndarray, gt: DepthMap, factor: float
) -> tuple[CostVolume, np.ndarray, DepthMap]:
    """Zoom the sample by ``factor`` and center-crop back to the original size.

    Costs and the image are resampled bilinearly; GT uses nearest-valid lookup
    so depth values are never blended across discontinuities. Depth VALUES are
    unchanged (the zoom emulates a longer focal length, not a range change).

    Raises:
        InvalidFactor: if factor is outside [1.0, 2.0].
    """
    if not (1.0 <= factor <= 2.0):
        raise InvalidFactor(f"spatial scale factor must be in [1.0, 2.0], got {factor}")
    n, h, w = volume.costs.shape
    out_h = int(round(h * factor))
    out_w = int(round(w * factor))
    r0 = (out_h - h) // 2
    c0 = (out_w - w) // 2

    scaled_costs = np.empty_like(volume.costs)
    for k in range(n):
        scaled_costs[k] = _resize_bilinear(volume.costs[k], out_h, out_w)[r0 : r0 + h, c0 : c0 + w]
    # A zoomed cell counts as observed if its nearest source cell was.
    yi = _resize_nearest_indices(out_h, h)[r0 : r0 + h]
    xi = _resize_nearest_indices(out_w, w)[c0 : c0 + w]
    scaled_counts = volume.valid_counts[:, yi][:, :, xi]

    scaled_ref = _resize_bilinear(reference, out_h, out_w)[r0 : r0 + h, c0 : c0 + w]
    scaled_gt = DepthMap(
        gt.depths[yi][:, xi],
        gt.validity[yi][:, xi],
    )
    return (
        CostVolume(scaled_costs, scaled_counts, volume.hypotheses, volume.reference_id),
        scaled_ref,
        scaled_gt,
    )


def photometric_augment(image: np.ndarray, config: AugmentationConfig, seed: int) -> np.ndarray:
    """Noise, brightness, contrast, and per-channel color jitter; clamped to
    [0, 1] and fully determined by (config, seed)."""
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    channels = img.shape[2]

    brightness = rng.uniform(-config.brightness_delta, config.brightness_delta)
    contrast = 1.0 + rng.uniform(-config.contrast_delta, config.contrast_delta)
    color = 1.0 + rng.uniform(-config.color_delta, config.color_delta, size=channels)
    out = (img - 0.5) * contrast + 0.5 + brightness
    out = out * color
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, size=img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def draw_geometric_params(config: AugmentationConfig, rng: np.random.Generator) -> dict:
    """Sample one set of augmentation decisions (flip axis/scale drawn
    independently per sample)."""
    return {
        "world_scale": rng.uniform(config.depth_scale_min, config.depth_scale_max),
        "flip": bool(rng.random() < config.flip_probability),
        "flip_axis": HORIZONTAL if rng.random() < 0.5 else VERTICAL,
        "spatial_factor": rng.uniform(config.spatial_scale_min, config.spatial_scale_max),
    }
