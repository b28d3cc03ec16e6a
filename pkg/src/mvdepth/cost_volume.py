"""Plane-sweep cost volume construction.

A cost volume holds, for every pixel of the reference frame and every depth
hypothesis, the mean absolute intensity difference against the measurement
frames, computed by warping the reference pixel into each measurement image
with the per-depth homography and sampling bilinearly.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMeasurementSet, FormatError, ShapeMismatch
from .geometry import DepthHypotheses, Intrinsics, Pose, relative_pose, warp_terms

# Cost assigned to a depth slice in which no pixel at all found a valid
# sample (otherwise the slice's own maximum valid cost is used).
NO_EVIDENCE_FILL = 1.0


@dataclass(frozen=True)
class Frame:
    """One image with its camera pose (world_from_camera) and intrinsics."""

    image: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    id: str

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3 or img.shape[2] not in (1, 3):
            raise ShapeMismatch(f"image must be HxWx1 or HxWx3, got {img.shape}")
        if img.shape[0] != self.intrinsics.height or img.shape[1] != self.intrinsics.width:
            raise ShapeMismatch(
                f"image {img.shape[1]}x{img.shape[0]} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        object.__setattr__(self, "image", img)

    @property
    def channels(self) -> int:
        return self.image.shape[2]


@dataclass
class CostVolume:
    """Per-pixel matching costs for every depth hypothesis.

    ``costs`` is depth-major (n_samples contiguous HxW planes). Cells where
    ``valid_counts`` is zero carry a fill value (the maximum valid cost of
    their slice, or ``NO_EVIDENCE_FILL`` for an entirely invalid slice); the
    counts array is the only record of which cells saw real evidence.
    """

    costs: np.ndarray
    valid_counts: np.ndarray
    hypotheses: DepthHypotheses
    reference_id: str = ""

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.costs.shape


def sample_bilinear(image: np.ndarray, pixel) -> np.ndarray | None:
    """Bilinearly interpolate one sub-pixel location.

    Returns the C-vector of interpolated channel values, or None when the
    pixel lies outside [0, W-1] x [0, H-1].
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    uv = np.asarray(pixel, dtype=np.float64).reshape(1, 2)
    values, valid = sample_bilinear_field(img, uv)
    if not valid[0]:
        return None
    return values[0]


def sample_bilinear_field(image: np.ndarray, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear sampling.

    Args:
        image: HxWxC array.
        pixels: (..., 2) array of (u, v) coordinates; NaNs are invalid.

    Returns:
        (values (..., C), valid (...,)) where invalid locations hold zeros.
    """
    h, w = image.shape[:2]
    uv = np.asarray(pixels, dtype=np.float64)
    u = uv[..., 0]
    v = uv[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)

    # Clamp the base index to w-2 so u == w-1 lands on the last cell with
    # weight exactly 1 on its right edge; grid points stay exact.
    x0 = np.minimum(np.floor(u).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = u - x0
    wy = v - y0

    i00 = image[y0, x0]
    i01 = image[y0, x1]
    i10 = image[y1, x0]
    i11 = image[y1, x1]
    wx = wx[..., None]
    wy = wy[..., None]
    values = (
        (1.0 - wy) * ((1.0 - wx) * i00 + wx * i01)
        + wy * ((1.0 - wx) * i10 + wx * i11)
    )
    values = np.where(valid[..., None], values, 0.0)
    return values, valid


class _SliceSampler:
    """Shared hot loop for per-depth warp-and-compare against one measurement.

    Precomputes flat per-channel float64 images, the pixel grid, and the
    depth-independent warp factors once; each depth plane then costs a
    handful of ufunc passes and flat bilinear gathers. ``warp_cost_slice``
    and ``build_cost_volume`` both run through this path, so their costs
    agree bitwise.
    """

    def __init__(self, reference: Frame, measurement: Frame):
        _check_compatible(reference, measurement)
        self.intr = reference.intrinsics
        h, w = self.intr.height, self.intr.width
        self.h, self.w = h, w
        self.rel = relative_pose(measurement.pose, reference.pose)
        self.ref_flat = np.ascontiguousarray(
            reference.image.astype(np.float64).reshape(-1, reference.channels).T
        )
        self.meas_flat = np.ascontiguousarray(
            measurement.image.astype(np.float64).reshape(-1, measurement.channels).T
        )
        u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        self.grid_u = u.ravel()
        self.grid_v = v.ravel()
        # Hoisting the depth-independent warp factors keeps 3x3 BLAS products
        # (and the BLAS thread pool lock) out of the per-depth loop.
        self.rot_term, self.trans_term, self.identity_rel = warp_terms(self.intr, self.rel)

    def cost_at(self, depth: float) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.h, self.w
        u, v = self.grid_u, self.grid_v
        if self.identity_rel:
            p = np.eye(3)
        else:
            p = depth * self.rot_term
            p[:, 2] += self.trans_term
        # Expanded 3x3 homography application (plain ufuncs).
        px = p[0, 0] * u + p[0, 1] * v + p[0, 2]
        py = p[1, 0] * u + p[1, 1] * v + p[1, 2]
        z = p[2, 0] * u + p[2, 1] * v + p[2, 2]
        front = z > 1e-9
        inv_z = np.divide(1.0, z, out=np.zeros_like(z), where=front)
        x = px * inv_z
        y = py * inv_z
        valid = front & (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
        x[~valid] = 0.0
        y[~valid] = 0.0

        x0 = x.astype(np.intp)  # trunc == floor for non-negative coords
        y0 = y.astype(np.intp)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        wx = x - x0
        wy = y - y0
        i00 = y0 * w + x0
        i01 = y0 * w + x1
        i10 = y1 * w + x0
        i11 = y1 * w + x1

        cost = np.zeros(h * w)
        for ref_c, meas_c in zip(self.ref_flat, self.meas_flat):
            top = meas_c.take(i00)
            top += wx * (meas_c.take(i01) - top)
            bot = meas_c.take(i10)
            bot += wx * (meas_c.take(i11) - bot)
            top += wy * (bot - top)
            np.abs(ref_c - top, out=top)
            cost += top
        cost *= 1.0 / len(self.ref_flat)
        cost[~valid] = 0.0
        return cost.reshape(h, w), valid.reshape(h, w)


def warp_cost_slice(
    reference: Frame, measurement: Frame, depth: float
) -> tuple[np.ndarray, np.ndarray]:
    """Absolute-difference cost of one depth plane against one measurement frame.

    Returns:
        (cost HxW float64, mask HxW bool). The mask is False where the warped
        pixel leaves the measurement image or lands behind its camera; cost is
        zero there (callers must consult the mask).
    """
    return _SliceSampler(reference, measurement).cost_at(depth)


def _check_compatible(reference: Frame, measurement: Frame) -> None:
    if reference.image.shape != measurement.image.shape:
        raise ShapeMismatch(
            f"reference image {reference.image.shape} vs measurement {measurement.image.shape}"
        )


def build_cost_volume(
    reference: Frame,
    measurements: list[Frame],
    hyp: DepthHypotheses,
    workers: int = 1,
) -> CostVolume:
    """Fuse measurement frames into an n_samples x H x W cost volume.

    Per cell the cost is the mean absolute difference over the frames whose
    warped sample was valid; ``valid_counts`` records how many contributed.
    Contributors are reduced in frame-id order so the result is independent
    of the measurement list order, and depth slices are independent so any
    worker count produces bitwise-identical volumes.

    Raises:
        EmptyMeasurementSet: if no measurement frames are given.
    """
    if not measurements:
        raise EmptyMeasurementSet("need at least one measurement frame")
    ordered = sorted(measurements, key=lambda f: f.id)
    samplers = [_SliceSampler(reference, frame) for frame in ordered]

    h = reference.intrinsics.height
    w = reference.intrinsics.width
    n = hyp.n_samples
    costs = np.empty((n, h, w), dtype=np.float64)
    counts = np.zeros((n, h, w), dtype=np.int16)
    depths = hyp.depths

    def fill_slice(k: int) -> None:
        cost_sum = np.zeros((h, w), dtype=np.float64)
        count = np.zeros((h, w), dtype=np.int16)
        for sampler in samplers:
            cost, mask = sampler.cost_at(float(depths[k]))
            cost_sum += cost
            count += mask
        valid = count > 0
        with np.errstate(invalid="ignore"):
            mean = np.where(valid, cost_sum / np.maximum(count, 1), 0.0)
        fill = mean[valid].max() if valid.any() else NO_EVIDENCE_FILL
        costs[k] = np.where(valid, mean, fill)
        counts[k] = count

    if workers <= 1:
        for k in range(n):
            fill_slice(k)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_slice, range(n)))

    return CostVolume(costs, counts, hyp, reference_id=reference.id)


_VOLUME_MAGIC = b"MVCV"


def write_volume(volume: CostVolume, path) -> None:
    """Dump costs as little-endian f32 planes with an `MVCV` header, plus a
    sidecar text file listing the sampled inverse depths."""
    path = Path(path)
    n, h, w = volume.costs.shape
    with open(path, "wb") as f:
        f.write(_VOLUME_MAGIC)
        f.write(struct.pack("<III", n, h, w))
        f.write(np.ascontiguousarray(volume.costs, dtype="<f4").tobytes())
    sidecar = Path(str(path) + ".depths.txt")
    lines = [repr(float(x)) for x in volume.hypotheses.inverse_depths]
    sidecar.write_text("\n".join(lines) + "\n")


def read_volume(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an `MVCV` dump; returns (costs float32, inverse depths or None).

    Raises:
        FormatError: on a bad magic, truncated header, or short payload.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != _VOLUME_MAGIC:
        raise FormatError(f"{path} is not an MVCV volume dump")
    n, h, w = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * n * h * w
    if len(raw) < expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    costs = np.frombuffer(raw[16:expected], dtype="<f4").reshape(n, h, w).copy()
    sidecar = Path(str(path) + ".depths.txt")
    inverse_depths = None
    if sidecar.exists():
        inverse_depths = np.array(
            [float(line) for line in sidecar.read_text().split()], dtype=np.float64
        )
    return costs, inverse_depths
