"""SE(3) poses, pinhole camera model, inverse-depth sampling, and per-depth warps.

Conventions used throughout the package:

* A pose stores ``world_from_camera``: ``x_world = R @ x_camera + t``.
* Pixels are ``(u, v) = (column, row)`` with the origin at the top-left
  pixel center; ``u`` grows rightward, ``v`` downward.
* The camera looks along +z; only points with ``z > 0`` project.
* All geometry is computed in float64. Image buffers may be float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRange, NonPositiveDepth

# Points closer to the camera plane than this are treated as invalid
# projections rather than clamped (avoids sign flips during normalization).
MIN_FRONT_DEPTH = 1e-9

_ORTHONORMALITY_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    """Return a read-only float64 copy so value types stay immutable."""
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``world_from_camera`` as rotation matrix + translation.

    The rotation must be orthonormal with determinant +1 (checked to 1e-9
    at construction).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation))
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {self.translation.shape}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > _ORTHONORMALITY_TOL:
            raise ValueError(f"rotation is not orthonormal (max residual {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > _ORTHONORMALITY_TOL:
            raise ValueError(f"rotation determinant {det} != +1")

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (...,3) into the parent (world) frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """The 4x4 homogeneous transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    """Chained transform ``a . b`` (apply b first, then a)."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def relative_pose(world_from_m: Pose, world_from_r: Pose) -> Pose:
    """Transform taking reference-frame points into the measurement frame."""
    return compose(invert(world_from_m), world_from_r)


def pose_from_quaternion(t: np.ndarray, q: np.ndarray) -> Pose:
    """Build a pose from translation and quaternion ``(qx, qy, qz, qw)``.

    The quaternion is normalized before conversion; this is the one place
    quaternion input enters the system (pose-file ingestion).
    """
    qx, qy, qz, qw = np.asarray(q, dtype=np.float64)
    n = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n == 0.0:
        raise ValueError("zero quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    r = np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )
    # Re-orthonormalize: text-file quaternions carry only ~6 digits.
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return Pose(r, t)


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters; no distortion model."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("image size must be at least 1x1")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def k_inverse(self) -> np.ndarray:
        # Closed form; exact up to the two divisions.
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def project(intr: Intrinsics, point: np.ndarray) -> np.ndarray:
    """Project camera-frame point(s) (...,3) to pixel(s) (...,2).

    Raises:
        NonPositiveDepth: if any point has z <= 0.
    """
    pts = np.asarray(point, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    u = intr.fx * pts[..., 0] / z + intr.cx
    v = intr.fy * pts[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(intr: Intrinsics, pixel: np.ndarray, depth) -> np.ndarray:
    """Lift pixel(s) (...,2) at the given depth(s) to camera-frame 3D points.

    Raises:
        NonPositiveDepth: if any depth is <= 0.
    """
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0.0):
        raise NonPositiveDepth("depth must be positive")
    x = (px[..., 0] - intr.cx) * d / intr.fx
    y = (px[..., 1] - intr.cy) * d / intr.fy
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


@dataclass(frozen=True)
class DepthHypotheses:
    """Depth samples placed uniformly in inverse depth.

    ``inverse_depths[i] = (1/d_min - 1/d_max) * i/(n-1) + 1/d_max``, so the
    array ascends from 1/d_max to 1/d_min.
    """

    d_min: float
    d_max: float
    n_samples: int
    inverse_depths: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "inverse_depths", _frozen(self.inverse_depths))

    @property
    def depths(self) -> np.ndarray:
        return 1.0 / self.inverse_depths

    @property
    def step(self) -> float:
        """Inverse-depth spacing between consecutive hypotheses."""
        return (1.0 / self.d_min - 1.0 / self.d_max) / (self.n_samples - 1)

    def scaled(self, s: float) -> "DepthHypotheses":
        """Hypotheses for a world scaled by ``s`` (depths multiply by ``s``)."""
        return sample_inverse_depths(self.d_min * s, self.d_max * s, self.n_samples)


def sample_inverse_depths(d_min: float, d_max: float, n: int) -> DepthHypotheses:
    """Sample ``n`` depth hypotheses uniformly in inverse-depth space.

    Raises:
        InvalidRange: unless 0 < d_min < d_max and n >= 2.
    """
    if not (0.0 < d_min < d_max):
        raise InvalidRange(f"need 0 < d_min < d_max, got [{d_min}, {d_max}]")
    if n < 2:
        raise InvalidRange(f"need at least 2 samples, got {n}")
    # linspace pins both endpoints exactly to 1/d_max and 1/d_min.
    inv = np.linspace(1.0 / d_max, 1.0 / d_min, int(n), dtype=np.float64)
    return DepthHypotheses(float(d_min), float(d_max), int(n), inv)


@dataclass(frozen=True)
class WarpMatrix:
    """3x3 map from homogeneous reference pixels to unnormalized measurement pixels.

    For a reference pixel ``u`` whose backprojection at the construction depth
    lands in front of the measurement camera, normalizing ``P @ [u, v, 1]`` by
    its third component reproduces project(transform(backproject(u, d))).
    The third component *is* the measurement-frame z of the warped point.
    """

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))

    def apply(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Warp pixel(s) (...,2); returns (warped (...,2), in_front mask).

        Warped coordinates are NaN where the point is not in front of the
        measurement camera.
        """
        px = np.asarray(pixels, dtype=np.float64)
        p = self.matrix
        x = p[0, 0] * px[..., 0] + p[0, 1] * px[..., 1] + p[0, 2]
        y = p[1, 0] * px[..., 0] + p[1, 1] * px[..., 1] + p[1, 2]
        z = p[2, 0] * px[..., 0] + p[2, 1] * px[..., 1] + p[2, 2]
        in_front = z > MIN_FRONT_DEPTH
        safe_z = np.where(in_front, z, 1.0)
        u = np.where(in_front, x / safe_z, np.nan)
        v = np.where(in_front, y / safe_z, np.nan)
        return np.stack([u, v], axis=-1), in_front


def warp_terms(intr: Intrinsics, rel: Pose) -> tuple[np.ndarray, np.ndarray, bool]:
    """Depth-independent factors of the warp: ``P(d) = d * A + [0 | 0 | b]``
    with ``A = K R K^-1`` and ``b = K t``. Returns (A, b, is_identity); when
    ``rel`` is exactly the identity the caller should use P = I (the
    normalized warp is scale-free, and skipping the products keeps the
    identity case free of rounding)."""
    identity = bool(np.array_equal(rel.rotation, np.eye(3)) and not rel.translation.any())
    k = intr.k_matrix
    return k @ rel.rotation @ intr.k_inverse, k @ rel.translation, identity


def warp_matrix(intr: Intrinsics, rel: Pose, depth: float) -> WarpMatrix:
    """Homography warping reference pixels onto the measurement image for one
    fronto-parallel depth plane.

    ``P = d * K @ R @ K^-1 + [0 | 0 | K t]`` where ``rel = (R, t)`` maps
    reference-frame points into the measurement frame.

    Raises:
        NonPositiveDepth: if depth <= 0.
    """
    if depth <= 0.0:
        raise NonPositiveDepth("warp plane depth must be positive")
    rot_term, trans_term, identity = warp_terms(intr, rel)
    if identity:
        return WarpMatrix(np.eye(3))
    p = depth * rot_term
    p[:, 2] += trans_term
    return WarpMatrix(p)
