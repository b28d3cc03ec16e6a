"""Sequence ingestion, depth-map serialization, and the synthetic test scenes.

Input layout follows the TUM RGB-D convention: ``rgb.txt``, ``depth.txt``,
``groundtruth.txt`` (``timestamp tx ty tz qx qy qz qw``), an ``intrinsics.txt``
key-value file, and ``rgb/`` / ``depth/`` image folders. Depth PNGs are 16-bit
with ``meters = raw / scale`` (default scale 5000, raw 0 = invalid).

The synthetic renderer ray-casts textured planes, so every rendered pixel has
an exact analytic depth; it is the independent oracle behind the cost-volume
and extraction tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .classical_depth import DepthMap
from .cost_volume import Frame
from .errors import BitDepthError, DecodeError, EmptyResult, FormatError
from .geometry import Intrinsics, Pose, pose_from_quaternion, rotation_about_axis

TUM_DEPTH_SCALE = 5000.0
DEFAULT_ASSOCIATION_TOLERANCE_S = 0.02


# ---------------------------------------------------------------------------
# Key-value config files


def parse_key_value_file(path) -> dict[str, str]:
    """Parse a flat `key value` text file; '#' starts a comment."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise FormatError(f"{path}: cannot parse line {raw!r}")
        values[parts[0]] = parts[1].strip()
    return values


def load_intrinsics(path) -> Intrinsics:
    kv = parse_key_value_file(path)
    try:
        return Intrinsics(
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
            width=int(kv["width"]),
            height=int(kv["height"]),
        )
    except KeyError as e:
        raise FormatError(f"{path}: missing intrinsics key {e}") from e


def write_intrinsics(intr: Intrinsics, path) -> None:
    Path(path).write_text(
        f"fx {intr.fx!r}\nfy {intr.fy!r}\ncx {intr.cx!r}\ncy {intr.cy!r}\n"
        f"width {intr.width}\nheight {intr.height}\n"
    )


# ---------------------------------------------------------------------------
# TUM sequence parsing and timestamp association


def read_file_list(path) -> list[tuple[float, str]]:
    """Read a TUM `timestamp filename` listing, skipping '#' comments."""
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        entries.append((float(parts[0]), parts[1]))
    return entries


def read_trajectory(path) -> list[tuple[float, Pose]]:
    """Read a TUM groundtruth file: `timestamp tx ty tz qx qy qz qw` rows."""
    poses = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise FormatError(f"{path}: pose row needs 8 fields, got {len(vals)}")
        t = np.array(vals[1:4])
        q = np.array(vals[4:8])
        poses.append((vals[0], pose_from_quaternion(t, q)))
    return poses


def _greedy_match(ts_a: np.ndarray, ts_b: np.ndarray, tolerance: float) -> dict[int, int]:
    """TUM-style association: among all pairs within tolerance, repeatedly take
    the closest pair whose endpoints are both still free."""
    candidates = []
    for i, t in enumerate(ts_a):
        lo = np.searchsorted(ts_b, t - tolerance, side="left")
        hi = np.searchsorted(ts_b, t + tolerance, side="right")
        for j in range(lo, hi):
            candidates.append((abs(t - ts_b[j]), i, j))
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    match: dict[int, int] = {}
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        match[i] = j
        used_a.add(i)
        used_b.add(j)
    return match


@dataclass(frozen=True)
class SequenceEntry:
    timestamp: float
    rgb_path: str
    depth_path: str
    pose: Pose


@dataclass
class SequenceIndex:
    """Time-associated (rgb, depth, pose) triples in timestamp order."""

    entries: list[SequenceEntry]
    dropped_rgb: int = 0
    dropped_depth: int = 0
    dropped_poses: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def associate(
    rgb_list: list[tuple[float, str]],
    depth_list: list[tuple[float, str]],
    pose_list: list[tuple[float, Pose]],
    tolerance_s: float = DEFAULT_ASSOCIATION_TOLERANCE_S,
) -> SequenceIndex:
    """Greedy nearest-timestamp association of the three streams.

    Raises:
        EmptyResult: if no rgb entry finds both a depth image and a pose.
    """
    ts_rgb = np.array([t for t, _ in rgb_list])
    ts_depth = np.array([t for t, _ in depth_list])
    ts_pose = np.array([t for t, _ in pose_list])

    to_depth = _greedy_match(ts_rgb, ts_depth, tolerance_s)
    to_pose = _greedy_match(ts_rgb, ts_pose, tolerance_s)

    entries = []
    for i in range(len(rgb_list)):
        if i in to_depth and i in to_pose:
            entries.append(
                SequenceEntry(
                    timestamp=rgb_list[i][0],
                    rgb_path=rgb_list[i][1],
                    depth_path=depth_list[to_depth[i]][1],
                    pose=pose_list[to_pose[i]][1],
                )
            )
    if not entries:
        raise EmptyResult("no rgb frame could be associated with both depth and pose")
    entries.sort(key=lambda e: e.timestamp)
    used_depth = {to_depth[i] for i in to_depth if i in to_pose}
    used_pose = {to_pose[i] for i in to_pose if i in to_depth}
    return SequenceIndex(
        entries,
        dropped_rgb=len(rgb_list) - len(entries),
        dropped_depth=len(depth_list) - len(used_depth),
        dropped_poses=len(pose_list) - len(used_pose),
    )


def load_sequence(root, tolerance_s: float = DEFAULT_ASSOCIATION_TOLERANCE_S):
    """Load a TUM-layout directory; returns (SequenceIndex, Intrinsics)."""
    root = Path(root)
    index = associate(
        read_file_list(root / "rgb.txt"),
        read_file_list(root / "depth.txt"),
        read_trajectory(root / "groundtruth.txt"),
        tolerance_s,
    )
    return index, load_intrinsics(root / "intrinsics.txt")


def load_frame(root, entry: SequenceEntry, intr: Intrinsics) -> Frame:
    image = load_rgb_png(Path(root) / entry.rgb_path)
    return Frame(image, entry.pose, intr, id=f"{entry.timestamp:.6f}")


# ---------------------------------------------------------------------------
# PNG depth / color IO


def load_rgb_png(path) -> np.ndarray:
    """Load an 8-bit RGB PNG as HxWx3 float32 in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    if img.mode != "RGB":
        raise BitDepthError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.float32) / 255.0


def write_rgb_png(image: np.ndarray, path) -> None:
    """Write HxWx3 (or HxWx1/HxW) floats in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    out = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(out, mode="RGB").save(path)


def load_depth_png(path, scale: float = TUM_DEPTH_SCALE) -> DepthMap:
    """Load a 16-bit grayscale depth PNG; raw 0 marks invalid pixels."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise DecodeError(f"cannot decode {path}: {e}") from e
    if img.mode not in ("I", "I;16", "I;16B", "I;16L"):
        raise BitDepthError(f"{path}: expected 16-bit grayscale, got mode {img.mode!r}")
    raw = np.asarray(img, dtype=np.int64)
    if raw.max(initial=0) > 0xFFFF or raw.min(initial=0) < 0:
        raise BitDepthError(f"{path}: pixel values exceed 16-bit range")
    validity = raw > 0
    depths = raw.astype(np.float64) / scale
    return DepthMap(depths, validity)


def write_depth_png(depth_map: DepthMap, path, scale: float = TUM_DEPTH_SCALE) -> None:
    raw = np.rint(depth_map.depths * scale)
    raw = np.where(depth_map.validity, np.clip(raw, 1, 0xFFFF), 0)
    Image.fromarray(raw.astype(np.uint16)).save(path)


# ---------------------------------------------------------------------------
# PFM IO (grayscale, 32-bit float, NaN = invalid)


def write_pfm(data, path) -> None:
    """Write a 2-D float array or DepthMap as a grayscale little-endian PFM.

    DepthMap invalid pixels are stored as NaN. Rows are written bottom-to-top
    per the format.
    """
    if isinstance(data, DepthMap):
        arr = np.where(data.validity, data.depths, np.nan)
    else:
        arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"PFM writer needs a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM; returns float32 HxW with NaNs preserved.

    Raises:
        FormatError: for color PFMs or malformed headers.
    """
    raw = Path(path).read_bytes()

    def next_token(pos: int) -> tuple[bytes, int]:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PFM header")
        return raw[start:pos], pos

    magic, pos = next_token(0)
    if magic == b"PF":
        raise FormatError(f"{path}: color PFM not supported")
    if magic != b"Pf":
        raise FormatError(f"{path}: not a PFM file")
    wtok, pos = next_token(pos)
    htok, pos = next_token(pos)
    stok, pos = next_token(pos)
    w, h = int(wtok), int(htok)
    scale = float(stok)
    pos += 1  # single whitespace byte after the scale line
    expected = w * h * 4
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def depth_map_from_pfm(path) -> DepthMap:
    data = read_pfm(path).astype(np.float64)
    validity = np.isfinite(data) & (data > 0)
    return DepthMap(np.where(validity, data, 0.0), validity)


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class TexturedPlane:
    """An infinite plane carrying a tiling texture.

    ``origin`` is a world point on the plane; ``axis_u``/``axis_v`` are unit,
    mutually orthogonal in-plane directions. Texture coordinates in texels are
    the in-plane displacement divided by ``texel_size``; the texture wraps.
    """

    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    texture: np.ndarray
    texel_size: float

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)


@dataclass
class SyntheticScene:
    planes: list[TexturedPlane]
    trajectory: list[Pose]
    intrinsics: Intrinsics
    name: str = "scene"


def band_limited_texture(
    size: int, cutoff_cycles: float, channels: int, rng: np.random.Generator,
    low: float = 0.1, high: float = 0.9,
) -> np.ndarray:
    """Tileable smoothed-noise texture with no energy above ``cutoff_cycles``
    per texture period (keeps bilinear sampling error small and predictable)."""
    freqs = np.fft.fftfreq(size, d=1.0 / size)
    fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
    keep = np.sqrt(fx * fx + fy * fy) <= cutoff_cycles
    chans = []
    for _ in range(channels):
        spectrum = np.fft.fft2(rng.standard_normal((size, size)))
        img = np.fft.ifft2(spectrum * keep).real
        lo_v, hi_v = img.min(), img.max()
        chans.append(low + (high - low) * (img - lo_v) / (hi_v - lo_v))
    return np.stack(chans, axis=-1).astype(np.float64)


def striped_texture(size: int, period_texels: float, channels: int,
                    amplitude: float = 0.4) -> np.ndarray:
    """Horizontal sinusoid (repeats along u); deliberately ambiguous texture."""
    x = np.arange(size)
    row = 0.5 + amplitude * np.sin(2.0 * np.pi * x / period_texels)
    tex = np.tile(row, (size, 1))
    return np.repeat(tex[:, :, None], channels, axis=2)


def _wrap_bilinear(texture: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    th, tw = texture.shape[:2]
    x0 = np.floor(a).astype(np.int64)
    y0 = np.floor(b).astype(np.int64)
    wx = (a - x0)[..., None]
    wy = (b - y0)[..., None]
    ix0 = np.mod(x0, tw)
    ix1 = np.mod(x0 + 1, tw)
    iy0 = np.mod(y0, th)
    iy1 = np.mod(y0 + 1, th)
    return (
        (1 - wy) * ((1 - wx) * texture[iy0, ix0] + wx * texture[iy0, ix1])
        + wy * ((1 - wx) * texture[iy1, ix0] + wx * texture[iy1, ix1])
    )


def render_scene(scene: SyntheticScene, frame_index: int) -> tuple[Frame, DepthMap]:
    """Ray-cast one trajectory pose; returns the rendered frame and its exact
    analytic ground-truth depth (invalid where no plane is hit)."""
    intr = scene.intrinsics
    pose = scene.trajectory[frame_index]
    h, w = intr.height, intr.width
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_c = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    dirs_w = dirs_c @ pose.rotation.T
    origin = pose.translation

    channels = scene.planes[0].texture.shape[2]
    depth = np.full((h, w), np.inf)
    image = np.zeros((h, w, channels), dtype=np.float64)
    for plane in scene.planes:
        n = plane.normal
        denom = dirs_w @ n
        num = float(n @ (plane.origin - origin))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        hit = (s > 1e-9) & (s < depth)
        if not hit.any():
            continue
        x_world = origin + s[..., None] * dirs_w
        rel = x_world - plane.origin
        a = (rel @ plane.axis_u) / plane.texel_size
        b = (rel @ plane.axis_v) / plane.texel_size
        color = _wrap_bilinear(plane.texture, a, b)
        image = np.where(hit[..., None], color, image)
        depth = np.where(hit, s, depth)

    validity = np.isfinite(depth)
    gt = DepthMap(np.where(validity, depth, 0.0), validity)
    frame = Frame(image.astype(np.float32), pose, intr, id=f"frame{frame_index:04d}")
    return frame, gt


# Scene factories ------------------------------------------------------------


def linear_trajectory(n_frames: int, step: np.ndarray) -> list[Pose]:
    step = np.asarray(step, dtype=np.float64)
    return [Pose(np.eye(3), i * step) for i in range(n_frames)]


def make_plane_scene(
    intr: Intrinsics,
    depth: float,
    n_frames: int = 3,
    step=(0.1, 0.0, 0.0),
    tilt_deg: float = 0.0,
    seed: int = 0,
    channels: int = 3,
    texture_size: int = 256,
    texture_cutoff: float = 24.0,
    x_offsets: list[float] | None = None,
) -> SyntheticScene:
    """Textured plane at ``depth`` on the optical axis of the first camera,
    optionally tilted about the horizontal image axis, observed from a
    translating trajectory (or from explicit camera ``x_offsets``; putting
    measurement frames on both sides of the reference keeps every reference
    pixel observable at the true depth)."""
    rng = np.random.default_rng(seed)
    texture = band_limited_texture(texture_size, texture_cutoff, channels, rng)
    axis_u = np.array([1.0, 0.0, 0.0])
    axis_v = np.array([0.0, 1.0, 0.0])
    if tilt_deg:
        r = rotation_about_axis([1.0, 0.0, 0.0], np.deg2rad(tilt_deg))
        axis_u = r @ axis_u
        axis_v = r @ axis_v
    # About one texel per image pixel at the nominal depth.
    texel = depth / intr.fx
    plane = TexturedPlane(np.array([0.0, 0.0, depth]), axis_u, axis_v, texture, texel)
    name = "tilted_plane" if tilt_deg else "plane"
    if x_offsets is not None:
        trajectory = [Pose(np.eye(3), np.array([x, 0.0, 0.0])) for x in x_offsets]
    else:
        trajectory = linear_trajectory(n_frames, step)
    return SyntheticScene([plane], trajectory, intr, name=name)


def make_striped_scene(
    intr: Intrinsics,
    depth: float,
    period_px: float,
    n_frames: int = 4,
    step=(0.1, 0.0, 0.0),
    channels: int = 1,
    texture_size: int = 256,
    x_offsets: list[float] | None = None,
) -> SyntheticScene:
    """Fronto-parallel plane with a horizontally periodic stripe texture whose
    period is ``period_px`` image pixels at the nominal depth (used to build
    matching ambiguity on purpose).

    ``x_offsets`` overrides the linear trajectory with explicit camera x
    positions; non-commensurate baselines keep the periodic false matches of
    different views from landing on the same depth hypothesis.
    """
    texel = depth / intr.fx
    texture = striped_texture(texture_size, period_px, channels)
    plane = TexturedPlane(
        np.array([0.0, 0.0, depth]),
        np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]),
        texture,
        texel,
    )
    if x_offsets is not None:
        trajectory = [Pose(np.eye(3), np.array([x, 0.0, 0.0])) for x in x_offsets]
    else:
        trajectory = linear_trajectory(n_frames, step)
    return SyntheticScene([plane], trajectory, intr, name="striped")


# TUM-layout emission --------------------------------------------------------


def quaternion_from_rotation(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (qx, qy, qz, qw), Shepperd's method."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    return np.array([qx, qy, qz, qw])


def write_tum_sequence(
    scene: SyntheticScene, out_dir, fps: float = 30.0, depth_scale: float = TUM_DEPTH_SCALE
) -> None:
    """Render every trajectory pose into a TUM-layout directory."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rgb_rows = []
    depth_rows = []
    pose_rows = []
    for i in range(len(scene.trajectory)):
        frame, gt = render_scene(scene, i)
        t = i / fps
        rgb_name = f"rgb/{t:.6f}.png"
        depth_name = f"depth/{t:.6f}.png"
        write_rgb_png(frame.image, out / rgb_name)
        write_depth_png(gt, out / depth_name, scale=depth_scale)
        rgb_rows.append(f"{t:.6f} {rgb_name}")
        depth_rows.append(f"{t:.6f} {depth_name}")
        q = quaternion_from_rotation(frame.pose.rotation)
        tx, ty, tz = frame.pose.translation
        pose_rows.append(
            f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
        )
    (out / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(rgb_rows) + "\n")
    (out / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_rows) + "\n")
    (out / "groundtruth.txt").write_text(
        "# timestamp tx ty tz qx qy qz qw\n" + "\n".join(pose_rows) + "\n"
    )
    write_intrinsics(scene.intrinsics, out / "intrinsics.txt")


# ---------------------------------------------------------------------------
# Image normalization (shared by cost construction and the network input)


def compute_normalization(images: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over a set of HxWxC images."""
    stacked = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, im.shape[-1]) for im in images])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def normalize_image(image: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((np.asarray(image, dtype=np.float64) - mean) / std).astype(np.float32)
