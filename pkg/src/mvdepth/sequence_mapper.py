"""Rolling measurement-frame selection and continuous depth-map production.

Frames arrive one at a time with known poses. The first frame is always kept
as a measurement frame; afterwards a frame is kept when its view-angle or
baseline change versus the *last kept* frame crosses a threshold. Once two
measurement frames exist, every incoming frame gets a depth map built from
the latest two (the incoming frame is never its own measurement frame).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .classical_depth import DepthMap, extract
from .cost_volume import Frame, build_cost_volume
from .geometry import DepthHypotheses, Pose

DEFAULT_ANGLE_DEG = 15.0
DEFAULT_BASELINE_M = 0.3

# Absolute slack on the >= threshold comparisons. Pose translations carry
# floating rounding (and text poses ~1e-9 quantization), so a trajectory
# stepping exactly at the threshold would otherwise flicker between
# selecting and skipping on sub-nanometer noise.
THRESHOLD_EPS = 1e-9

Estimator = Callable[[Frame, list[Frame]], DepthMap]


def view_angle(pose_i: Pose, pose_j: Pose) -> float:
    """Angle in degrees between the optical (z) axes of two camera frames.

    theta = arccos((R_ji [0,0,1]^T) . [0,0,1]) with R_ji = R_wj^-1 R_wi; the
    dot product reduces to the (2, 2) entry of the relative rotation and is
    clamped before arccos so roundoff can never produce NaN.
    """
    r_ji = pose_j.rotation.T @ pose_i.rotation
    return float(np.degrees(np.arccos(np.clip(r_ji[2, 2], -1.0, 1.0))))


def baseline(pose_i: Pose, pose_j: Pose) -> float:
    """Euclidean distance between the two camera centers, in meters."""
    return float(np.linalg.norm(pose_i.translation - pose_j.translation))


@dataclass
class SelectionDecision:
    frame_id: str
    selected: bool
    view_angle_deg: float
    baseline_m: float
    estimated: bool


@dataclass
class KeyframeRing:
    """The retained measurement frames, most recent last."""

    capacity: int = 2
    angle_deg: float = DEFAULT_ANGLE_DEG
    baseline_m: float = DEFAULT_BASELINE_M
    frames: list[Frame] = field(default_factory=list)

    def maybe_select(self, frame: Frame) -> SelectionDecision:
        """Admit ``frame`` as a measurement frame if it is the first one, or
        if it moved far enough from the last selected frame."""
        if not self.frames:
            decision = SelectionDecision(frame.id, True, 0.0, 0.0, estimated=False)
        else:
            last = self.frames[-1]
            angle = view_angle(frame.pose, last.pose)
            dist = baseline(frame.pose, last.pose)
            selected = (
                angle >= self.angle_deg - THRESHOLD_EPS
                or dist >= self.baseline_m - THRESHOLD_EPS
            )
            decision = SelectionDecision(frame.id, selected, angle, dist, estimated=False)
        if decision.selected:
            self.frames.append(frame)
            if len(self.frames) > self.capacity:
                del self.frames[: len(self.frames) - self.capacity]
        return decision


def classical_estimator(hyp: DepthHypotheses, workers: int = 1, refine: bool = True) -> Estimator:
    """Estimator backed by winner-take-all extraction from the cost volume."""

    def run(reference: Frame, measurements: list[Frame]) -> DepthMap:
        volume = build_cost_volume(reference, measurements, hyp, workers=workers)
        return extract(volume, refine=refine)

    return run


class SequenceMapper:
    """Single-owner state machine turning an image-pose stream into depth maps."""

    def __init__(
        self,
        estimator: Estimator,
        angle_deg: float = DEFAULT_ANGLE_DEG,
        baseline_m: float = DEFAULT_BASELINE_M,
        capacity: int = 2,
    ) -> None:
        self.ring = KeyframeRing(capacity=capacity, angle_deg=angle_deg, baseline_m=baseline_m)
        self.estimator = estimator
        self.decisions: list[SelectionDecision] = []

    def process_frame(self, frame: Frame) -> Optional[DepthMap]:
        """Estimate a depth map for ``frame`` when two measurement frames
        exist, then consider ``frame`` for selection. Returns None while the
        ring is still warming up."""
        depth_map = None
        if len(self.ring.frames) >= 2:
            depth_map = self.estimator(frame, list(self.ring.frames[-2:]))
        decision = self.ring.maybe_select(frame)
        decision.estimated = depth_map is not None
        self.decisions.append(decision)
        return depth_map
