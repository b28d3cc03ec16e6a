"""Winner-take-all depth extraction with sub-sample parabolic refinement.

This extractor is deliberately per-pixel with no spatial regularization so
its output can be checked independently of any learned component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost_volume import CostVolume


@dataclass
class DepthMap:
    """Dense depth in meters plus a per-pixel validity mask.

    Invalid pixels keep whatever placeholder value the producer wrote (never
    trust ``depths`` where ``validity`` is False).
    """

    depths: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.depths.shape != self.validity.shape or self.depths.ndim != 2:
            raise ValueError(
                f"depths {self.depths.shape} and validity {self.validity.shape} must be equal 2-D shapes"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape

    def inverse(self) -> np.ndarray:
        """Inverse depth; zero at invalid pixels."""
        out = np.zeros_like(self.depths)
        np.divide(1.0, self.depths, out=out, where=self.validity & (self.depths > 0))
        return out


def argmin_depth(volume: CostVolume) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel index of the cheapest hypothesis among cells with evidence.

    Cells without contributors are ignored; a pixel with no contributing cell
    at any depth is marked invalid. Ties break toward the smaller index
    (the farther depth).
    """
    masked = np.where(volume.valid_counts > 0, volume.costs, np.inf)
    indices = np.argmin(masked, axis=0).astype(np.int32)
    validity = (volume.valid_counts > 0).any(axis=0)
    return indices, validity


def subsample_refine(volume: CostVolume, indices: np.ndarray) -> DepthMap:
    """Refine winner-take-all indices by a parabola through the three costs
    around each minimum, fitted along the inverse-depth axis.

    The vertex offset is clamped to [-0.5, +0.5] hypothesis steps; boundary
    indices and degenerate (non-convex) fits keep the sampled value.
    """
    costs = volume.costs
    n = costs.shape[0]
    idx = np.asarray(indices, dtype=np.intp)
    validity = (volume.valid_counts > 0).any(axis=0)

    gather = lambda i: np.take_along_axis(costs, i[None, :, :], axis=0)[0]
    c_here = gather(idx)
    c_prev = gather(np.maximum(idx - 1, 0))
    c_next = gather(np.minimum(idx + 1, n - 1))

    denom = c_prev + c_next - 2.0 * c_here
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(denom > 0.0, (c_prev - c_next) / (2.0 * np.maximum(denom, 1e-300)), 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    offset[(idx == 0) | (idx == n - 1)] = 0.0
    offset[~np.isfinite(offset)] = 0.0

    inv = volume.hypotheses.inverse_depths[idx] + offset * volume.hypotheses.step
    depths = np.where(validity, 1.0 / inv, 0.0)
    return DepthMap(depths, validity)


def extract(volume: CostVolume, refine: bool = True) -> DepthMap:
    """Winner-take-all extraction, optionally with sub-sample refinement."""
    indices, validity = argmin_depth(volume)
    if refine:
        return subsample_refine(volume, indices)
    depths = np.where(validity, volume.hypotheses.depths[indices], 0.0)
    return DepthMap(depths, validity)
