"""Depth-map error measures and machine-readable reports.

Four measures plus density:

* ``l1_rel``   mean of |d - gt| / gt
* ``l1_inv``   mean of |1/d - 1/gt|
* ``sc_inv``   sqrt(mean z^2 - (mean z)^2) with z = ln d - ln gt
* ``cp_pct``   percent of evaluated pixels with relative error <= 10%
* ``density_pct``  percent of GT-valid pixels that carry a valid prediction

Only pixels valid in both maps are evaluated; sc-inv uses the natural log.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .classical_depth import DepthMap
from .errors import EmptyOverlap, ResolutionMismatch

CP_RELATIVE_THRESHOLD = 0.1


@dataclass
class MetricsReport:
    l1_rel: float
    l1_inv: float
    sc_inv: float
    cp_pct: float
    density_pct: float
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class MetricsAccumulator:
    """Pools pixels from any number of (prediction, GT) map pairs into one report.

    The sc-inv variance uses Welford/Chan merging rather than E[z^2]-E[z]^2,
    which would cancel catastrophically for near-constant log ratios (a
    uniformly scaled prediction must score sc-inv 0, not sqrt of rounding
    noise).
    """

    def __init__(self) -> None:
        self._n = 0
        self._n_gt_valid = 0
        self._sum_rel = 0.0
        self._sum_inv = 0.0
        self._mean_z = 0.0
        self._m2_z = 0.0
        self._n_correct = 0

    def update(self, pred: DepthMap, gt: DepthMap) -> None:
        if pred.shape != gt.shape:
            raise ResolutionMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
        gt_valid = gt.validity & (gt.depths > 0)
        both = gt_valid & pred.validity & (pred.depths > 0)
        self._n_gt_valid += int(gt_valid.sum())
        if not both.any():
            return
        d = pred.depths[both]
        d_hat = gt.depths[both]
        rel = np.abs(d - d_hat) / d_hat
        z = np.log(d) - np.log(d_hat)
        self._sum_rel += float(rel.sum())
        self._sum_inv += float(np.abs(1.0 / d - 1.0 / d_hat).sum())
        self._n_correct += int((rel <= CP_RELATIVE_THRESHOLD).sum())

        n_b = d.size
        mean_b = float(z.mean())
        m2_b = float(((z - mean_b) ** 2).sum())
        total = self._n + n_b
        delta = mean_b - self._mean_z
        self._mean_z += delta * n_b / total
        self._m2_z += m2_b + delta * delta * self._n * n_b / total
        self._n = total

    def report(self) -> MetricsReport:
        if self._n == 0:
            raise EmptyOverlap("no pixel is valid in both prediction and ground truth")
        n = self._n
        return MetricsReport(
            l1_rel=self._sum_rel / n,
            l1_inv=self._sum_inv / n,
            sc_inv=float(np.sqrt(max(self._m2_z / n, 0.0))),
            cp_pct=100.0 * self._n_correct / n,
            density_pct=100.0 * n / self._n_gt_valid if self._n_gt_valid else 0.0,
            n=n,
        )


def evaluate(pred: DepthMap, gt: DepthMap) -> MetricsReport:
    """Compare one prediction against ground truth of the same resolution.

    Raises:
        ResolutionMismatch: if the maps differ in shape.
        EmptyOverlap: if no pixel is valid in both.
    """
    acc = MetricsAccumulator()
    acc.update(pred, gt)
    return acc.report()
