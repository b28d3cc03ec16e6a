"""Multi-scale loss, reverse-mode gradients, gradient checking, and toy training.

The loss is the sum over scales of the masked mean absolute difference
between predicted inverse depth and ground-truth inverse depth; scales with
no valid ground truth contribute zero. Training runs Adam with seeded
shuffling so identical seeds reproduce identical loss logs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..classical_depth import DepthMap
from ..cost_volume import CostVolume
from ..errors import ShapeMismatch
from . import layers as L
from .graph import (
    INPUT,
    KIND_CONCAT,
    KIND_CONV,
    KIND_SIGMOID,
    KIND_UPSAMPLE,
    MultiScalePrediction,
    NetworkGraph,
    prediction_from_acts,
    run_graph,
    stack_input,
)


def downsample_gt(gt: DepthMap, scale: int) -> DepthMap:
    """Ground truth for scale ``s``: the mean of valid inverse depths inside
    each 2^s x 2^s block; a block with no valid pixel is invalid."""
    if scale == 0:
        return DepthMap(gt.depths.copy(), gt.validity.copy())
    f = 1 << scale
    h, w = gt.shape
    if h % f or w % f:
        raise ShapeMismatch(f"{h}x{w} ground truth not divisible by 2^{scale}")
    inv = gt.inverse().reshape(h // f, f, w // f, f)
    valid = gt.validity.reshape(h // f, f, w // f, f)
    counts = valid.sum(axis=(1, 3))
    sums = (inv * valid).sum(axis=(1, 3))
    block_valid = counts > 0
    mean_inv = np.where(block_valid, sums / np.maximum(counts, 1), 0.0)
    depths = np.where(block_valid, 1.0 / np.where(block_valid, mean_inv, 1.0), 0.0)
    return DepthMap(depths, block_valid)


def build_gt_pyramid(gt: DepthMap) -> list[DepthMap]:
    return [downsample_gt(gt, s) for s in range(4)]


def loss(pred: MultiScalePrediction, gt_pyramid: list[DepthMap]) -> float:
    """Sum over scales of the average L1 error in inverse depth on pixels
    with valid ground truth."""
    total = 0.0
    for s in range(4):
        xi = pred[s]
        gt = gt_pyramid[s]
        if xi.shape != gt.shape:
            raise ShapeMismatch(f"scale {s}: prediction {xi.shape} vs ground truth {gt.shape}")
        n_valid = int(gt.validity.sum())
        if n_valid == 0:
            continue
        total += float(np.abs(xi - gt.inverse())[gt.validity].sum()) / n_valid
    return total


def _loss_gradients(pred: MultiScalePrediction, gt_pyramid: list[DepthMap], dtype) -> list[np.ndarray]:
    grads = []
    for s in range(4):
        xi = pred[s]
        gt = gt_pyramid[s]
        n_valid = int(gt.validity.sum())
        g = np.zeros(xi.shape, dtype=dtype)
        if n_valid:
            g[gt.validity] = np.sign(xi - gt.inverse())[gt.validity] / n_valid
        grads.append(g[None, :, :])  # head activations carry a channel axis
    return grads


def backward(
    net: NetworkGraph,
    reference: np.ndarray,
    volume: CostVolume,
    gt_pyramid: list[DepthMap],
    update_stats: bool = False,
) -> tuple[float, dict[str, dict[str, np.ndarray]]]:
    """Forward + loss + reverse-mode gradients for one sample.

    Returns (loss value, gradients) with the gradient dict mirroring the
    layout of ``net.params`` (only trainable keys present).
    """
    x = stack_input(net, reference, volume)
    acts, caches = run_graph(net, x, training=True, record=True, update_stats=update_stats)
    pred = prediction_from_acts(acts)
    loss_value = loss(pred, gt_pyramid)
    head_grads = _loss_gradients(pred, gt_pyramid, net.dtype)

    grad_acts: dict[str, np.ndarray] = {f"disp{s}": head_grads[s] for s in range(4)}
    param_grads: dict[str, dict[str, np.ndarray]] = {}

    def send(name: str, grad: np.ndarray) -> None:
        if name == INPUT:
            return
        if name in grad_acts:
            grad_acts[name] = grad_acts[name] + grad
        else:
            grad_acts[name] = grad

    for spec in reversed(net.layers):
        dy = grad_acts.pop(spec.name, None)
        if dy is None:
            continue
        if spec.kind == KIND_CONV:
            conv_cache, bn_cache, relu_mask = caches[spec.name]
            g: dict[str, np.ndarray] = {}
            if relu_mask is not None:
                dy = L.relu_backward(dy, relu_mask)
            if bn_cache is not None:
                dy, g["gamma"], g["beta"] = L.batchnorm_backward(dy, bn_cache)
            dx, g["weight"], _ = L.conv2d_backward(dy, conv_cache)
            param_grads[spec.name] = g
            send(spec.inputs[0], dx)
        elif spec.kind == KIND_SIGMOID:
            conv_cache, sig_cache = caches[spec.name]
            dy = L.sigmoid_scaled_backward(dy, sig_cache, net.sigmoid_scale)
            dx, dw, db = L.conv2d_backward(dy, conv_cache)
            param_grads[spec.name] = {"weight": dw, "bias": db}
            send(spec.inputs[0], dx)
        elif spec.kind == KIND_UPSAMPLE:
            send(spec.inputs[0], L.upsample_bilinear_backward(dy, caches[spec.name]))
        elif spec.kind == KIND_CONCAT:
            for name, part in zip(spec.inputs, L.concat_backward(dy, list(caches[spec.name]))):
                send(name, part)

    # Layers whose output never reached a head still need zero gradients so
    # the optimizer state stays aligned.
    for name, key, arr in net.trainable_items():
        param_grads.setdefault(name, {}).setdefault(key, np.zeros_like(arr))
    return loss_value, param_grads


def gradient_check(
    net: NetworkGraph,
    reference: np.ndarray,
    volume: CostVolume,
    gt_pyramid: list[DepthMap],
    n_params: int = 20,
    step: float = 1e-5,
    seed: int = 0,
    jitter: float = 0.05,
) -> tuple[float, list[dict]]:
    """Compare analytic gradients against central finite differences on
    ``n_params`` randomly chosen parameters.

    The check runs at a jittered parameter point: the symmetric
    initialization is a measure-zero configuration where batchnorm over a
    degenerate (1x1) bottleneck emits exactly beta = 0, parking activations
    on the ReLU kink where one-sided subgradients and central differences
    legitimately disagree. ``jitter`` is seeded noise added to every
    trainable tensor for the duration of the check (restored afterward).

    The analytic gradient under test runs at the network's own precision;
    the finite-difference reference always evaluates the loss in float64
    (an oracle must be more precise than the path it checks: single-
    precision loss noise would otherwise swamp the difference quotient).

    Relative error uses |a - n| / max(|a| + |n|, 1e-6) so near-zero gradient
    pairs do not blow up the ratio. Returns (max relative error, per-sample
    records).
    """
    rng = np.random.default_rng(seed)
    saved = [(arr, arr.copy()) for _, _, arr in net.trainable_items()]
    if jitter:
        for _, _, arr in net.trainable_items():
            arr += rng.normal(0.0, jitter, size=arr.shape).astype(net.dtype)
    try:
        return _gradient_check_at_current_point(
            net, reference, volume, gt_pyramid, n_params, step, rng
        )
    finally:
        for arr, original in saved:
            arr[...] = original


def _as_float64(net: NetworkGraph) -> NetworkGraph:
    from .graph import build_network

    clone = build_network(net.n_depth_samples, net.channel_width_scale,
                          net.sigmoid_scale, dtype=np.float64)
    for name, arrays in net.params.items():
        for key, value in arrays.items():
            clone.params[name][key] = value.astype(np.float64)
    return clone


def _gradient_check_at_current_point(
    net: NetworkGraph,
    reference: np.ndarray,
    volume: CostVolume,
    gt_pyramid: list[DepthMap],
    n_params: int,
    step: float,
    rng: np.random.Generator,
) -> tuple[float, list[dict]]:
    _, grads = backward(net, reference, volume, gt_pyramid)

    items = list(net.trainable_items())
    fd_net = net if net.dtype == np.float64 else _as_float64(net)
    fd_items = {(name, key): arr for name, key, arr in fd_net.trainable_items()}
    x = stack_input(fd_net, reference, volume)

    def loss_only() -> float:
        acts, _ = run_graph(fd_net, x, training=True)
        return loss(prediction_from_acts(acts), gt_pyramid)

    records = []
    worst = 0.0
    for _ in range(n_params):
        name, key, arr = items[rng.integers(len(items))]
        flat = fd_items[(name, key)].reshape(-1)
        idx = int(rng.integers(flat.size))
        original = flat[idx]
        flat[idx] = original + step
        loss_plus = loss_only()
        flat[idx] = original - step
        loss_minus = loss_only()
        flat[idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        analytic = float(grads[name][key].reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
        worst = max(worst, rel)
        records.append(
            {"layer": name, "param": key, "index": idx,
             "analytic": analytic, "numeric": numeric, "relative_error": rel}
        )
    return worst, records


@dataclass
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lr_decay_every: int = 0  # 0 disables the step decay
    lr_decay_factor: float = 0.5


@dataclass
class TrainingLog:
    losses: np.ndarray
    learning_rates: np.ndarray
    sample_order: np.ndarray


class AdamState:
    def __init__(self, net: NetworkGraph) -> None:
        self.m: dict[str, dict[str, np.ndarray]] = {}
        self.v: dict[str, dict[str, np.ndarray]] = {}
        for name, key, arr in net.trainable_items():
            self.m.setdefault(name, {})[key] = np.zeros_like(arr)
            self.v.setdefault(name, {})[key] = np.zeros_like(arr)
        self.t = 0

    def step(self, net: NetworkGraph, grads, lr: float, beta1: float, beta2: float, eps: float) -> None:
        self.t += 1
        bias1 = 1.0 - beta1**self.t
        bias2 = 1.0 - beta2**self.t
        for name, key, arr in net.trainable_items():
            g = grads[name][key]
            m = self.m[name][key]
            v = self.v[name][key]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            arr -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


def train_toy(
    net: NetworkGraph,
    dataset: list[tuple[np.ndarray, CostVolume, DepthMap]],
    config: TrainConfig,
) -> TrainingLog:
    """Adam training over (reference, volume, gt) triples, one sample per
    iteration, with seeded reshuffling every epoch.

    The logged loss for an iteration is evaluated before that iteration's
    update. Identical (net seed, config seed, dataset) reproduce identical
    logs bitwise.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    pyramids = [build_gt_pyramid(gt) for _, _, gt in dataset]
    rng = np.random.default_rng(config.seed)
    adam = AdamState(net)

    losses = np.empty(config.iterations)
    rates = np.empty(config.iterations)
    order = np.empty(config.iterations, dtype=np.int64)
    lr = config.learning_rate
    epoch: list[int] = []
    for it in range(config.iterations):
        if not epoch:
            epoch = list(rng.permutation(len(dataset)))
        i = epoch.pop(0)
        if config.lr_decay_every and it > 0 and it % config.lr_decay_every == 0:
            lr *= config.lr_decay_factor
        reference, volume, _ = dataset[i]
        loss_value, grads = backward(net, reference, volume, pyramids[i], update_stats=True)
        adam.step(net, grads, lr, config.beta1, config.beta2, config.adam_eps)
        losses[it] = loss_value
        rates[it] = lr
        order[it] = i
    return TrainingLog(losses, rates, order)
