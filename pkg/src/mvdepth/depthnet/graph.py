"""Layer graph: construction, parameter initialization, and the forward pass.

The default graph is the full-resolution encoder-decoder with skip
connections: five stride-2 encoder stages, a decoder that upsamples back,
and four inverse-depth heads at scales 1, 1/2, 1/4, 1/8 bounded by a scaled
sigmoid. ``channel_width_scale`` shrinks every internal channel count (the
head channel stays 1), which is what makes desk-scale training and
finite-difference checks affordable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cost_volume import CostVolume
from ..errors import InvalidConfig, ShapeMismatch
from . import layers as L

# Input sizes must be divisible by this for the scale-0..3 heads to land on
# exact power-of-two resolutions (the deepest, fifth stride-2 stage may be
# odd; its upsample targets the skip connection's size).
SIZE_DIVISOR = 16

DEFAULT_SIGMOID_SCALE = 2.0  # = 1/d_min for the default 0.5 m near plane

KIND_CONV = "conv"
KIND_UPSAMPLE = "upsample-bilinear"
KIND_CONCAT = "concat"
KIND_SIGMOID = "sigmoid-scaled"

INPUT = "input"


@dataclass(frozen=True)
class LayerSpec:
    """One node of the network DAG.

    ``conv`` nodes run conv + batchnorm + ReLU (flags may disable the tail);
    ``sigmoid-scaled`` nodes are prediction heads: conv + scaled sigmoid;
    ``upsample-bilinear`` nodes resize to the spatial size of ``size_like``;
    ``concat`` nodes stack their inputs along the channel axis.
    """

    name: str
    kind: str
    inputs: tuple[str, ...]
    kernel: int = 0
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    has_batchnorm: bool = False
    has_relu: bool = False
    size_like: str = ""


def default_layer_specs(n_depth_samples: int, channel_width_scale: float) -> list[LayerSpec]:
    """The standard graph, with channel counts scaled by ``channel_width_scale``."""

    def sc(c: int) -> int:
        return max(1, int(round(c * channel_width_scale)))

    def conv(name, inp, k, s, ci, co):
        return LayerSpec(name, KIND_CONV, (inp,), kernel=k, stride=s, in_channels=ci,
                         out_channels=co, has_batchnorm=True, has_relu=True)

    def head(name, inp, ci):
        return LayerSpec(name, KIND_SIGMOID, (inp,), kernel=3, stride=1, in_channels=ci,
                         out_channels=1)

    def up(name, inp, like):
        return LayerSpec(name, KIND_UPSAMPLE, (inp,), size_like=like)

    def cat(name, inps, channels):
        return LayerSpec(name, KIND_CONCAT, tuple(inps), in_channels=channels,
                         out_channels=channels)

    c64, c128, c256, c512 = sc(64), sc(128), sc(256), sc(512)
    c_in = n_depth_samples + 3
    return [
        conv("conv1", INPUT, 7, 1, c_in, c128),
        conv("conv1_1", "conv1", 7, 2, c128, c128),
        conv("conv2", "conv1_1", 5, 1, c128, c256),
        conv("conv2_1", "conv2", 5, 2, c256, c256),
        conv("conv3", "conv2_1", 3, 1, c256, c512),
        conv("conv3_1", "conv3", 3, 2, c512, c512),
        conv("conv4", "conv3_1", 3, 1, c512, c512),
        conv("conv4_1", "conv4", 3, 2, c512, c512),
        conv("conv5", "conv4_1", 3, 1, c512, c512),
        conv("conv5_1", "conv5", 3, 2, c512, c512),
        up("conv5_up", "conv5_1", "conv4_1"),
        conv("upconv4", "conv5_up", 3, 1, c512, c512),
        cat("iconv4_in", ["upconv4", "conv4_1"], 2 * c512),
        conv("iconv4", "iconv4_in", 3, 1, 2 * c512, c512),
        up("iconv4_up", "iconv4", "conv3_1"),
        conv("upconv3", "iconv4_up", 3, 1, c512, c512),
        cat("iconv3_in", ["upconv3", "conv3_1"], 2 * c512),
        conv("iconv3", "iconv3_in", 3, 1, 2 * c512, c512),
        head("disp3", "iconv3", c512),
        up("iconv3_up", "iconv3", "conv2_1"),
        conv("upconv2", "iconv3_up", 3, 1, c512, c256),
        up("disp3_up", "disp3", "conv2_1"),
        cat("iconv2_in", ["upconv2", "conv2_1", "disp3_up"], 2 * c256 + 1),
        conv("iconv2", "iconv2_in", 3, 1, 2 * c256 + 1, c256),
        head("disp2", "iconv2", c256),
        up("iconv2_up", "iconv2", "conv1_1"),
        conv("upconv1", "iconv2_up", 3, 1, c256, c128),
        up("disp2_up", "disp2", "conv1_1"),
        cat("iconv1_in", ["upconv1", "conv1_1", "disp2_up"], 2 * c128 + 1),
        conv("iconv1", "iconv1_in", 3, 1, 2 * c128 + 1, c128),
        head("disp1", "iconv1", c128),
        up("iconv1_up", "iconv1", INPUT),
        conv("upconv0", "iconv1_up", 3, 1, c128, c64),
        up("disp1_up", "disp1", INPUT),
        cat("iconv0_in", ["upconv0", "disp1_up"], c64 + 1),
        conv("iconv0", "iconv0_in", 3, 1, c64 + 1, c64),
        head("disp0", "iconv0", c64),
    ]


@dataclass
class NetworkGraph:
    """Topologically ordered layer specs plus their parameter arrays.

    ``params[name]`` holds per-layer arrays: ``weight`` (and ``bias`` for
    heads) for convolutions, ``gamma``/``beta``/``running_mean``/
    ``running_var`` for batchnorm.
    """

    layers: list[LayerSpec]
    params: dict[str, dict[str, np.ndarray]]
    n_depth_samples: int
    channel_width_scale: float
    sigmoid_scale: float
    dtype: np.dtype = np.float64

    def parameter_count(self) -> int:
        """Trainable parameters (weights, biases, batchnorm affine)."""
        total = 0
        for arrays in self.params.values():
            for key in ("weight", "bias", "gamma", "beta"):
                if key in arrays:
                    total += arrays[key].size
        return total

    def trainable_items(self):
        """Yield (layer_name, key, array) for every trainable tensor."""
        for spec in self.layers:
            arrays = self.params.get(spec.name, {})
            for key in ("weight", "bias", "gamma", "beta"):
                if key in arrays:
                    yield spec.name, key, arrays[key]


@dataclass
class MultiScalePrediction:
    """Inverse-depth maps at scales 0..3; scale s has resolution input/2^s."""

    maps: list[np.ndarray]

    def __getitem__(self, scale: int) -> np.ndarray:
        return self.maps[scale]

    def full_resolution(self) -> np.ndarray:
        return self.maps[0]


def _validate_specs(specs: list[LayerSpec]) -> None:
    known_channels: dict[str, int] = {}
    seen: set[str] = set()
    for spec in specs:
        for inp in spec.inputs:
            if inp != INPUT and inp not in seen:
                raise InvalidConfig(f"layer {spec.name!r} consumes {inp!r} before it is defined")
        if spec.kind == KIND_UPSAMPLE and spec.size_like != INPUT and spec.size_like not in seen:
            raise InvalidConfig(f"layer {spec.name!r} sizes against undefined {spec.size_like!r}")
        if spec.kind == KIND_CONCAT:
            total = sum(known_channels[i] for i in spec.inputs)
            if total != spec.in_channels:
                raise InvalidConfig(
                    f"concat {spec.name!r} declares {spec.in_channels} channels but inputs sum to {total}"
                )
        if spec.kind in (KIND_CONV, KIND_SIGMOID) and len(spec.inputs) == 1:
            src = spec.inputs[0]
            if src in known_channels and known_channels[src] != spec.in_channels:
                raise InvalidConfig(
                    f"layer {spec.name!r} declares {spec.in_channels} in-channels but "
                    f"{src!r} provides {known_channels[src]}"
                )
        if spec.kind in (KIND_CONV, KIND_SIGMOID, KIND_CONCAT):
            known_channels[spec.name] = spec.out_channels
        elif spec.kind == KIND_UPSAMPLE:
            known_channels[spec.name] = known_channels.get(spec.inputs[0], 0)
        seen.add(spec.name)


def build_network(
    n_depth_samples: int,
    channel_width_scale: float = 1.0,
    sigmoid_scale: float = DEFAULT_SIGMOID_SCALE,
    seed: int = 0,
    dtype=np.float64,
) -> NetworkGraph:
    """Construct the graph and initialize parameters.

    Convolutions use Kaiming fan-in initialization; biases start at zero and
    batchnorm at identity. ``sigmoid_scale`` bounds every predicted inverse
    depth (use 1/d_min of the active hypotheses).

    Raises:
        InvalidConfig: for a non-positive sample count / scale, or if the
            spec table is internally inconsistent.
    """
    if n_depth_samples < 1:
        raise InvalidConfig(f"n_depth_samples must be >= 1, got {n_depth_samples}")
    if channel_width_scale <= 0 or sigmoid_scale <= 0:
        raise InvalidConfig("channel_width_scale and sigmoid_scale must be positive")
    specs = default_layer_specs(n_depth_samples, channel_width_scale)
    _validate_specs(specs)
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    params: dict[str, dict[str, np.ndarray]] = {}
    for spec in specs:
        if spec.kind not in (KIND_CONV, KIND_SIGMOID):
            continue
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
        arrays = {"weight": weight.astype(dtype)}
        if spec.kind == KIND_SIGMOID:
            arrays["bias"] = np.zeros(spec.out_channels, dtype=dtype)
        if spec.has_batchnorm:
            arrays["gamma"] = np.ones(spec.out_channels, dtype=dtype)
            arrays["beta"] = np.zeros(spec.out_channels, dtype=dtype)
            arrays["running_mean"] = np.zeros(spec.out_channels, dtype=dtype)
            arrays["running_var"] = np.ones(spec.out_channels, dtype=dtype)
        params[spec.name] = arrays
    return NetworkGraph(specs, params, n_depth_samples, channel_width_scale,
                        float(sigmoid_scale), dtype)


def stack_input(net: NetworkGraph, reference: np.ndarray, volume: CostVolume) -> np.ndarray:
    """Stack the reference image (3 channels first) with the cost volume into
    the (N_d+3, H, W) network input."""
    ref = np.asarray(reference)
    if ref.ndim != 3 or ref.shape[2] != 3:
        raise ShapeMismatch(f"reference image must be HxWx3, got {ref.shape}")
    h, w = ref.shape[:2]
    if volume.costs.shape[1:] != (h, w):
        raise ShapeMismatch(
            f"cost volume {volume.costs.shape[1:]} does not match image {h}x{w}"
        )
    if volume.costs.shape[0] != net.n_depth_samples:
        raise ShapeMismatch(
            f"network expects {net.n_depth_samples} depth samples, volume has {volume.costs.shape[0]}"
        )
    if h % SIZE_DIVISOR or w % SIZE_DIVISOR:
        raise ShapeMismatch(
            f"input size {w}x{h} must be divisible by {SIZE_DIVISOR}"
        )
    return np.concatenate(
        [np.moveaxis(ref, 2, 0), volume.costs], axis=0
    ).astype(net.dtype)


def run_graph(
    net: NetworkGraph,
    x: np.ndarray,
    training: bool = False,
    record: bool = False,
    update_stats: bool = False,
) -> tuple[dict[str, np.ndarray], dict[str, tuple]]:
    """Execute the graph; returns (activations, caches). Caches are only
    populated when ``record`` is set (needed for the backward pass)."""
    acts: dict[str, np.ndarray] = {INPUT: x}
    caches: dict[str, tuple] = {}
    for spec in net.layers:
        src = [acts[name] for name in spec.inputs]
        if spec.kind == KIND_CONV:
            arrays = net.params[spec.name]
            y, conv_cache = L.conv2d_forward(src[0], arrays["weight"], None, spec.stride)
            bn_cache = relu_mask = None
            if spec.has_batchnorm:
                y, bn_cache = L.batchnorm_forward(
                    y, arrays["gamma"], arrays["beta"],
                    arrays["running_mean"], arrays["running_var"],
                    training=training, update_stats=update_stats,
                )
            if spec.has_relu:
                y, relu_mask = L.relu_forward(y)
            if record:
                caches[spec.name] = (conv_cache, bn_cache, relu_mask)
        elif spec.kind == KIND_SIGMOID:
            arrays = net.params[spec.name]
            pre, conv_cache = L.conv2d_forward(src[0], arrays["weight"], arrays.get("bias"), spec.stride)
            y, sig_cache = L.sigmoid_scaled_forward(pre, net.sigmoid_scale)
            if record:
                caches[spec.name] = (conv_cache, sig_cache)
        elif spec.kind == KIND_UPSAMPLE:
            target = acts[spec.size_like]
            y, up_cache = L.upsample_bilinear_forward(src[0], target.shape[-2], target.shape[-1])
            if record:
                caches[spec.name] = up_cache
        elif spec.kind == KIND_CONCAT:
            y, counts = L.concat_forward(src)
            if record:
                caches[spec.name] = tuple(counts)
        else:
            raise InvalidConfig(f"unknown layer kind {spec.kind!r}")
        acts[spec.name] = y
    return acts, caches


def forward(net: NetworkGraph, reference: np.ndarray, volume: CostVolume) -> MultiScalePrediction:
    """Inference pass; returns inverse-depth maps at scales 0..3.

    Raises:
        ShapeMismatch: if H or W is not divisible by 16 or shapes disagree.
    """
    x = stack_input(net, reference, volume)
    acts, _ = run_graph(net, x, training=False)
    return prediction_from_acts(acts)


def prediction_from_acts(acts: dict[str, np.ndarray]) -> MultiScalePrediction:
    return MultiScalePrediction([acts[f"disp{s}"][0] for s in range(4)])
