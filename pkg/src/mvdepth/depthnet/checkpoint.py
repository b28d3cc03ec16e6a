"""Checkpoint serialization.

Layout: magic ``MVDN``, u32 format version, u32 depth-sample count, f64
channel width scale, f64 sigmoid scale, u32 blob count, then per blob:
u32 name length, utf-8 name, u32 rank, u32 dims, little-endian f32 data.
Parameter blobs are named ``<layer>.<key>``; two optional ``norm.mean`` /
``norm.std`` blobs carry the image normalization statistics the network was
trained with.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .graph import NetworkGraph, build_network

_MAGIC = b"MVDN"
_VERSION = 1

_PARAM_KEYS = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")


def save_checkpoint(
    net: NetworkGraph,
    path,
    norm_mean: np.ndarray | None = None,
    norm_std: np.ndarray | None = None,
) -> None:
    blobs: list[tuple[str, np.ndarray]] = []
    for spec in net.layers:
        for key in _PARAM_KEYS:
            arrays = net.params.get(spec.name, {})
            if key in arrays:
                blobs.append((f"{spec.name}.{key}", arrays[key]))
    if norm_mean is not None:
        blobs.append(("norm.mean", np.asarray(norm_mean)))
    if norm_std is not None:
        blobs.append(("norm.std", np.asarray(norm_std)))

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, net.n_depth_samples))
        f.write(struct.pack("<dd", net.channel_width_scale, net.sigmoid_scale))
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[NetworkGraph, dict[str, np.ndarray]]:
    """Rebuild a NetworkGraph from a checkpoint.

    Returns (network, extras) where extras holds any non-parameter blobs
    (e.g. normalization statistics).

    Raises:
        FormatError: for bad magic, version, or truncated data.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path} is not an MVDN checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated checkpoint header")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    version, n_depth = take("<II")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    width_scale, sigmoid_scale = take("<dd")
    (n_blobs,) = take("<I")

    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (name_len,) = take("<I")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        blobs[name] = data.astype(dtype)

    net = build_network(n_depth, width_scale, sigmoid_scale, dtype=dtype)
    extras: dict[str, np.ndarray] = {}
    for name, data in blobs.items():
        if "." in name:
            layer, key = name.rsplit(".", 1)
            if layer in net.params and key in net.params[layer]:
                if net.params[layer][key].shape != data.shape:
                    raise FormatError(
                        f"{path}: blob {name} has shape {data.shape}, expected "
                        f"{net.params[layer][key].shape}"
                    )
                net.params[layer][key] = data
                continue
        extras[name] = data
    return net, extras
