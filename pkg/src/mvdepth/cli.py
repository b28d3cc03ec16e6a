"""Command-line front end exposing every pipeline stage.

Subcommands: ``synth`` (emit a synthetic TUM-layout sequence), ``volume``
(build and dump a cost volume), ``depth`` (single depth estimate), ``map``
(sequence mode), ``eval`` (metrics report), ``train-toy`` (toy network
training), ``gradcheck`` (finite-difference gradient verification).

Exit codes: 0 success, 1 usage error, 2 data error. Every subcommand writes
a ``manifest.json`` with its fully resolved configuration; identical argv,
seed, and inputs produce byte-identical data outputs (wall-clock timings go
to a separate ``timings.json``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import (
    draw_geometric_params,
    flip_sample,
    load_augmentation_config,
    photometric_augment,
    scale_world,
)
from .classical_depth import DepthMap, extract
from .cost_volume import Frame, build_cost_volume, write_volume
from .dataset_io import (
    compute_normalization,
    depth_map_from_pfm,
    load_depth_png,
    load_frame,
    load_sequence,
    make_plane_scene,
    make_striped_scene,
    normalize_image,
    write_pfm,
    write_tum_sequence,
)
from .depthnet import (
    TrainConfig,
    build_network,
    forward,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train_toy,
)
from .depthnet.training import build_gt_pyramid
from .errors import MVDepthError
from .geometry import Intrinsics, sample_inverse_depths
from .metrics import MetricsAccumulator
from .sequence_mapper import SequenceMapper, classical_estimator

USAGE_ERROR = 1
DATA_ERROR = 2

DEFAULT_D_MIN = 0.5
DEFAULT_D_MAX = 50.0
DEFAULT_N_SAMPLES = 64
DEFAULT_WIDTH = 320
DEFAULT_HEIGHT = 256


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _default_threads() -> int:
    env = os.environ.get("MVDEPTH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


# Built-in defaults for flags that may also come from a --config file.
# Precedence: explicit flag > config file entry > this table.
_CONFIGURABLE_DEFAULTS = {
    "dmin": DEFAULT_D_MIN,
    "dmax": DEFAULT_D_MAX,
    "nd": DEFAULT_N_SAMPLES,
    "seed": 0,
    "threads": None,
    "angle_deg": 15.0,
    "baseline_m": 0.3,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="key-value file supplying defaults for dmin/dmax/nd/"
                        "threads/seed (and angle-deg/baseline-m where used); "
                        "explicit flags take precedence")
    p.add_argument("--dmin", type=float, default=None, help="nearest depth hypothesis (m)")
    p.add_argument("--dmax", type=float, default=None, help="farthest depth hypothesis (m)")
    p.add_argument("--nd", type=int, default=None, help="number of depth hypotheses")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: MVDEPTH_THREADS or all cores)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output file or directory")


def _resolve_config(args: argparse.Namespace) -> None:
    """Fill unset flags from the optional config file, then from built-ins
    (flags > config file > defaults); resolved values land back on ``args``
    so every manifest records them."""
    from .dataset_io import parse_key_value_file

    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = parse_key_value_file(args.config)
    for key, built_in in _CONFIGURABLE_DEFAULTS.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) is not None:
            continue
        if key in file_values:
            caster = type(built_in) if built_in is not None else int
            setattr(args, key, caster(file_values[key]))
        else:
            setattr(args, key, built_in)


def _add_estimator(p: argparse.ArgumentParser) -> None:
    p.add_argument("--estimator", choices=["classical", "network"], default="classical")
    p.add_argument("--checkpoint", default=None, help="MVDN checkpoint (network estimator)")
    p.add_argument("--no-refine", action="store_true",
                   help="disable sub-sample refinement (classical estimator)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mvdepth",
        description=__doc__.split("\n\n")[0],
        epilog="Option precedence: explicit flags override --config file "
               "entries, which override built-in defaults.",
    )
    parser.add_argument("--version", action="version", version=f"mvdepth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic scene as a TUM-layout sequence")
    p.add_argument("--preset", choices=["plane", "tilted", "striped"], default="plane")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--depth", type=float, default=2.0, help="plane depth on the first optical axis (m)")
    p.add_argument("--step-x", type=float, default=0.1, help="camera translation per frame (m)")
    p.add_argument("--tilt-deg", type=float, default=30.0, help="plane tilt for the tilted preset")
    p.add_argument("--period-px", type=float, default=8.0, help="stripe period for the striped preset")
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.add_argument("--height", type=int, default=DEFAULT_HEIGHT)
    p.add_argument("--fx", type=float, default=260.0)
    p.add_argument("--fy", type=float, default=260.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("volume", help="build one cost volume and dump it")
    _add_common(p)
    p.add_argument("--seq", required=True, help="TUM-layout sequence directory")
    p.add_argument("--ref", type=int, required=True, help="reference frame index")
    p.add_argument("--meas", required=True, help="comma-separated measurement frame indices")

    p = sub.add_parser("depth", help="estimate one depth map")
    _add_common(p)
    _add_estimator(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--ref", type=int, required=True)
    p.add_argument("--meas", required=True)

    p = sub.add_parser("map", help="sequence mode: continuous depth maps over a trajectory")
    _add_common(p)
    _add_estimator(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--angle-deg", type=float, default=None)
    p.add_argument("--baseline-m", type=float, default=None)

    p = sub.add_parser("eval", help="metrics report for predictions vs ground truth")
    p.add_argument("--pred", required=True, help="PFM/PNG file or directory of them")
    p.add_argument("--gt", required=True, help="PFM/PNG file or directory of them")
    p.add_argument("--depth-scale", type=float, default=5000.0, help="PNG raw-to-meters divisor")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-toy", help="overfit a small network on a synthetic sequence")
    _add_common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--width-scale", type=float, default=0.125)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay-every", type=int, default=0)
    p.add_argument("--augment-config", default=None,
                   help="key-value augmentation config; adds one transformed copy per sample")

    p = sub.add_parser("gradcheck", help="finite-difference verification of the backward pass")
    p.add_argument("--width-scale", type=float, default=0.125)
    p.add_argument("--nd", type=int, default=8)
    p.add_argument("--size", type=int, default=32, help="square input size")
    p.add_argument("--params", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    return parser


def _write_manifest(out_dir: Path, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")


def _load_frames(args) -> tuple[list[Frame], list[DepthMap], Intrinsics, list[float]]:
    index, intr = load_sequence(args.seq)
    frames = [load_frame(args.seq, e, intr) for e in index.entries]
    gts = [load_depth_png(Path(args.seq) / e.depth_path) for e in index.entries]
    stamps = [e.timestamp for e in index.entries]
    return frames, gts, intr, stamps


def _parse_indices(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _network_estimator(checkpoint_path: str, workers: int):
    net, extras = load_checkpoint(checkpoint_path)
    mean = extras.get("norm.mean")
    std = extras.get("norm.std")

    def run(reference: Frame, measurements: list[Frame], hyp_samples) -> DepthMap:
        ref = reference
        meas = measurements
        if mean is not None and std is not None:
            ref = Frame(normalize_image(reference.image, mean, std), reference.pose,
                        reference.intrinsics, reference.id)
            meas = [Frame(normalize_image(m.image, mean, std), m.pose, m.intrinsics, m.id)
                    for m in measurements]
        volume = build_cost_volume(ref, meas, hyp_samples, workers=workers)
        pred = forward(net, ref.image, volume)
        inverse = pred.full_resolution()
        return DepthMap(1.0 / np.maximum(inverse, 1e-9), np.ones_like(inverse, dtype=bool))

    return net, run


def cmd_synth(args) -> int:
    intr = Intrinsics(args.fx, args.fy, (args.width - 1) / 2.0, (args.height - 1) / 2.0,
                      args.width, args.height)
    step = (args.step_x, 0.0, 0.0)
    if args.preset == "plane":
        scene = make_plane_scene(intr, args.depth, args.frames, step, seed=args.seed)
    elif args.preset == "tilted":
        scene = make_plane_scene(intr, args.depth, args.frames, step,
                                 tilt_deg=args.tilt_deg, seed=args.seed)
    else:
        scene = make_striped_scene(intr, args.depth, args.period_px, args.frames, step, channels=3)
    out = Path(args.out)
    write_tum_sequence(scene, out)
    _write_manifest(out, args)
    print(f"wrote {args.frames}-frame {args.preset} sequence to {out}")
    return 0


def cmd_volume(args) -> int:
    frames, _, _, _ = _load_frames(args)
    ref = frames[args.ref]
    meas = [frames[i] for i in _parse_indices(args.meas)]
    hyp = sample_inverse_depths(args.dmin, args.dmax, args.nd)
    workers = args.threads if args.threads else _default_threads()
    volume = build_cost_volume(ref, meas, hyp, workers=workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(volume, out)
    _write_manifest(out.parent, args)
    print(f"wrote {volume.costs.shape} volume to {out}")
    return 0


def cmd_depth(args) -> int:
    frames, _, _, _ = _load_frames(args)
    ref = frames[args.ref]
    meas = [frames[i] for i in _parse_indices(args.meas)]
    hyp = sample_inverse_depths(args.dmin, args.dmax, args.nd)
    workers = args.threads if args.threads else _default_threads()
    if args.estimator == "network":
        if not args.checkpoint:
            raise MVDepthError("--estimator network requires --checkpoint")
        _, run = _network_estimator(args.checkpoint, workers)
        depth_map = run(ref, meas, hyp)
    else:
        volume = build_cost_volume(ref, meas, hyp, workers=workers)
        depth_map = extract(volume, refine=not args.no_refine)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(depth_map, out)
    _write_manifest(out.parent, args)
    print(f"wrote depth map to {out}")
    return 0


def cmd_map(args) -> int:
    frames, _, _, stamps = _load_frames(args)
    hyp = sample_inverse_depths(args.dmin, args.dmax, args.nd)
    workers = args.threads if args.threads else _default_threads()
    if args.estimator == "network":
        if not args.checkpoint:
            raise MVDepthError("--estimator network requires --checkpoint")
        _, run_net = _network_estimator(args.checkpoint, workers)
        estimator = lambda ref, meas: run_net(ref, meas, hyp)
    else:
        estimator = classical_estimator(hyp, workers=workers, refine=not args.no_refine)
    mapper = SequenceMapper(estimator, angle_deg=args.angle_deg, baseline_m=args.baseline_m)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = []
    produced = 0
    for frame, stamp in zip(frames, stamps):
        t0 = time.perf_counter()
        depth_map = mapper.process_frame(frame)
        timings.append(time.perf_counter() - t0)
        if depth_map is not None:
            write_pfm(depth_map, out / f"{stamp:.6f}.pfm")
            produced += 1
    summary = {
        "selection_rule": "compare against the previous selected keyframe",
        "angle_deg": args.angle_deg,
        "baseline_m": args.baseline_m,
        "frames_processed": len(frames),
        "depth_maps_written": produced,
        "decisions": [
            {
                "frame_id": d.frame_id,
                "selected": d.selected,
                "view_angle_deg": d.view_angle_deg,
                "baseline_m": d.baseline_m,
                "estimated": d.estimated,
            }
            for d in mapper.decisions
        ],
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(
        json.dumps({"per_frame_s": timings, "total_s": sum(timings)}, indent=2) + "\n"
    )
    _write_manifest(out, args)
    print(f"processed {len(frames)} frames, wrote {produced} depth maps to {out}")
    return 0


def _load_depth_any(path: Path, scale: float) -> DepthMap:
    if path.suffix.lower() == ".pfm":
        return depth_map_from_pfm(path)
    return load_depth_png(path, scale)


def cmd_eval(args) -> int:
    pred_path = Path(args.pred)
    gt_path = Path(args.gt)
    acc = MetricsAccumulator()
    if pred_path.is_dir():
        pred_files = sorted(p for p in pred_path.iterdir() if p.suffix.lower() in (".pfm", ".png"))
        if not pred_files:
            raise MVDepthError(f"no .pfm/.png predictions under {pred_path}")
        for pf in pred_files:
            candidates = [gt_path / f"{pf.stem}{ext}" for ext in (".pfm", ".png")]
            gt_file = next((c for c in candidates if c.exists()), None)
            if gt_file is None:
                raise MVDepthError(f"no ground truth for {pf.name} under {gt_path}")
            acc.update(_load_depth_any(pf, args.depth_scale), _load_depth_any(gt_file, args.depth_scale))
    else:
        acc.update(_load_depth_any(pred_path, args.depth_scale), _load_depth_any(gt_path, args.depth_scale))
    report = acc.report()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_train_toy(args) -> int:
    frames, gts, _, _ = _load_frames(args)
    if len(frames) < 2:
        raise MVDepthError("train-toy needs at least 2 frames")
    workers = args.threads if args.threads else _default_threads()
    mean, std = compute_normalization([f.image for f in frames])
    normed = [Frame(normalize_image(f.image, mean, std), f.pose, f.intrinsics, f.id) for f in frames]
    hyp = sample_inverse_depths(args.dmin, args.dmax, args.nd)

    dataset = []
    for i in range(1, len(normed)):
        volume = build_cost_volume(normed[i], [normed[i - 1]], hyp, workers=workers)
        dataset.append((normed[i].image, volume, gts[i]))

    if args.augment_config:
        aug = load_augmentation_config(args.augment_config)
        rng = np.random.default_rng(aug.seed)
        for i in range(1, len(frames)):
            params = draw_geometric_params(aug, rng)
            pair = [frames[i], frames[i - 1]]
            jittered = [
                Frame(photometric_augment(f.image, aug, int(rng.integers(2**31))),
                      f.pose, f.intrinsics, f.id)
                for f in pair
            ]
            scaled, gt_s = scale_world(jittered, gts[i], params["world_scale"])
            # Crop supervision to the hypothesis coverage after rescaling.
            in_range = gt_s.validity & (gt_s.depths >= args.dmin) & (gt_s.depths <= args.dmax)
            gt_s = DepthMap(gt_s.depths, in_range)
            scaled = [Frame(normalize_image(f.image, mean, std), f.pose, f.intrinsics, f.id)
                      for f in scaled]
            volume = build_cost_volume(scaled[0], [scaled[1]], hyp, workers=workers)
            ref_img = scaled[0].image
            if params["flip"]:
                volume, ref_img, gt_s = flip_sample(volume, ref_img, gt_s, params["flip_axis"])
            dataset.append((ref_img, volume, gt_s))

    net = build_network(args.nd, args.width_scale, sigmoid_scale=1.0 / args.dmin, seed=args.seed)
    config = TrainConfig(iterations=args.iterations, learning_rate=args.lr, seed=args.seed,
                         lr_decay_every=args.lr_decay_every)
    log = train_toy(net, dataset, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "checkpoint.mvdn", norm_mean=mean, norm_std=std)
    np.savetxt(out / "loss_log.txt", log.losses, fmt="%.9e")
    _write_manifest(out, args)
    print(f"trained {args.iterations} iterations; "
          f"loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}; checkpoint at {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.size % 16:
        raise MVDepthError("--size must be divisible by 16")
    rng = np.random.default_rng(args.seed)
    net = build_network(args.nd, args.width_scale, seed=args.seed)
    h = w = args.size
    reference = rng.random((h, w, 3))
    from .cost_volume import CostVolume

    costs = rng.random((args.nd, h, w))
    volume = CostVolume(costs, np.ones((args.nd, h, w), dtype=np.int16),
                        sample_inverse_depths(DEFAULT_D_MIN, DEFAULT_D_MAX, args.nd))
    gt = DepthMap(rng.uniform(1.0, 10.0, (h, w)), np.ones((h, w), dtype=bool))
    worst, records = gradient_check(net, reference, volume, build_gt_pyramid(gt),
                                    n_params=args.params, step=args.step, seed=args.seed)
    print(f"max relative error over {args.params} parameters: {worst:.3e} "
          f"({'PASS' if worst < args.tolerance else 'FAIL'} at {args.tolerance:g})")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"max_relative_error": worst, "tolerance": args.tolerance, "records": records},
            indent=2) + "\n")
    return 0 if worst < args.tolerance else DATA_ERROR


_COMMANDS = {
    "synth": cmd_synth,
    "volume": cmd_volume,
    "depth": cmd_depth,
    "map": cmd_map,
    "eval": cmd_eval,
    "train-toy": cmd_train_toy,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _resolve_config(args)
        return _COMMANDS[args.command](args)
    except MVDepthError as e:
        print(f"mvdepth {args.command}: {e}", file=sys.stderr)
        return DATA_ERROR
    except (OSError, IndexError, ValueError) as e:
        print(f"mvdepth {args.command}: {e}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
