"""Command line front end: run inversions, validate bundles, print oracles.

Exit codes: 0 success, 2 validation/argument error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import oracle
from .backend import BackendConfig, StaticBackend
from .bundle_io import (FixtureSpec, fixture_backend, load_manifest,
                        parse_fixture_spec, read_label_grid, validate_manifest,
                        write_mask_png, write_tensor)
from .distance import skl_matrix
from .errors import (BundleFormatError, BundleValidationError, NonFiniteLossError,
                     UndefinedMetricError)
from .maps import AggregationWeights, aggregate_attention
from .metrics import ConfusionMatrix, accumulate, macc, miou
from .optim import InversionConfig, invert_prompt, resolve_weights
from .refine import class_maps as build_class_maps
from .refine import refine_cross
from .segment import predict_mask

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONFINITE = 3

ORACLE_MAX_SIDE = 16
STATIC_WORKING_SIDE = 64


def _parse_timestep_range(text: str):
    lo, sep, hi = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError("timestep range must look like 5:300")
    try:
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad timestep range {text!r}")
    if lo > hi:
        raise argparse.ArgumentTypeError(f"timestep range {text!r} has min > max")
    return lo, hi


def _parse_resolutions(text: str):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution list {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty resolution list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invseg",
        description="Test-time prompt inversion over diffusion attention bundles.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="optimize prompts and write a mask")
    run.add_argument("--backend", choices=("toy", "static"), required=True)
    run.add_argument("--bundle", type=Path, help="manifest path (static backend)")
    run.add_argument("--fixture", type=str, default="",
                     help='fixture spec like "blobs=2,side=32,noise=0.3,seed=0"')
    run.add_argument("--steps", type=int, default=15)
    run.add_argument("--lr", type=float, default=0.01)
    run.add_argument("--alpha", type=float, default=1.0)
    run.add_argument("--anchor-scale", type=float, default=4.0)
    run.add_argument("--views", type=int, default=2)
    run.add_argument("--crop-min", type=float, default=0.6)
    run.add_argument("--resolutions", type=_parse_resolutions, default=None,
                     help="comma list; weighted uniformly (default: 16 if present)")
    run.add_argument("--timestep-range", type=_parse_timestep_range, default=(5, 300))
    run.add_argument("--infer-timestep", type=int, default=50)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out-mask", type=Path, required=True)
    run.add_argument("--gt", type=Path, help="ground-truth labels (PNG or .atnb)")
    run.add_argument("--emit-maps", type=Path, help="directory for per-class .atnb maps")
    run.add_argument("--loss-trace", type=Path, help="CSV path for the per-step trace")

    val = sub.add_parser("validate", help="check a bundle manifest and its tensors")
    val.add_argument("manifest", type=Path)

    orc = sub.add_parser("oracle", help="print brute-force loss reference values")
    orc.add_argument("fixture", type=str,
                     help='fixture spec like "blobs=2,side=8,noise=0.1,seed=0"')
    return parser


def _make_backend(args):
    """Returns (backend, default ground truth or None, output mask dims)."""
    if args.backend == "toy":
        spec = parse_fixture_spec(args.fixture) if args.fixture else FixtureSpec()
        lo, hi = args.timestep_range
        backend = fixture_backend(spec, timestep_range=(lo, hi),
                                  infer_timestep=args.infer_timestep)
        return backend, backend.ground_truth(), (spec.side, spec.side)
    if args.bundle is None:
        raise BundleValidationError("static backend needs --bundle <manifest>")
    problems = validate_manifest(args.bundle)
    if problems:
        raise BundleValidationError("; ".join(problems))
    import json

    image_size = json.loads(Path(args.bundle).read_text()).get("image_size")
    bundles = load_manifest(args.bundle)
    config = BackendConfig(kind="static", side=STATIC_WORKING_SIDE,
                           timestep_range=args.timestep_range,
                           infer_timestep=args.infer_timestep, seed=args.seed)
    backend = StaticBackend(config, bundles)
    if not image_size:
        image_size = (backend.working_side, backend.working_side)
    return backend, None, (int(image_size[0]), int(image_size[1]))


def _cmd_run(args) -> int:
    backend, gt_default, out_size = _make_backend(args)
    weights = AggregationWeights.uniform(args.resolutions) if args.resolutions else None
    config = InversionConfig(
        steps=args.steps, lr=args.lr, alpha=args.alpha,
        anchor_scale=args.anchor_scale, views=args.views, crop_min=args.crop_min,
        seed=args.seed, timestep_range=tuple(args.timestep_range),
        infer_timestep=args.infer_timestep, weights=weights)
    result = invert_prompt(backend, config)

    out_h, out_w = out_size
    seg = predict_mask(result.maps, out_h, out_w,
                       trace=result.totals, config=vars(args))
    args.out_mask.parent.mkdir(parents=True, exist_ok=True)
    write_mask_png(args.out_mask, seg.labels)
    print(f"wrote mask {args.out_mask} ({out_h}x{out_w}, "
          f"{result.maps.num_classes} classes)")
    if result.trace:
        print(f"loss: first {result.trace[0].total:.6f} "
              f"last {result.trace[-1].total:.6f} over {len(result.trace)} steps")

    if args.loss_trace:
        args.loss_trace.parent.mkdir(parents=True, exist_ok=True)
        with open(args.loss_trace, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "timestep", "cluster", "entropy", "total"])
            for i, b in enumerate(result.trace):
                writer.writerow([i, result.timesteps[i], f"{b.cluster:.10f}",
                                 f"{b.entropy:.10f}", f"{b.total:.10f}"])
        print(f"wrote loss trace {args.loss_trace}")

    if args.emit_maps:
        args.emit_maps.mkdir(parents=True, exist_ok=True)
        stack = ag.value_of(result.maps.maps)
        for c, name in enumerate(result.maps.class_names):
            safe = name.replace(" ", "_")
            write_tensor(args.emit_maps / f"map_{c:02d}_{safe}.atnb", stack[c])
        print(f"wrote {stack.shape[0]} class maps to {args.emit_maps}")

    # toy fixtures carry their own ground truth, so score them by default;
    # --gt always wins when given
    gt = read_label_grid(args.gt) if args.gt else gt_default
    if gt is not None:
        # metrics are computed at the ground truth's own resolution, which may
        # differ from the emitted mask size
        scored = seg.labels if gt.shape == seg.labels.shape else \
            predict_mask(result.maps, gt.shape[0], gt.shape[1]).labels
        conf = accumulate(ConfusionMatrix.empty(result.maps.num_classes),
                          scored, gt)
        print(f"mIoU {miou(conf):.4f} mAcc {macc(conf):.4f}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    problems = validate_manifest(args.manifest)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        print(f"{args.manifest}: {len(problems)} problem(s)", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{args.manifest}: ok")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    spec = parse_fixture_spec(args.fixture)
    if spec.side > ORACLE_MAX_SIDE:
        raise BundleValidationError(
            f"oracle fixtures are capped at side {ORACLE_MAX_SIDE} "
            f"(got {spec.side}); the loops are quadratic in pixels")
    backend = fixture_backend(spec)
    t = backend.config.infer_timestep
    bundle = backend.forward(backend.init_params(), t, None)
    weights = resolve_weights(backend.resolutions, None)
    a_self, a_cross = aggregate_attention(bundle, weights, target_side=spec.side)
    refined = refine_cross(ag.value_of(a_self), ag.value_of(a_cross))
    maps = build_class_maps(refined, bundle.class_spans, bundle.background_class,
                            bundle.class_names)
    stack = ag.value_of(maps.maps)

    s_fast = skl_matrix(ag.value_of(a_self))
    s_loops = np.array(oracle.skl_matrix_loops(ag.value_of(a_self)))
    intra = oracle.d_intra_loops(s_loops, stack, 4.0, 0.5)
    inter = oracle.d_inter_loops(s_loops, stack, 4.0, 0.5)
    cluster = oracle.cluster_loss_loops(s_loops, stack, 4.0, 0.5)
    entropy = oracle.entropy_loss_loops(stack)
    print(f"fixture blobs={spec.blobs} side={spec.side} noise={spec.noise} "
          f"seed={spec.seed} timestep={t}")
    print(f"skl checksum {float(np.abs(s_loops).sum()):.8f} "
          f"(fast path delta {float(np.abs(s_fast.as_f64() - s_loops).max()):.3e})")
    print(f"d_intra {intra:.8f}")
    print(f"d_inter {inter:.8f}")
    print(f"cluster {cluster:.8f}")
    print(f"entropy {entropy:.8f}")
    print(f"total {cluster + entropy:.8f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_oracle(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (BundleFormatError, BundleValidationError, UndefinedMetricError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
