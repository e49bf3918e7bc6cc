"""Command line front end: export_attn."""

import argparse
import sys

from .errors import CaptureShapeError, ExportStartupError
from .export import (DEFAULT_RESOLUTIONS, DEFAULT_TIMESTEPS, ExportJob,
                     export_bundle)

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_STARTUP = 2


def _int_list(text: str):
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="export_attn",
        description="Capture UNet attention for an image and write a bundle")
    p.add_argument("--image", required=True, help="input image path")
    p.add_argument("--classes", required=True,
                   help="comma-separated class names, e.g. 'cat,sky'")
    p.add_argument("--timesteps", default=",".join(map(str, DEFAULT_TIMESTEPS)),
                   help="comma-separated diffusion timesteps to export")
    p.add_argument("--resolutions", default=",".join(map(str, DEFAULT_RESOLUTIONS)),
                   help="comma-separated attention grid sides to export")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for weights and forward-process noise")
    p.add_argument("--weights", default=None,
                   help="optional local state-dict file replacing seeded weights")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        job = ExportJob(
            image=args.image,
            class_names=[c for c in args.classes.split(",") if c.strip()],
            out_dir=args.out,
            timesteps=_int_list(args.timesteps),
            resolutions=_int_list(args.resolutions),
            seed=args.seed,
            weights=args.weights,
        )
    except ValueError as exc:
        print(f"export_attn: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    try:
        manifest = export_bundle(job)
    except ExportStartupError as exc:
        print(f"export_attn: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    except CaptureShapeError as exc:
        print(f"export_attn: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"wrote {manifest}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
