"""Command line for the dump exporter.

Exit codes: 0 success, 1 invalid request or capture failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .capture import CaptureError
from .container import read_header
from .export import ExportError, ExportSpec, export_samples
from .model import MODELS


def cmd_export(args: argparse.Namespace) -> int:
    spec = ExportSpec(
        images=tuple(args.images),
        prompt=args.prompt,
        out_dir=args.out_dir,
        model=args.model,
        seed=args.seed,
        precision=args.precision,
    )
    for path in export_samples(spec):
        meta, _ = read_header(path)
        summary = {
            "out": str(path),
            "model": spec.model,
            "n_visual": meta["n_visual"],
            "grid_h": meta["grid_h"],
            "grid_w": meta["grid_w"],
            "seq_len": meta["n_sys"] + meta["n_visual"] + meta["n_text"],
        }
        print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_models(args: argparse.Namespace) -> int:
    print(f"{'name':<10} {'image':>5} {'grid':>7} {'d_enc':>5} {'d_llm':>5} {'enc_layers':>10} {'dec_layers':>10}")
    for name in sorted(MODELS):
        g = MODELS[name]
        grid = f"{g.grid}x{g.grid}"
        print(f"{name:<10} {g.image_size:>5} {grid:>7} {g.d_enc:>5} {g.d_llm:>5} {g.enc_layers:>10} {g.dec_layers:>10}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdx", description="Export model attention dumps to CDT1 files")
    sub = p.add_subparsers(dest="cmd", required=True)

    e = sub.add_parser("export", help="run a bundled model and write one dump per image")
    e.add_argument("--image", dest="images", action="append", required=True, help="image path (repeatable)")
    e.add_argument("--prompt", required=True, help="prompt text appended after the visual tokens")
    e.add_argument("--out-dir", required=True, help="directory for the .cdt1 files")
    e.add_argument("--model", default="mini-336", help="bundled model name (see `vdx models`)")
    e.add_argument("--seed", type=int, default=0, help="weight initialization seed")
    e.add_argument("--precision", default="f32", help="payload precision (only f32 is supported)")
    e.set_defaults(fn=cmd_export)

    m = sub.add_parser("models", help="list bundled model geometries")
    m.set_defaults(fn=cmd_models)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ExportError, CaptureError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
