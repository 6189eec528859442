"""Command-line front end.

Subcommands: prune, scores, study, estimate, synth, validate. Exit codes:
0 on success, 1 on domain/validation failures, 2 on I/O problems (argparse
usage errors also exit 2, per argparse convention). Errors are emitted to
stderr as a single JSON object; set CDK_LOG or pass -v for human logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, merging, pipeline, tensor_io
from .fuser import FuserConfig
from .saliency import CROSS_STRATEGIES, VISION_MODES, aggregate_cross, text_to_vision_block, vision_saliency

log = logging.getLogger("cdk")

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_IO = 2

CONFIG_KEYS = (
    "budget",
    "alpha",
    "tau_v",
    "tau_c",
    "strategy",
    "student",
    "recovery_rate",
    "merge_count",
    "vision_mode",
    "cross_strategy",
    "fps_seed",
    "epsilon",
)


def _emit_error(code: str, message: str, **extra) -> None:
    payload = {"error": {"code": code, "message": message, **extra}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _setup_logging(verbosity: int) -> None:
    env = os.environ.get("CDK_LOG", "").upper()
    level = None
    if env:
        level = getattr(logging, env, None)
    if level is None and verbosity > 0:
        level = logging.DEBUG if verbosity > 1 else logging.INFO
    if level is not None:
        logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _workers(args) -> int:
    if args.workers is not None:
        if args.workers < 1:
            raise ValueError(f"--workers must be >= 1, got {args.workers}")
        return args.workers
    return os.cpu_count() or 1


def _map(workers: int, fn, items):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- prune


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    raw = json.loads(Path(path).read_text())
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _build_pipeline_config(args) -> pipeline.PipelineConfig:
    """Defaults, overridden by --config file keys, overridden by flags."""
    merged: dict = dict(_load_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    if "budget" not in merged:
        raise ValueError("a token budget is required (--budget or config file)")
    merge_count = merged.get("merge_count", "auto")
    if isinstance(merge_count, str) and merge_count != "auto":
        merge_count = int(merge_count)
    fuser = FuserConfig(
        strategy=merged.get("strategy", "convex"),
        alpha=float(merged.get("alpha", 0.7)),
        tau_v=float(merged.get("tau_v", 1.0)),
        tau_c=float(merged.get("tau_c", 1.0)),
        student=merged.get("student", "vision"),
        recovery_rate=float(merged.get("recovery_rate", 0.1)),
    )
    return pipeline.PipelineConfig(
        budget=int(merged["budget"]),
        fuser=fuser,
        vision_mode=merged.get("vision_mode", "class"),
        cross_strategy=merged.get("cross_strategy", "all"),
        merge_count=merge_count,
        epsilon=float(merged.get("epsilon", 1e-8)),
        fps_seed=merged.get("fps_seed", "saliency"),
    )


def cmd_prune(args) -> int:
    cfg = _build_pipeline_config(args)
    dump = tensor_io.read_dump(args.dump)
    seq, report = pipeline.compress(dump, cfg)

    out = args.out or str(Path(args.dump).with_suffix(".compressed.cdt1"))
    report_path = args.report or (out + ".report.json")
    merging.write_compressed(out, seq, dump.meta)
    Path(report_path).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %s rows to %s", seq.tokens.shape[0], out)
    print(
        json.dumps(
            {"out": out, "report": report_path, "budget": report.budget, "k": report.k, "m": report.m},
            sort_keys=True,
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------- scores


def cmd_scores(args) -> int:
    dump = tensor_io.read_dump(args.dump)
    s_v = vision_saliency(dump, args.vision_mode)
    s_c = aggregate_cross(text_to_vision_block(dump), args.cross_strategy)
    _write_json(
        args.out,
        {
            "n_visual": dump.meta.n_visual,
            "vision": {"mode": s_v.mode, "values": [float(x) for x in s_v.values]},
            "cross": {"strategy": s_c.mode, "values": [float(x) for x in s_c.values]},
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------- study


def _synth_corpus(args) -> list[analysis.SynthSample]:
    def build(i: int) -> analysis.SynthSample:
        spec = analysis.SynthSpec(
            n=args.n,
            sharpness=args.sharpness,
            noise_vision=args.noise,
            noise_cross=args.noise,
            complementarity=args.complementarity,
            seed=args.seed + i,
        )
        gt, s_v, s_c = analysis.generate_synth(spec)
        return analysis.SynthSample(sample_id=i, ground_truth=gt, vision=s_v, cross=s_c)

    return _map(_workers(args), build, range(args.samples))


def _corpus_from_jsonl(path: Path) -> list[analysis.SynthSample]:
    from .fuser import SaliencyDistribution
    from .saliency import RawSaliency

    samples = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        gt = obj.get("ground_truth")
        samples.append(
            analysis.SynthSample(
                sample_id=obj["sample"],
                ground_truth=None if gt is None else SaliencyDistribution(values=np.asarray(gt)),
                vision=RawSaliency(values=np.asarray(obj["vision"]), modality="vision", mode="synth"),
                cross=RawSaliency(values=np.asarray(obj["cross"]), modality="cross", mode="synth"),
            )
        )
    if not samples:
        raise ValueError(f"no samples found in {path}")
    return samples


def _corpus_from_dumps(path: Path, workers: int) -> list[analysis.SynthSample]:
    files = sorted(path.glob("*.cdt1"))
    if not files:
        raise ValueError(f"no .cdt1 dumps found in {path}")

    def load(f: Path) -> analysis.SynthSample:
        dump = tensor_io.read_dump(f)
        return analysis.SynthSample(
            sample_id=f.name,
            ground_truth=None,
            vision=vision_saliency(dump, "class"),
            cross=aggregate_cross(text_to_vision_block(dump), "all"),
        )

    return _map(workers, load, files)


def cmd_study(args) -> int:
    if (args.corpus is None) == (args.samples is None):
        raise ValueError("provide exactly one of --corpus or --samples")
    if args.corpus is not None:
        src = Path(args.corpus)
        if src.is_dir():
            samples = _corpus_from_dumps(src, _workers(args))
        else:
            samples = _corpus_from_jsonl(src)
    else:
        samples = _synth_corpus(args)

    r_list = [float(x) for x in args.r_list.split(",") if x.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {r: analysis.study_recovery(samples, args.k, r, args.student, args.alpha) for r in r_list}

    with open(out_dir / "records.jsonl", "w") as fh:
        for r in r_list:
            for rec in results[r].records:
                fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")

    summary = {
        "k": args.k,
        "student": args.student,
        "alpha": args.alpha,
        "r": {
            str(r): {
                "mean_agreement": res.mean_agreement,
                "mean_correction": res.mean_correction,
                "mean_recall": res.mean_recall,
            }
            for r, res in results.items()
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "method", "agreement", "correction_factor", "recall"])
        for r in r_list:
            res = results[r]
            for method in analysis.STUDY_METHODS:
                recall = res.mean_recall[method]
                writer.writerow(
                    [
                        r,
                        method,
                        f"{res.mean_agreement:.6g}",
                        "" if res.mean_correction is None else f"{res.mean_correction:.6g}",
                        "" if recall is None else f"{recall:.6g}",
                    ]
                )
    print(json.dumps({"out": str(out_dir), "samples": len(samples), "r": r_list}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- estimate


def _cost_model(args) -> analysis.CostModel:
    if args.model_json:
        raw = json.loads(Path(args.model_json).read_text())
        return analysis.CostModel(**raw)
    return analysis.PRESETS[args.preset]


def cmd_estimate(args) -> int:
    model = _cost_model(args)
    budgets = [int(x) for x in args.budgets.split(",") if x.strip()]
    rows = []
    for b in budgets:
        s = b + args.context
        rows.append((b, s, analysis.kv_cache_mb(model, s), analysis.flops_estimate(model, s)))

    header = f"{'budget':>8} {'seq_len':>8} {'kv_mb':>10} {'tflops':>10}"
    print(header)
    print("-" * len(header))
    for b, s, kv, fl in rows:
        print(f"{b:>8} {s:>8} {kv:>10g} {fl:>10.4g}")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["budget", "seq_len", "kv_mb", "tflops"])
            for b, s, kv, fl in rows:
                writer.writerow([b, s, f"{kv:g}", f"{fl:.6g}"])
    return EXIT_OK


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    noise_v = args.noise if args.noise_vision is None else args.noise_vision
    noise_c = args.noise if args.noise_cross is None else args.noise_cross

    def build(i: int):
        spec = analysis.SynthSpec(
            n=args.n,
            sharpness=args.sharpness,
            noise_vision=noise_v,
            noise_cross=noise_c,
            complementarity=args.complementarity,
            seed=args.seed + i,
        )
        gt, s_v, s_c = analysis.generate_synth(spec)
        return {
            "sample": i,
            "ground_truth": [float(x) for x in gt.values],
            "vision": [float(x) for x in s_v.values],
            "cross": [float(x) for x in s_c.values],
        }

    records = _map(_workers(args), build, range(args.samples))
    with open(out, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), "samples": args.samples, "n": args.n}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    meta, tensors = tensor_io.read_container(args.dump)
    dump = tensor_io.TensorDump(meta=meta, tensors=tensors)
    violations = tensor_io.validate_dump(dump)
    lines = "\n".join(json.dumps(v.as_dict(), sort_keys=True) for v in violations)
    if args.out:
        Path(args.out).write_text(lines + ("\n" if lines else ""))
    elif lines:
        print(lines)
    log.info("%d violation(s) in %s", len(violations), args.dump)
    return EXIT_OK if not violations else EXIT_DOMAIN


# ---------------------------------------------------------------- wiring


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity (or set CDK_LOG)")
    p.add_argument("--workers", type=int, default=None, help="worker threads (default: available parallelism)")
    p.add_argument("--seed", type=int, default=0, help="base random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="compress one dump to a token budget")
    p.add_argument("dump", help="input .cdt1 dump")
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--budget", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau-v", dest="tau_v", type=float)
    p.add_argument("--tau-c", dest="tau_c", type=float)
    p.add_argument("--strategy", choices=("convex", "recovery"))
    p.add_argument("--student", choices=("vision", "cross"))
    p.add_argument("--recovery-rate", dest="recovery_rate", type=float)
    p.add_argument("--merge-count", dest="merge_count")
    p.add_argument("--vision-mode", dest="vision_mode", choices=VISION_MODES)
    p.add_argument("--cross-strategy", dest="cross_strategy", choices=CROSS_STRATEGIES)
    p.add_argument("--fps-seed", dest="fps_seed", choices=pipeline.FPS_SEED_MODES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out", help="output .cdt1 path (default: <dump>.compressed.cdt1)")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    _add_common(p)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("scores", help="emit raw vision and cross saliency for a dump")
    p.add_argument("dump")
    p.add_argument("--vision-mode", dest="vision_mode", choices=VISION_MODES, default="class")
    p.add_argument("--cross-strategy", dest="cross_strategy", choices=CROSS_STRATEGIES, default="all")
    p.add_argument("--out", help="output JSON path (default: stdout)")
    _add_common(p)
    p.set_defaults(fn=cmd_scores)

    p = sub.add_parser("study", help="agreement/correction/recall study over a corpus")
    p.add_argument("--corpus", help="directory of .cdt1 dumps or a samples.jsonl file")
    p.add_argument("--samples", type=int, help="generate this many synthetic samples instead")
    p.add_argument("--n", type=int, default=576, help="tokens per synthetic sample")
    p.add_argument("--sharpness", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--complementarity", type=float, default=0.3)
    p.add_argument("--k", type=int, required=True, help="selection size")
    p.add_argument("--r-list", dest="r_list", default="0.1,0.3,0.5", help="comma-separated recovery rates")
    p.add_argument("--student", choices=("vision", "cross"), default="vision")
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(fn=cmd_study)

    p = sub.add_parser("estimate", help="analytical KV-cache and flops table")
    p.add_argument("--preset", choices=sorted(analysis.PRESETS), default="llava7b")
    p.add_argument("--model-json", dest="model_json", help="JSON file with cost-model fields")
    p.add_argument("--budgets", default="576,192,128,64,32", help="comma-separated visual budgets")
    p.add_argument("--context", type=int, default=66, help="non-visual tokens in the sequence")
    p.add_argument("--out", help="also write a CSV here")
    _add_common(p)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("synth", help="write a synthetic saliency corpus as JSONL")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--n", type=int, default=576)
    p.add_argument("--sharpness", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0, help="noise sigma for both modalities")
    p.add_argument("--noise-vision", dest="noise_vision", type=float, default=None)
    p.add_argument("--noise-cross", dest="noise_cross", type=float, default=None)
    p.add_argument("--complementarity", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output .jsonl path")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("validate", help="check a dump against every invariant")
    p.add_argument("dump")
    p.add_argument("--out", help="write the violation report here instead of stdout")
    _add_common(p)
    p.set_defaults(fn=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.fn(args)
    except tensor_io.DumpValidationError as e:
        _emit_error("validation", str(e), violations=[v.as_dict() for v in e.violations])
        return EXIT_DOMAIN
    except tensor_io.DumpFormatError as e:
        _emit_error("format", str(e))
        return EXIT_DOMAIN
    except (ValueError, KeyError, TypeError) as e:
        _emit_error("domain", str(e))
        return EXIT_DOMAIN
    except OSError as e:
        _emit_error("io", str(e))
        return EXIT_IO


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
