"""Command-line entry point: gen, train, eval, bench, viz, verify."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import PRUNE_MODES, ConfigError, PipelineConfig
from .synthetic import DatasetError, SpecError, SyntheticVideoSpec, generate_dataset, read_dataset, write_dataset
from .training import TrainingError

log = logging.getLogger("stts")

EXIT_USAGE = 2
EXIT_FAILED = 1


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline")
    g.add_argument("--config", type=Path, help="JSON file of PipelineConfig fields (flags override it)")
    g.add_argument("--prune-ratio", type=float, help="k, percent of tokens to prune")
    g.add_argument("--layer", type=int, help="scorer reads layer l; bias goes into layer l+1")
    g.add_argument("--pool-width", type=int, help="w, side of the pooled block in patches")
    g.add_argument("--mode", choices=PRUNE_MODES)
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=("float32", "float64"))
    g.add_argument("--no-protect-first", dest="protect_first", action="store_false", default=None,
                   help="allow frame 0 to be pruned")


# argparse dests that map one-to-one onto PipelineConfig fields
FLAG_FIELDS = ("prune_ratio", "layer", "pool_width", "mode", "seed", "precision", "protect_first",
               "steps", "batch_size", "lr", "scorer_lr", "aux_warmup")


def _build_config(args, **base) -> PipelineConfig:
    fields = dict(base)
    if getattr(args, "config", None):
        fields.update(json.loads(Path(args.config).read_text()))
    for key in FLAG_FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            fields[key] = v
    return PipelineConfig.from_dict(fields)


def _geometry(spec: SyntheticVideoSpec) -> dict:
    return {"frame_size": spec.frame_size, "patch_size": spec.patch_size, "frames": spec.frames}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = SyntheticVideoSpec.parse(args.spec.read_text()) if args.spec else SyntheticVideoSpec()
    if args.frames is not None:
        spec = SyntheticVideoSpec(**{**spec.__dict__, "frames": args.frames})
        spec.validate()
    ds = generate_dataset(spec, args.count, args.seed)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .model import STTSModel
    from .training import train

    data = read_dataset(args.data)
    cfg = _build_config(args, **_geometry(data.spec))
    model = STTSModel(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = args.metrics or out / "metrics.csv"
    history = train(model, data, metrics_path=metrics, progress_every=args.log_every)
    model.save(out)
    last = history[-1] if history else None
    if last is not None:
        print(f"trained {len(history)} steps; final task={last.task_loss:.4f} sim={last.sim_loss:.4f}")
    print(f"checkpoint: {out}  metrics: {metrics}")
    return 0


def cmd_eval(args) -> int:
    from .model import STTSModel
    from .training import evaluate, write_eval_csv

    model = STTSModel.load(args.checkpoint)
    data = read_dataset(args.data)
    protect = None if args.protect_first is None else args.protect_first
    rows = evaluate(model, data, args.modes, args.ks, protect_first=protect, seed=args.seed or 0)
    if args.out:
        write_eval_csv(args.out, rows)
    print("mode,k,accuracy,foreground_retention")
    for r in rows:
        print(f"{r.mode},{r.k:g},{r.accuracy:.4f},{r.foreground_retention:.4f}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_config, run_bench, write_bench_csv
    from .model import STTSModel

    rows = []
    for t in args.frames:
        overrides = {"layers": args.layers, "mode": args.mode or "heuristic"}
        if args.layer is not None:
            overrides["layer"] = args.layer
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = bench_config(t, **overrides)
        model = None
        if args.checkpoint:
            loaded = STTSModel.load(args.checkpoint)
            cfg = loaded.cfg.replace(frames=t, precision=loaded.cfg.precision, mode=args.mode or loaded.cfg.mode)
            model = STTSModel(cfg, loaded.arrays())
        rows += run_bench(cfg, args.ks, repeats=args.repeats, warmup=args.warmup, seed=args.seed or 0,
                          model=model, threads=args.threads)
    if args.out:
        write_bench_csv(args.out, rows)
    print("frames,k,bins,unpruned_s,packed_s,masked_s,speedup_packed,speedup_masked")
    for r in rows:
        print(f"{r.frames},{r.k:g},{r.bins},{r.unpruned_s:.4f},{r.packed_s:.4f},{r.masked_s:.4f},"
              f"{r.speedup_packed:.3f},{r.speedup_masked:.3f}")
    return 0


def cmd_viz(args) -> int:
    from .model import STTSModel
    from .synthetic import gen_synthetic
    from .viz import render, write_viz

    model = STTSModel.load(args.checkpoint)
    if args.data:
        data = read_dataset(args.data)
        if not 0 <= args.index < len(data):
            raise DatasetError(f"video index {args.index} outside 0..{len(data) - 1}")
        frames, fg = data.frames[args.index], data.foreground[args.index]
    else:
        spec = SyntheticVideoSpec(frame_size=model.cfg.frame_size, patch_size=model.cfg.patch_size,
                                  frames=model.cfg.frames)
        video = gen_synthetic(spec, args.index)
        frames, fg = video.frames, video.foreground
    res = render(model, frames, fg, mode=args.mode, k=args.prune_ratio, protect_first=args.protect_first,
                 seed=args.seed or 0)
    paths = write_viz(res, args.out)
    print(res.mask_text, end="")
    print(f"retained {res.retained}/{np.asarray(frames).shape[0] * model.cfg.num_patches} (budget {res.budget})")
    print(f"foreground_retention={res.foreground_retention:.4f}")
    print(f"wrote {len(paths)} images and mask.txt to {args.out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    names = SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for name in names:
        rep = run_suite(name, seed=args.seed or 0)
        for line in rep.lines():
            print(line)
        ok &= rep.ok
    return 0 if ok else EXIT_FAILED


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stts", description="Spatio-temporal token scoring toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic video dataset")
    p.add_argument("--spec", type=Path, help="key=value spec file (defaults if omitted)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, help="override the spec's frame count")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model; writes a checkpoint directory and metrics CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--metrics", type=Path, help="metrics CSV (default OUT/metrics.csv)")
    p.add_argument("--steps", type=int)
    p.add_argument("--aux-warmup", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--scorer-lr", type=float)
    p.add_argument("--log-every", type=int, default=0)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and foreground retention over a k sweep")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ks", type=_float_list, default=[0, 50, 60, 70, 80, 90])
    p.add_argument("--modes", type=lambda s: s.split(","), default=["stts", "heuristic", "random"])
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-protect-first", dest="protect_first", action="store_false", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput: unpruned vs packed vs masked-only")
    p.add_argument("--frames", type=_int_list, default=[32, 64])
    p.add_argument("--ks", type=_float_list, default=[0, 30, 40, 50])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--layer", type=int, help="injection layer l (default 3)")
    p.add_argument("--mode", choices=PRUNE_MODES)
    p.add_argument("--checkpoint", type=Path, help="benchmark a trained model instead of a fresh one")
    p.add_argument("--threads", type=int, help="BLAS thread cap (default: STTS_THREADS)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz", help="render keep/drop overlays for one clip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset file; omit to synthesise a clip from --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--prune-ratio", type=float)
    p.add_argument("--mode", choices=PRUNE_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-protect-first", dest="protect_first", action="store_false", default=None)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("verify", help="run self-check suites; nonzero exit on failure")
    p.add_argument("suite", choices=("equivalence", "gradient", "ffd", "budget", "all"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
    except (DatasetError, SpecError) as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
    except TrainingError as exc:
        print(f"error: training: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
