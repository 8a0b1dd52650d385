"""Command line: build, fuse, verify, count, bench, infer.

Exit codes: 0 success, 1 equivalence failure, 2 usage error, 3 IO/format error.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, weights
from .bench import run_bench
from .blocks import Form
from .errors import AlreadyFusedError, ConfigError, FaceLiVTError, ShapeError, WeightFileError
from .model import ModelGraph, build, build_ablation, build_calibrated, forward, variant
from .plotting import figure_path, plot_costs, plot_latency
from .reparam import fuse_model, fuse_weights

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"facelivt: {msg}", file=sys.stderr)


def _config(args):
    cfg = variant(args.variant)
    for knob in args.ablation or ():
        cfg = build_ablation(cfg, knob)
    return cfg.validate()


def _model(args) -> ModelGraph:
    """Load ``--in`` or build ``--variant`` (calibrated unless told otherwise)."""
    if getattr(args, "input_model", None):
        return weights.load(args.input_model)
    if not getattr(args, "variant", None):
        raise UsageError("give --in PATH or --variant V")
    cfg = _config(args)
    if getattr(args, "no_calibrate", False):
        return build(cfg, seed=args.seed, dtype=args.dtype)
    return build_calibrated(cfg, seed=args.seed, dtype=args.dtype)


def _summary(g: ModelGraph) -> str:
    train = g if g.form is Form.TRAIN else None
    deploy = fuse_weights(g) if train is not None else g
    rd = analysis.count_params(deploy)
    line = (f"{g.config.label} [{np.dtype(g.dtype).name}, seed {g.seed}]: "
            f"{rd.params / 1e6:.2f}M params, {rd.madds / 1e6:.2f}M MAdds (deploy)")
    if train is not None:
        rt = analysis.count_params(train)
        line += f"; train form {rt.params / 1e6:.2f}M params, {rt.buffers} BN buffers"
    return line


def cmd_build(args) -> int:
    g = _model(args)
    print(_summary(g))
    if args.out:
        n = weights.save(g, args.out)
        print(f"wrote {args.out} ({n} bytes)")
    return EXIT_OK


def _fuse(args):
    g = _model(args)
    if g.form is Form.DEPLOY:
        raise AlreadyFusedError("model")
    deploy, report = fuse_model(g, tol=args.tol, samples=args.samples, seed=args.sample_seed)
    print(report.summary())
    return deploy, report


def cmd_fuse(args) -> int:
    deploy, report = _fuse(args)
    if not report.passed:
        _err("equivalence check failed; nothing written")
        return EXIT_FAIL
    if args.out:
        weights.save(deploy, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    _, report = _fuse(args)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_count(args) -> int:
    g = _model(args)
    if args.form == "deploy" and g.form is Form.TRAIN:
        g = fuse_weights(g)
    elif args.form == "train" and g.form is Form.DEPLOY:
        raise UsageError("a deploy-form file cannot be counted in train form")
    report = analysis.count_params(g)
    text = report.to_csv(verbose=args.verbose)
    if args.csv:
        Path(args.csv).write_text(text, newline="")
        png = plot_costs(report, figure_path(args.csv, "stages"))
        print(f"{report.variant} {report.form}: params {report.params} ({report.params / 1e6:.2f}M), "
              f"MAdds {report.madds} ({report.madds / 1e6:.2f}M)")
        for stage, (p, m) in report.by_stage().items():
            print(f"  {stage:7s} params {p:>9d}  MAdds {m:>11d}")
        print(f"wrote {args.csv} and {png}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    g = _model(args)
    if args.form == "deploy" and g.form is Form.TRAIN:
        g = fuse_weights(g)
    elif args.form == "train" and g.form is Form.DEPLOY:
        raise UsageError("a deploy-form file cannot be benchmarked in train form")
    res = run_bench(g, runs=args.runs, warmup=args.warmup, batch=args.batch, threads=args.threads,
                    seed=args.sample_seed)
    print(res.summary())
    if args.csv:
        Path(args.csv).write_text(res.to_csv(), newline="")
        png = plot_latency(res, figure_path(args.csv, "latency"))
        print(f"wrote {args.csv} and {png}")
    return EXIT_OK


def read_blob(path, g: ModelGraph) -> np.ndarray:
    cfg = g.config
    per = cfg.in_channels * cfg.input_res * cfg.input_res
    raw = Path(path).read_bytes()
    if not raw or len(raw) % (4 * per):
        raise ShapeError(f"{path}: {len(raw)} bytes is not a whole number of "
                         f"{cfg.in_channels}x{cfg.input_res}x{cfg.input_res} f32 samples")
    x = np.frombuffer(raw, dtype="<f4").reshape(-1, cfg.in_channels, cfg.input_res, cfg.input_res)
    return x.astype(g.dtype)


def embed(g: ModelGraph, x: np.ndarray, workers: int = 1) -> np.ndarray:
    """Embeddings as little-endian f32, one sample at a time.

    Per-sample evaluation keeps each output independent of batch size and of
    how ``workers`` threads split the batch, so results are bitwise reproducible.
    """
    if workers < 1:
        raise UsageError("--workers must be >= 1")

    def run(i):
        return forward(g, x[i:i + 1])[0]

    if workers == 1 or len(x) == 1:
        rows = [run(i) for i in range(len(x))]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(x))) as pool:
            rows = list(pool.map(run, range(len(x))))
    return np.stack(rows).astype("<f4")


def cmd_infer(args) -> int:
    g = weights.load(args.input_model)
    x = read_blob(args.input, g)
    y = embed(g, x, args.workers)
    Path(args.out).write_bytes(y.tobytes())
    print(f"wrote {len(y)} x {y.shape[1]} embeddings to {args.out}")
    return EXIT_OK


def _add_model_args(p, need_in=False):
    if need_in:
        p.add_argument("--in", dest="input_model", required=True, help="weight file")
        return
    p.add_argument("--in", dest="input_model", help="weight file (instead of --variant)")
    p.add_argument("--variant", type=str.upper, choices=["XS", "S", "M", "L"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", action="append", metavar="KNOB=VALUE",
                   help="kinds=R,R,RL,RL, n_head=5, norm=layernorm, activation=gelu, mhla=v1 (repeatable)")
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--no-calibrate", action="store_true",
                   help="keep identity BN statistics instead of calibrating on seeded inputs")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facelivt", description="FaceLiVT inference toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a train-form model and write its weight file")
    _add_model_args(p)
    p.add_argument("--out", help="weight file to write")
    p.set_defaults(func=cmd_build)

    for name, func, help_ in (("fuse", cmd_fuse, "fuse a train-form model and check equivalence"),
                              ("verify", cmd_verify, "fuse internally and check equivalence only")):
        p = sub.add_parser(name, help=help_)
        _add_model_args(p)
        if name == "fuse":
            p.add_argument("--out", help="deploy-form weight file to write")
        p.add_argument("--tol", type=float, default=None, help="max-abs tolerance (1e-4 f32, 1e-9 f64)")
        p.add_argument("--samples", type=int, default=16)
        p.add_argument("--sample-seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("count", help="per-layer params / MAdds CSV")
    _add_model_args(p)
    p.add_argument("--form", choices=["train", "deploy"], default="deploy")
    p.add_argument("--csv", help="write CSV here (plus a stage bar chart); default stdout")
    p.add_argument("--verbose", action="store_true", help="add buffers and elem_ops columns")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", help="single-threaded latency loop")
    _add_model_args(p)
    p.add_argument("--form", choices=["train", "deploy"], default="deploy")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--csv", help="per-run latency CSV (plus a latency figure)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("infer", help="embed a raw f32 blob of Bx3x112x112 inputs in [-1, 1]")
    _add_model_args(p, need_in=True)
    p.add_argument("--input", required=True, help="raw little-endian f32 input blob")
    p.add_argument("--out", required=True, help="raw little-endian f32 Bx512 output")
    p.add_argument("--workers", type=int, default=1, help="data-parallel threads over the batch")
    p.set_defaults(func=cmd_infer)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    for k in ("runs", "samples", "batch", "threads"):
        if getattr(args, k, 1) is not None and getattr(args, k, 1) < 1:
            _err(f"--{k} must be >= 1")
            return EXIT_USAGE
    if getattr(args, "warmup", 0) < 0:
        _err("--warmup must be >= 0")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        _err(str(e))
        return EXIT_USAGE
    except ConfigError as e:
        _err(f"invalid configuration: {e}")
        return EXIT_USAGE
    except AlreadyFusedError as e:
        _err(str(e))
        return EXIT_IO
    except (WeightFileError, ShapeError, OSError) as e:
        _err(str(e))
        return EXIT_IO
    except FaceLiVTError as e:
        _err(str(e))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
