"""Command-line entry point.

Subcommands map one-to-one onto the package's stages: `encode` runs the
toy codec over a directory of frames, `infer` enhances a decoded stream
with trained weights, `train` fits weights on clip directories or the
synthetic set, `bench` measures latency and compute budgets, `ablate`
compares trained variants, `gradcheck` runs the finite-difference suite,
and `count` prints parameter/MAC budgets for a configuration.

Exit codes: 0 on success, 1 when a documented contract is violated, 2 for
unreadable inputs or malformed command lines. A `--config` file holds
`key=value` lines using the flag names with dashes or underscores;
anything given on the command line wins over the file.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench as bench_mod
from . import codec
from . import data as data_mod
from .errors import ContractViolation, ParseError
from .model import ReconConfig, build_params, config_from_params, parameter_shapes
from .params import load_weights, save_weights
from .pipeline import StreamSession, run_stream
from .training import TrainConfig, evaluate_stream_psnr, train

_VARIANTS = ("full", "onlymv", "onlydcn", "onlygl", "nogate")


def _read_config_file(path: str) -> dict[str, str]:
    """Parse `key=value` lines; blank lines and `#` comments are skipped."""
    values: dict[str, str] = {}
    try:
        with open(path, "r") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ParseError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_defaults(
    parser: argparse.ArgumentParser, argv: list[str]
) -> argparse.Namespace:
    """Two-pass parse so explicit flags always beat config-file values.

    The file's keys belong to the subcommand being run, so the defaults are
    installed on that subparser; string defaults pass through each flag's
    type converter exactly like command-line text.
    """
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    found, rest = probe.parse_known_args(argv)
    if found.config:
        file_values = _read_config_file(found.config)
        target = parser
        subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
        if subs and rest and rest[0] in subs[0].choices:
            target = subs[0].choices[rest[0]]
        valid = {a.dest for a in target._actions}
        for key in file_values:
            if key not in valid:
                raise ParseError(f"unknown config key: {key}")
        target.set_defaults(**file_values)
    return parser.parse_args(argv)


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w_str, h_str = text.lower().split("x")
        width, height = int(w_str), int(h_str)
    except ValueError as exc:
        raise ParseError(f"bad resolution {text!r}, expected WIDTHxHEIGHT") from exc
    if width < 1 or height < 1:
        raise ParseError(f"bad resolution {text!r}, dimensions must be positive")
    return width, height


def _recon_config(args: argparse.Namespace) -> ReconConfig:
    return ReconConfig(
        channels=int(args.channels),
        m_blocks=int(args.iblocks),
        n_blocks=int(args.pblocks),
        extract_blocks=int(args.extract_blocks),
        variant=args.variant,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=int, default=32, help="feature width")
    p.add_argument("--iblocks", type=int, default=6, help="I-path trunk depth")
    p.add_argument("--pblocks", type=int, default=3, help="P-path trunk depth")
    p.add_argument("--extract-blocks", type=int, default=3, dest="extract_blocks")
    p.add_argument("--variant", choices=_VARIANTS, default="full")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value defaults file; flags win")
    p.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_encode(args) -> int:
    hr = codec.load_frame_dir(args.input)
    decoded, stream = codec.encode_stream(
        hr,
        scale=int(args.scale),
        gop=int(args.gop),
        block_size=int(args.block),
        search=int(args.search),
        quant=int(args.q),
    )
    codec.save_frame_dir(decoded, args.output)
    import os

    codec.write_sidecar(stream, os.path.join(args.output, "stream.cdap"))
    print(f"encoded {len(decoded)} frames -> {args.output}")
    return 0


def _cmd_infer(args) -> int:
    frames = codec.load_frame_dir(args.lr)
    stream = codec.read_sidecar(args.sidecar)
    params = load_weights(args.weights)
    cfg = config_from_params(params, variant=args.variant)
    import time as _time

    session = StreamSession(params, cfg)
    outputs = []
    times_ms = []
    for frame, record in zip(frames, stream.frames):
        start = _time.perf_counter()
        outputs.append(session.process(frame, record))
        times_ms.append((_time.perf_counter() - start) * 1000.0)
    codec.save_frame_dir(outputs, args.out)

    if args.gt:
        from .metrics import psnr, ssim

        gt = codec.load_frame_dir(args.gt)
        rows = [
            bench_mod.FrameMetrics(
                index=t,
                psnr=psnr(sr, g),
                ssim=ssim(sr, g),
                ms=times_ms[t],
                frame_type=stream.frames[t].frame_type,
            )
            for t, (sr, g) in enumerate(zip(outputs, gt))
        ]
        mean_psnr = float(np.mean([r.psnr for r in rows]))
        mean_ssim = float(np.mean([r.ssim for r in rows]))
        if args.csv:
            bench_mod.write_frame_csv(args.csv, rows)
        print(f"psnr {mean_psnr:.3f} dB  ssim {mean_ssim:.4f}  frames {len(rows)}")
    else:
        print(f"enhanced {len(outputs)} frames -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _recon_config(args)
    tc = TrainConfig(
        iters=int(args.iters),
        batch=int(args.batch),
        clip_len=int(args.clip_len),
        crop=int(args.crop),
        lr=float(args.lr),
        gop=int(args.gop),
        search=int(args.search),
        quant=int(args.q),
        seed=int(args.seed),
    )
    if args.input:
        clips = data_mod.load_clip_dirs(args.input)
    else:
        clips = data_mod.build_dataset(
            seed=int(args.seed),
            clips=int(args.synthetic),
            motion=args.motion,
        )
    params = build_params(cfg, seed=int(args.seed))
    if args.warm_start:
        params = warm_start(params, seed=int(args.seed))

    def progress(rec):
        if rec.iteration % 50 == 0 or rec.iteration == tc.iters - 1:
            print(f"iter {rec.iteration:5d}  loss {rec.loss:.5f}  lr {rec.lr:.2e}")

    params, history = train(params, cfg, tc, clips, progress=progress)
    save_weights(params, args.out)
    if args.log:
        import csv as _csv

        with open(args.log, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["iteration", "loss", "lr"])
            for rec in history:
                writer.writerow([rec.iteration, f"{rec.loss:.6f}", f"{rec.lr:.6e}"])
    print(f"saved weights -> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    width, height = _parse_resolution(args.resolution)
    if args.weights:
        params = load_weights(args.weights)
        cfg = config_from_params(params, variant=args.variant)
    else:
        cfg = _recon_config(args)
        params = build_params(cfg, seed=int(args.seed))

    rng = np.random.default_rng(int(args.seed))
    frames = [
        codec.Frame(rng.random((height, width, 3)).astype(np.float32))
        for _ in range(int(args.frames))
    ]
    decoded, stream = codec.encode_lr(frames, gop=int(args.gop))
    report = bench_mod.benchmark_latency(
        StreamSession(params, cfg), (decoded, stream), repeats=int(args.repeats)
    )
    analytic = bench_mod.count_macs(cfg, (width, height), int(args.gop))
    print(
        bench_mod.render_report(
            f"latency at {width}x{height} (gop {args.gop}, {args.frames} frames, "
            f"{args.repeats} repeats)",
            {
                "median per frame": f"{report.median_ms:.2f} ms ({report.fps:.1f} fps)",
                "median I-frame": f"{report.median_i_ms:.2f} ms",
                "median P-frame": f"{report.median_p_ms:.2f} ms",
                "analytic MACs/frame": f"{analytic:.3e}",
                "params": bench_mod.count_params(params, cfg),
            },
        )
    )
    return 0


def _cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in _VARIANTS:
            raise ParseError(f"unknown variant: {v}")
    import os

    weights = {}
    for v in variants:
        path = os.path.join(args.weights_dir, f"{v}.cdwt")
        if not os.path.isfile(path):
            raise ContractViolation(f"missing weights for {v}: {path}")
        weights[v] = load_weights(path)
    clips = data_mod.build_dataset(
        seed=int(args.seed),
        clips=int(args.clips),
        motion=args.motion,
        encode=True,
        gop=int(args.gop),
    )
    rows = bench_mod.run_ablation(variants, clips, weights)
    if args.csv:
        bench_mod.write_ablation_csv(args.csv, rows)
    for row in rows:
        print(
            f"{row.variant:8s} psnr {row.psnr:7.3f}  ssim {row.ssim:.4f}  "
            f"median {row.median_ms:8.2f} ms  align-MACs {row.align_macs}"
        )
    return 0


def _cmd_gradcheck(args) -> int:
    from .verify import end_to_end_gradcheck

    worst, name = end_to_end_gradcheck(seed=int(args.seed))
    print(f"worst relative gradient error {worst:.3e} ({name})")
    if worst > 1e-4:
        raise ContractViolation("gradient check failed the 1e-4 bound")
    return 0


def _cmd_count(args) -> int:
    width, height = _parse_resolution(args.resolution)
    cfg = _recon_config(args)
    params = build_params(cfg, seed=int(args.seed))
    n_params = bench_mod.count_params(params, cfg)
    shapes = parameter_shapes(cfg)
    macs = bench_mod.count_macs(cfg, (width, height), int(args.gop))
    print(
        bench_mod.render_report(
            f"budget at {width}x{height}, gop {args.gop}",
            {
                "parameters": f"{n_params} ({n_params/1e6:.2f}M, {len(shapes)} tensors)",
                "MACs/frame": f"{macs:.4e} (GOP average)",
                "I-frame MACs": bench_mod.step_macs(cfg, width, height, codec.FrameType.I)["total"],
                "P-frame MACs": bench_mod.step_macs(cfg, width, height, codec.FrameType.P)["total"],
            },
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codecsr",
        description="Codec-prior-driven online video super-resolution.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="downscale and run the toy codec")
    p.add_argument("--input", required=True, help="directory of HR PNG frames")
    p.add_argument("--output", required=True, help="output directory (LR PNGs + sidecar)")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--gop", type=int, default=25)
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--search", type=int, default=16)
    p.add_argument("--q", type=int, default=8)
    _add_common(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("infer", help="enhance a decoded stream with weights")
    p.add_argument("--lr", required=True, help="directory of decoded LR PNGs")
    p.add_argument("--sidecar", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="ground-truth frames for metrics")
    p.add_argument("--csv", help="per-frame metrics output")
    p.add_argument("--variant", choices=_VARIANTS, default="full")
    _add_common(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("train", help="fit weights on clips")
    p.add_argument("--input", help="root of clip directories (HR PNGs); omit for synthetic")
    p.add_argument("--synthetic", type=int, default=10, help="synthetic clip count")
    p.add_argument("--motion", choices=("small", "large"), default="small")
    p.add_argument("--out", required=True, help="weights output path")
    p.add_argument("--log", help="training-curve CSV path")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--clip-len", type=int, default=7, dest="clip_len")
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--gop", type=int, default=8)
    p.add_argument("--search", type=int, default=8)
    p.add_argument("--q", type=int, default=4)
    p.add_argument(
        "--warm-start",
        action="store_true",
        dest="warm_start",
        help="open the zero-started block convs for short schedules",
    )
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("bench", help="latency and budget measurements")
    p.add_argument("--weights", help="trained weights; omit for fresh init")
    p.add_argument("--resolution", default="320x180")
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--gop", type=int, default=25)
    p.add_argument("--repeats", type=int, default=3)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="compare trained variants")
    p.add_argument("--variants", default="full,onlymv,onlydcn,nogate")
    p.add_argument("--weights-dir", required=True, dest="weights_dir")
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--motion", choices=("small", "large"), default="large")
    p.add_argument("--gop", type=int, default=8)
    p.add_argument("--csv")
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("count", help="print parameter and MAC budgets")
    p.add_argument("--resolution", default="320x180")
    p.add_argument("--gop", type=int, default=25)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_count)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_defaults(parser, argv)
        return args.func(args)
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
