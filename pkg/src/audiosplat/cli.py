"""Command-line front end for the full pipeline.

Subcommands: synth-data, train-canonical, train-deform, render, report,
bench, viz-triplane, viz-attention. Exit codes: 0 success, 1 usage error,
2 runtime failure. Every subcommand is non-interactive and writes only
under its --out directory.
"""
import argparse
import dataclasses
import sys
from pathlib import Path

from . import evalkit as ev
from . import synthdata as sd
from . import training as tr


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _load_config(args):
    config = tr.load_config(args.config) if args.config else tr.TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "init", None):
        config = dataclasses.replace(config, init_source=args.init)
    return config


def _load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ValueError(f"no checkpoint at {path}")
    return tr.load_checkpoint(path)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_synth_data(args):
    scn = sd.scenario(args.scenario, seed=args.seed or 0)
    manifest = sd.generate(scn, _out_dir(args), threads=args.threads)
    print(f"wrote {manifest.n_frames} frames to {args.out}")
    return 0


def _cmd_train_canonical(args):
    dataset = sd.load_dataset(args.data)
    config = _load_config(args)
    ckpt = tr.train_canonical(dataset, config, out_dir=_out_dir(args))
    print(f"canonical training done at iteration {ckpt.iteration}")
    return 0


def _cmd_train_deform(args):
    if not args.from_scratch and not args.canonical:
        sys.stderr.write("train-deform: needs --canonical CHECKPOINT "
                         "(stage-1 warm start) or --from-scratch\n")
        return 1
    dataset = sd.load_dataset(args.data)
    config = _load_config(args)
    warm = _load_checkpoint(args.canonical) if args.canonical else None
    ckpt = tr.train_deform(dataset, config, warm_start=warm,
                           out_dir=_out_dir(args),
                           from_scratch=args.from_scratch)
    print(f"deformation training done at iteration {ckpt.iteration}")
    return 0


def _frame_list(args, dataset):
    if args.frames:
        return [int(tok) for tok in args.frames.split(",")]
    return dataset.test_indices or list(range(len(dataset)))


def _cmd_render(args):
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = sd.load_dataset(args.data)
    out = _out_dir(args)
    model = tr.build_model(ckpt)
    stack = tr.build_stack(ckpt)
    from . import imageio as io
    for i in _frame_list(args, dataset):
        sample = dataset.frame(i)
        if stack is not None:
            image = tr.render_deformed(model, stack, sample.cond,
                                       sample.background)
        else:
            image = tr.render_canonical(model, sample.cond.camera,
                                        sample.background)
        io.write_png(out / f"render_{i:04d}.png", image)
    print(f"rendered {len(_frame_list(args, dataset))} frames to {args.out}")
    return 0


def _cmd_report(args):
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = sd.load_dataset(args.data)
    result = ev.render_report(ckpt, dataset, _out_dir(args),
                              threads=args.threads)
    print(f"report written to {args.out} "
          f"(mean test psnr {result.mean_test[0]:.2f} dB)")
    return 0


def _cmd_bench(args):
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = sd.load_dataset(args.data)
    result = ev.fps_benchmark(ckpt, dataset, frames=args.frames or 30,
                              out_dir=_out_dir(args))
    print(f"mean fps {result.mean_fps:.2f} "
          f"(condition {result.ms_condition:.2f} ms, "
          f"attend+deform {result.ms_attend:.2f} ms, "
          f"render {result.ms_render:.2f} ms)")
    return 0


def _cmd_viz_triplane(args):
    path = ev.viz_triplane(_load_checkpoint(args.checkpoint), _out_dir(args))
    print(f"wrote {path}")
    return 0


def _cmd_viz_attention(args):
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = sd.load_dataset(args.data)
    path = ev.viz_attention(ckpt, dataset, _out_dir(args))
    print(f"wrote {path}")
    return 0


def _build_parser():
    parser = _Parser(prog="audiosplat",
                     description="audio-driven Gaussian head pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="training config file (key = value)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int,
                       help="worker cap (default: all cores)")
        return p

    p = add("synth-data", _cmd_synth_data, help="generate a synthetic dataset")
    p.add_argument("--scenario", default="default",
                   choices=("default", "static", "reduced"))

    p = add("train-canonical", _cmd_train_canonical,
            help="stage 1: fit the canonical head")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--init", help="position init: point file or 'sphere'")

    p = add("train-deform", _cmd_train_deform,
            help="stage 2: fit audio-driven deformation")
    p.add_argument("--data", required=True)
    p.add_argument("--canonical", help="stage-1 checkpoint to warm-start from")
    p.add_argument("--from-scratch", action="store_true",
                   help="ablation: train without the stage-1 warm start")
    p.add_argument("--init", help="position init: point file or 'sphere'")

    p = add("render", _cmd_render, help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frames", help="comma-separated indices (default: test)")

    p = add("report", _cmd_report, help="full evaluation report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = add("bench", _cmd_bench, help="inference fps benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frames", type=int, help="frames to time (default 30)")

    p = add("viz-triplane", _cmd_viz_triplane,
            help="triplane feature PCA figure")
    p.add_argument("--checkpoint", required=True)

    p = add("viz-attention", _cmd_viz_attention,
            help="per-token attention renders")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1; --help exits 0
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except Exception as exc:
        sys.stderr.write(f"audiosplat {args.command}: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
