"""Command line: ``hsdf {generate,train,extract,render,eval,ablate}``.

On failure every command prints one line to stderr,
``error <CODE>: <message>``, and exits nonzero.  Codes:

    E_CONFIG   bad or unknown configuration value       (exit 2)
    E_INPUT    invalid arguments or input data           (exit 2)
    E_IO       missing / unreadable / unwritable files   (exit 3)
    E_LOCKED   run directory in use by another process   (exit 3)
    E_TRAIN    training diverged (non-finite loss/grad)  (exit 4)
    E_INTERNAL anything else                             (exit 1)
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import pipeline
from .checkpoint import CheckpointError
from .config import MODES, ConfigError, RunConfig
from .field import FieldError
from .geometry import InvalidInput
from .training import LossError, TrainingAborted

EXIT = {"E_CONFIG": 2, "E_INPUT": 2, "E_IO": 3, "E_LOCKED": 3, "E_TRAIN": 4, "E_INTERNAL": 1}


def error_code(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "E_CONFIG"
    if isinstance(exc, pipeline.RunLocked):
        return "E_LOCKED"
    if isinstance(exc, (LossError, TrainingAborted, FieldError)):
        return "E_TRAIN"
    if isinstance(exc, (CheckpointError, OSError)):
        return "E_IO"
    if isinstance(exc, (InvalidInput, ValueError, KeyError)):
        return "E_INPUT"
    return "E_INTERNAL"


def _config(args, **extra) -> RunConfig:
    cfg = RunConfig.load(args.config)
    over = dict(extra)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    return cfg.replace(**over) if over else cfg


def cmd_generate(args) -> int:
    extra = {}
    if args.scene:
        extra["scene"] = args.scene.upper()
    if args.exposure:
        extra["exposure"] = True
    cfg = _config(args, **extra)
    out = Path(args.out or cfg.data_dir or f"data/{cfg.scene.lower()}")
    pipeline.generate(cfg, out)
    print(out)
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.iterations is not None:
        extra["iterations"] = args.iterations
    cfg = _config(args, **extra)
    data = args.data or cfg.data_dir
    if not data:
        raise InvalidInput("no dataset given (--data or data_dir in the config)")
    run = Path(args.out or cfg.out_dir)
    resume = True if args.resume == "latest" else args.resume

    def report(rec):
        if not args.quiet:
            print(f"iter {rec['iteration']} loss {rec['loss']:.5f} rgb {rec['loss_rgb']:.5f} "
                  f"eps {rec['eps']:.5f} levels {rec['active_levels']}", flush=True)
    trainer = pipeline.train(cfg, data, run, resume=resume, callback=report)
    print(pipeline.latest_checkpoint(run) or run)
    return 0 if trainer else 1


def cmd_extract(args) -> int:
    out = Path(args.out or Path(args.checkpoint).with_suffix("." + args.format))
    mesh = pipeline.extract_to_file(args.checkpoint, out, args.resolution, args.format)
    print(f"{out}\t{len(mesh.vertices)} vertices\t{len(mesh.triangles)} triangles")
    return 0


def cmd_render(args) -> int:
    out = Path(args.out or Path(args.checkpoint).parent / "renders")
    for p in pipeline.render_to_dir(args.checkpoint, args.data, out, args.split):
        print(p)
    return 0


def cmd_eval(args) -> int:
    _, report = pipeline.evaluate_checkpoint(args.checkpoint, args.data, args.mesh)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"unknown modes {bad}; choose from {MODES}")
    out = Path(args.out or Path(cfg.out_dir) / "ablation")
    rows = pipeline.ablate(cfg, args.data, modes, args.budget, out)
    table = pipeline.format_ablation(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(table)
    sys.stdout.write(table)
    return 0


class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same single-line contract as runtime errors."""

    def error(self, message):
        print(f"error E_INPUT: {' '.join(message.split())}", file=sys.stderr)
        sys.exit(EXIT["E_INPUT"])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsdf", description="Hash-grid neural SDF reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, mode=False):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help="output path")
        if seed:
            sp.add_argument("--seed", type=int)
        if mode:
            sp.add_argument("--mode", choices=MODES)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    common(g)
    g.add_argument("--scene", help="SPHERE, BOX, TORUS, CSG-DIFF or SPECULAR")
    g.add_argument("--exposure", action="store_true", help="random per-image gain")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a field on a dataset")
    common(t, mode=True)
    t.add_argument("--data")
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", nargs="?", const="latest",
                   help="checkpoint to resume from (default: latest in --out)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="marching cubes mesh from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--resolution", type=int)
    e.add_argument("--format", choices=("obj", "ply"), default="ply")
    e.add_argument("--out")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("render", help="render views (png + depth/normal maps)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--out")
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("eval", help="Chamfer / F1 / PSNR report")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--mesh", help="evaluate this mesh instead of extracting one")
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare gradient modes at a fixed budget")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--modes", default="AG,AG+P,NG,NG+P")
    a.add_argument("--budget", type=int, help="iterations per run (schedule rescaled)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error E_INTERNAL: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - single-line contract
        code = error_code(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error {code}: {msg}", file=sys.stderr)
        return EXIT[code]


if __name__ == "__main__":
    sys.exit(main())
