"""Generate a scene, train one mode, extract and evaluate; prints a metrics report.

    python3 scripts/reconstruct.py --scene SPHERE --mode NG+P --iterations 5000 --out runs/sphere
"""
import argparse
import time
from pathlib import Path

import torch

from hashsdf import pipeline
from hashsdf.config import RunConfig, scaled_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="SPHERE")
    ap.add_argument("--mode", default="NG+P")
    ap.add_argument("--iterations", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    ap.add_argument("--set", nargs="*", default=[], help="key=value overrides")
    ap.add_argument("--out", default="runs/reconstruct")
    args = ap.parse_args()
    torch.set_num_threads(1)

    cfg = RunConfig.load(args.config)
    over = dict(s.split("=", 1) for s in args.set)
    cfg = RunConfig.from_dict({**{k: v for k, v in vars(cfg).items()}, **over,
                               "scene": args.scene, "mode": args.mode, "seed": args.seed})
    if args.iterations is not None and args.iterations != cfg.iterations:
        cfg = scaled_schedule(cfg, args.iterations)
    out = Path(args.out)
    data = out / "data"
    if not (data / "cameras.json").exists():
        pipeline.generate(cfg, data)
    start = time.time()

    def progress(rec):
        if rec["iteration"] % 250 == 0:
            print(f"it {rec['iteration']:6d}  rgb {rec['loss_rgb']:.4f}  eik {rec['loss_eik']:.4f}"
                  f"  curv {rec['loss_curv']:.2f}  eps {rec['eps']:.4f}  L {rec['active_levels']}"
                  f"  s {rec['s']:.1f}  {time.time() - start:.0f}s", flush=True)

    trainer = pipeline.train(cfg, data, out / "run", callback=progress)
    train_time = time.time() - start
    model = pipeline.model_from_trainer(trainer)
    metrics = pipeline.evaluate(model, trainer.dataset)
    metrics["train_time"] = (train_time, "s")
    metrics["total_time"] = (time.time() - start, "s")
    report = pipeline.format_report(metrics, cfg)
    (out / "report.tsv").write_text(report)
    print(report)


if __name__ == "__main__":
    main()
