"""Gradient-mode ablation and curvature-warmup comparison on a synthetic scene.

    python3 scripts/ablate.py --scene TORUS --out runs/ablate_torus
    python3 scripts/ablate.py --scene CSG-DIFF --warmup --out runs/warmup_csg
"""
import argparse
import time
from pathlib import Path

import torch

from hashsdf import pipeline
from hashsdf.config import RunConfig, scaled_schedule
from hashsdf.synthetic import load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="TORUS")
    ap.add_argument("--modes", default="NG+P,NG,AG")
    ap.add_argument("--budget", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--warmup", action="store_true",
                    help="compare curvature warmup against full weight from the start (NG+P)")
    ap.add_argument("--out", default="runs/ablate")
    args = ap.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    cfg = RunConfig(scene=args.scene, seed=args.seed)
    data = out / "data"
    if not (data / "cameras.json").exists():
        pipeline.generate(cfg, data)
    start = time.time()
    if args.warmup:
        base = scaled_schedule(cfg.replace(mode="NG+P"), args.budget)
        dataset = load_dataset(data)
        print("variant\tchamfer\tpsnr_masked")
        for name, run_cfg in [("warmup", base), ("no_warmup", base.replace(curv_warmup=0))]:
            trainer = pipeline.train(run_cfg, data, out / name)
            m = pipeline.evaluate(pipeline.model_from_trainer(trainer), dataset)
            print(f"{name}\t{m['chamfer'][0]:.5f}\t{m['psnr_masked'][0]:.2f}", flush=True)
    else:
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        rows = pipeline.ablate(cfg, data, modes, args.budget, out / "runs")
        text = pipeline.format_ablation(rows)
        (out / "ablation.tsv").write_text(text)
        print(text)
    print(f"total {time.time() - start:.0f}s")


if __name__ == "__main__":
    main()
