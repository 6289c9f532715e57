"""Seeded SPHERE reconstructions used to freeze the end-to-end thresholds.

Each seed regenerates the dataset and trains NG+P with the desk defaults.

    python3 scripts/calibrate.py --seeds 0 1 2 --out runs/calibrate
"""
import argparse
import json
import time
from pathlib import Path

import torch

from hashsdf import pipeline
from hashsdf.config import RunConfig
from hashsdf.synthetic import load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--scene", default="SPHERE")
    ap.add_argument("--out", default="runs/calibrate")
    args = ap.parse_args()
    torch.set_num_threads(1)

    rows = []
    for seed in args.seeds:
        cfg = RunConfig(scene=args.scene, mode="NG+P", seed=seed)
        root = Path(args.out) / f"seed{seed}"
        data = pipeline.generate(cfg, root / "data")
        start = time.time()
        trainer = pipeline.train(cfg, data, root / "run")
        elapsed = time.time() - start
        m = pipeline.evaluate(pipeline.model_from_trainer(trainer), load_dataset(data))
        row = {"seed": seed, "train_s": round(elapsed, 1),
               **{k: v for k, (v, _) in m.items()}}
        rows.append(row)
        print(json.dumps(row), flush=True)

    worst_c = max(r["chamfer"] for r in rows)
    worst_p = min(r["psnr_masked"] for r in rows)
    summary = {"worst_chamfer": worst_c, "worst_psnr_masked": worst_p,
               "max_train_s": max(r["train_s"] for r in rows)}
    print(json.dumps(summary))
    (Path(args.out) / "calibration.json").write_text(json.dumps({"runs": rows, **summary},
                                                                indent=1) + "\n")


if __name__ == "__main__":
    main()
