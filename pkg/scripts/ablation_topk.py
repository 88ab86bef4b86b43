"""Top-1 vs Top-2 routing on the same backbone and seeds."""
import argparse
import json
from pathlib import Path

from molex.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/base.cfg")
    ap.add_argument("--out", default="runs/topk")
    args = ap.parse_args()
    for K in (1, 2):
        code = main(["finetune", "--config", args.config, "--out", args.out, "--set", f"molex.K={K}"])
        if code:
            raise SystemExit(code)
    for K in (1, 2):
        s = json.loads((Path(args.out) / f"metrics_molex-top{K}.json").read_text())["summary"]["clean_acc"]
        print(f"top-{K}: {s['mean']:.4f} +- {s['std']:.4f} over {s['n']} seeds")
