"""LoRA baseline vs mixing, 5 seeds, on one task; prints the summary table.

    python scripts/sweep.py --config configs/base.cfg --out runs/base
    python scripts/sweep.py --config configs/pair.cfg --out runs/pair
"""
import argparse
import json
from pathlib import Path

from molex.cli import main


def summary(out, variant):
    doc = json.loads((Path(out) / f"metrics_{variant}.json").read_text())
    return doc["summary"]


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/base.cfg")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    for enabled in ("false", "true"):
        code = main(["finetune", "--config", args.config, "--out", args.out, "--set", f"molex.enabled={enabled}"])
        if code:
            raise SystemExit(code)
    print(f"{'variant':<12} {'clean':>16} {'noisy':>16} {'transfer':>16}")
    for v in ("lora", "molex-top1"):
        s = summary(args.out, v)
        cells = []
        for k in ("clean_acc", "noisy_acc", "transfer_acc"):
            cells.append("-" if s[k]["mean"] is None else f"{s[k]['mean']:.4f} +- {s[k]['std']:.4f}")
        print(f"{v:<12} " + " ".join(f"{c:>16}" for c in cells))
