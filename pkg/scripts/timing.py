"""Per-sample inference time of fine-tuned LoRA and mixing models.

Fine-tunes seed 0 of each variant (reusing OUT/backbone), then times 1000
single-sample forwards, with and without the paired-expert thread pool.
"""
import argparse
import json
import os

from molex import config as cfgmod
from molex.cli import backbone_for
from molex.routing import GateConfig
from molex.tasks import generate, get_task
from molex.training import finetune_one, timing_report

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/base.cfg")
    ap.add_argument("--out", default="runs/base")
    ap.add_argument("--checkpoint")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()
    rc = cfgmod.load(args.config)
    bb = backbone_for(rc, args)
    task = get_task(rc.task.name)
    train = rc.train_config()
    models = {}
    for name, gate in (("lora", None), ("molex", rc.molex.gate)):
        _, models[name] = finetune_one(bb, gate, task, 0, train)
    tok = generate(task, "test", 1000, bb.config.seq_len, bb.config.vocab_size).tokens
    rep = timing_report(models, tok, threads=args.threads)
    base = rep["lora"]["sec_per_sample"]
    rep["ratio"] = {"sequential": rep["molex"]["sec_per_sample"] / base}
    if "sec_per_sample_parallel" in rep["molex"]:
        rep["ratio"]["parallel"] = rep["molex"]["sec_per_sample_parallel"] / base
    rep["cpus"] = os.cpu_count()
    print(json.dumps(rep, indent=2, sort_keys=True))
