"""Command line: ``molex <pretrain|finetune|eval|certify|probe|heatmap|timing>``.

Exit codes: 0 ok, 2 bad configuration or input file, 3 numeric failure,
4 certification of a nonlinear model.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .backbone import BackboneConfig, load_checkpoint, save_checkpoint
from .ensemble import (
    LinearStack,
    certify_single,
    identity_example,
    molex_vs_sequential,
    random_certified_instance,
    stack_from_model,
)
from .errors import ConfigError, InputError, NumericError, UnsupportedModelError
from .model import MolexModel
from .numerics import Rng
from .probe import run_probe
from .routing import GateConfig, heatmap_csv, normalize_counts
from .tasks import generate, get_task
from .training import (
    finetune_one,
    load_splits,
    metrics_json,
    pretrain_backbone,
    selection_csv,
    summarize,
    timing_report,
    accuracy,
    embedding_rms,
    evaluate_noisy,
    zero_shot_transfer,
    variant_name,
)

log = logging.getLogger("molex")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_UNSUPPORTED = 4
SHADES = " .:-=+*#%@"


# --- checkpoints ------------------------------------------------------------------

def _jsonable(flat: dict) -> dict:
    return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in items.items()} for s, items in flat.items()}


def save_model(path, model: MolexModel, rc: cfgmod.RunConfig, extra: dict | None = None):
    manifest = {
        "config": json.dumps(_jsonable(cfgmod.to_flat(rc)), sort_keys=True),
        "backbone": json.dumps(model.config.to_dict(), sort_keys=True),
        "gate": json.dumps(model.gate.to_dict(), sort_keys=True) if model.gate is not None else "",
        "lora_scale": "" if model.lora_scale is None else repr(model.lora_scale),
        "trainable": ",".join(model.trainable),
    }
    manifest.update(extra or {})
    save_checkpoint(path, model.weights, manifest)


def load_model(path) -> MolexModel:
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise ConfigError(f"no checkpoint at {path}")
    manifest, weights = load_checkpoint(path)
    config = BackboneConfig(**json.loads(manifest["backbone"]))
    gate = GateConfig.from_dict(json.loads(manifest["gate"])) if manifest.get("gate") else None
    scale = float(manifest["lora_scale"]) if manifest.get("lora_scale") else None
    trainable = [n for n in manifest.get("trainable", "").split(",") if n]
    model = MolexModel(config, weights, gate, scale, trainable)
    model.info = {k: v for k, v in manifest.items() if k not in ("config", "backbone", "gate")}
    return model


def backbone_for(rc: cfgmod.RunConfig, args) -> MolexModel:
    """``--checkpoint`` if given, else ``OUT/backbone``, else pretrain and save there."""
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "backbone"
    if (path / "manifest.txt").exists():
        model = load_model(path)
        if model.config.to_dict() | {"num_classes": 0} != rc.backbone.to_dict() | {"num_classes": 0}:
            raise ConfigError(f"checkpoint {path} was built with a different [backbone] section")
        return model
    if args.checkpoint:
        raise ConfigError(f"no checkpoint at {path}")
    return _pretrain(rc, args, path)


def _pretrain(rc, args, path):
    seed = rc.train.pretrain_seed if args.seed is None else args.seed
    model = pretrain_backbone(rc.backbone, get_task("pretrain"), seed, rc.train.pretrain)
    save_model(path, model, rc, {"base_task_acc": repr(model.info["base_task_acc"]), "seed": str(seed)})
    return model


# --- commands ---------------------------------------------------------------------

def cmd_pretrain(rc, args) -> int:
    out = Path(args.out)
    model = _pretrain(rc, args, out / "backbone")
    (out / "pretrain.json").write_text(json.dumps(model.info, indent=2, sort_keys=True) + "\n")
    print(f"base-task accuracy {model.info['base_task_acc']:.4f}; checkpoint {out / 'backbone'}")
    return 0


def cmd_finetune(rc, args) -> int:
    out = Path(args.out)
    backbone = backbone_for(rc, args)
    task = get_task(rc.task.name)
    transfer = get_task(rc.task.transfer) if rc.task.transfer else None
    train = rc.train_config()
    gate = rc.gate
    variant = variant_name(gate)
    seeds = [args.seed] if args.seed is not None else list(rc.train.seeds)
    data = load_splits(task, train, backbone.config)
    records = []
    for seed in seeds:
        rec, model = finetune_one(backbone, gate, task, seed, train, data, transfer)
        run_dir = out / variant / f"seed{seed}"
        if rec.selection_counts is not None:
            csv_path = out / variant / f"selection_seed{seed}.csv"
            csv_path.parent.mkdir(parents=True, exist_ok=True)
            csv_path.write_text(selection_csv(rec, backbone.config.num_layers))
            rec.selection_csv_path = str(csv_path.relative_to(out))
        save_model(run_dir, model, rc, {"seed": str(seed), "variant": variant})
        records.append(rec)
        print(f"{variant} seed {seed}: best val {rec.best_metric:.4f} clean {rec.clean_acc:.4f} "
              f"noisy {rec.noisy_acc:.4f}" + ("" if rec.transfer_acc is None else f" transfer {rec.transfer_acc:.4f}")
              + ("" if rec.failed is None else f" FAILED {rec.failed}"))
    summary = {k: summarize(records, k) for k in ("best_metric", "clean_acc", "noisy_acc", "transfer_acc")}
    text = metrics_json({"records": records, "summary": summary}, {"task": task.name, "variant": variant})
    (out / f"metrics_{variant}.json").write_text(text + "\n")
    if all(r.failed is not None for r in records):
        return EXIT_NUMERIC
    return 0


def cmd_eval(rc, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint pointing at a fine-tuned run")
    model = load_model(args.checkpoint)
    if "head.W" not in model.weights or model.lora_scale is None:
        raise ConfigError("eval needs a fine-tuned checkpoint")
    train = rc.train_config()
    task = get_task(rc.task.name)
    data = generate(task, "test", train.test_size, model.config.seq_len, model.config.vocab_size)
    res = {"task": task.name, "clean_acc": accuracy(model, data)}
    sigma = train.noise_scale * embedding_rms(model)
    res["sigma"] = sigma
    res["noisy_acc"] = evaluate_noisy(model, data, sigma, train.eval_seed)
    if rc.task.transfer:
        tt = get_task(rc.task.transfer)
        tdata = generate(tt, "test", train.test_size, model.config.seq_len, model.config.vocab_size)
        res["transfer_acc"] = zero_shot_transfer(model, tdata, tt.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    print(json.dumps(res, sort_keys=True))
    return 0


def _parse_vector(s):
    return np.array([float(v) for v in s.split(",")])


def cmd_certify(rc, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.example == "identity":
        W, x, y = identity_example()
        cert = certify_single(W, x, y)
        report = {"single": cert.to_dict()}
        print(f"eps* = {cert.eps_star:.12g}")
    else:
        if args.stack:
            spec = json.loads(Path(args.stack).read_text())
            stack = LinearStack(spec["weights"], spec["routes"], spec["alpha"])
            x, y = np.array(spec["x"], dtype=np.float64), int(spec["y"])
        elif args.checkpoint:
            model = load_model(args.checkpoint)
            T = model.config.num_layers
            if model.config.block_kind != "linear":
                raise UnsupportedModelError("certification requires linear blocks")
            routes = [int(r) for r in args.routes.split(",")] if args.routes else list(range(T))
            alpha = args.alpha if args.alpha is not None else rc.molex.gate.alpha
            stack = stack_from_model(model.weights, model.config, routes, alpha)
            if args.x is None:
                raise ConfigError("certifying a checkpoint needs --x")
            x = _parse_vector(args.x)
            y = int(np.argmax(stack.sequential() @ x)) if args.y is None else args.y
        else:
            seed = 0 if args.seed is None else args.seed
            stack, x, y, _, _ = random_certified_instance(Rng(seed))
        cmp = molex_vs_sequential(stack, x, y)
        report = cmp.to_dict()
        report["alpha"] = stack.alpha
        report["routes"] = stack.routes
        print(f"eps*_molex = {cmp.eps_molex:.12g}  eps*_sequential = {cmp.eps_sequential:.12g}  "
              f"eps*_dense = {cmp.eps_dense:.12g}")
        print(f"verdict: {report['verdict']}")
    (out / "certificate.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_probe(rc, args) -> int:
    model = backbone_for(rc, args) if not args.checkpoint else load_model(args.checkpoint)
    task = get_task(rc.task.name)
    data = generate(task, "test", rc.probe.num_samples, model.config.seq_len, model.config.vocab_size)
    seed = 0 if args.seed is None else args.seed
    report = run_probe(model, data, rc.probe, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.csv").write_text(report.to_csv())
    (out / "probe.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(report.to_csv(), end="")
    return 0


def read_selection_csv(text: str) -> np.ndarray:
    lines = [l for l in text.strip().splitlines() if l.strip()]
    if not lines:
        raise InputError("empty selection CSV")
    head = lines[0].split(",")
    T = len(head) - 1
    if head[0] != "layer" or head[1:] != [f"expert_{j}" for j in range(T)]:
        raise InputError("selection CSV header must be layer,expert_0,...")
    rows = []
    for n, line in enumerate(lines[1:], 2):
        cells = line.split(",")
        if len(cells) != T + 1 or cells[0] != str(n - 2):
            raise InputError(f"line {n}: malformed selection row")
        try:
            vals = [float(c) for c in cells[1:]]
        except ValueError:
            raise InputError(f"line {n}: non-numeric entry") from None
        if any(v < 0 or not np.isfinite(v) for v in vals):
            raise InputError(f"line {n}: entries must be finite and nonnegative")
        rows.append(vals)
    table = np.array(rows).reshape(-1, T)
    if np.any(table.sum(axis=1) == 0):
        raise InputError("a layer has no routed decisions")
    return table


def render_heatmap(frac) -> str:
    lines = ["     " + "".join(f"{j:>2}" for j in range(frac.shape[1]))]
    for t, row in enumerate(frac):
        cells = [SHADES[min(9, int(v * 10))] * 2 for v in row]
        lines.append(f"{t:>4} " + "".join(cells))
    return "\n".join(lines) + "\n"


def cmd_heatmap(rc, args) -> int:
    if not args.input:
        raise ConfigError("heatmap needs an input selection CSV")
    path = Path(args.input)
    if not path.exists():
        raise InputError(f"no such file {path}")
    frac = normalize_counts(read_selection_csv(path.read_text()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "heatmap.csv").write_text(heatmap_csv(frac))
    text = render_heatmap(frac)
    (out / "heatmap.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_timing(rc, args) -> int:
    backbone = backbone_for(rc, args)
    task = get_task(rc.task.name)
    train = rc.train_config()
    gate = rc.molex.gate
    base = MolexModel.for_finetuning(backbone, None, task.num_classes, train.lora_rank, train.lora_alpha, 0)
    mx = MolexModel.for_finetuning(backbone, gate, task.num_classes, train.lora_rank, train.lora_alpha, 0)
    data = generate(task, "test", max(1000, args.samples), backbone.config.seq_len, backbone.config.vocab_size)
    timing = timing_report({"lora": base, variant_name(gate): mx}, data.tokens)
    params = {k: {"params_total": v.pop("params_total"), "params_trainable": v.pop("params_trainable")}
              for k, v in timing.items()}
    name = variant_name(gate)
    ratio = {"sequential": timing[name]["sec_per_sample"] / timing["lora"]["sec_per_sample"]}
    if "sec_per_sample_parallel" in timing[name]:
        ratio["parallel"] = timing[name]["sec_per_sample_parallel"] / timing["lora"]["sec_per_sample"]
    doc = {"params": params, "timing": {"per_variant": timing, "ratio": ratio}}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timing.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "certify": cmd_certify,
    "probe": cmd_probe,
    "heatmap": cmd_heatmap,
    "timing": cmd_timing,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="molex",
        description="Layer-mixing fine-tuning experiments at desk scale.",
        epilog=cfgmod.help_text() + "\n\nMOLEX_THREADS caps parallel expert evaluation (0 = sequential).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI (or .json) run configuration")
    p.add_argument("--json", action="store_true", help="parse --config as JSON regardless of suffix")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs")
    p.add_argument("--checkpoint", help="backbone or fine-tuned checkpoint directory")
    p.add_argument("--input", help="selection CSV (heatmap)")
    p.add_argument("--stack", help="JSON linear stack spec with weights, routes, alpha, x, y (certify)")
    p.add_argument("--example", choices=["identity", "random"], default="random", help="certify example")
    p.add_argument("--x", help="comma-separated input vector (certify)")
    p.add_argument("--y", type=int, help="label (certify)")
    p.add_argument("--routes", help="comma-separated route schedule (certify)")
    p.add_argument("--alpha", type=float, help="mixing weight (certify)")
    p.add_argument("--samples", type=int, default=1000, help="timing samples (>= 1000)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_run_config(args) -> cfgmod.RunConfig:
    if args.config:
        rc = cfgmod.load(args.config, "json" if args.json else None)
    else:
        rc = cfgmod.from_flat({"task": {"name": "majority"}})
    return cfgmod.apply_overrides(rc, args.set)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = load_run_config(args)
        return COMMANDS[args.command](rc, args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UnsupportedModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED


if __name__ == "__main__":
    sys.exit(main())
