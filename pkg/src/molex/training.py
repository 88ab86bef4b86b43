"""Pretraining, fine-tuning and the evaluation protocols (clean, noisy, zero-shot, timing)."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .backbone import BackboneConfig, init_backbone_weights, param_count
from .errors import ConfigError, NumericError
from .model import MolexModel, cross_entropy
from .numerics import Rng
from .optim import AdamW, ParamGroup, Schedule
from .routing import GateConfig, SelectionStats, export_selection_stats
from .tasks import PAD, Dataset, TaskSpec, generate, get_task

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    train_size: int = 4000
    test_size: int = 1000


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    lora_rank: int = 8
    lora_alpha: float = 8.0
    train_size: int = 1600
    val_size: int = 400
    test_size: int = 1000
    noise_scale: float = 0.6
    eval_seed: int = 12345

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in types:
                raise ConfigError(f"unknown train key {k!r}")
            out[k] = float(v) if types[k] == "float" else int(v)
        return cls(**out)


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("MOLEX_THREADS", "0")))
    except ValueError:
        raise ConfigError("MOLEX_THREADS must be an integer") from None


def batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


# --- pretraining -------------------------------------------------------------------

def pretrain_backbone(config: BackboneConfig, task: TaskSpec | None = None, seed: int = 0,
                      train: PretrainConfig | None = None) -> MolexModel:
    """Full-parameter training on the base task, then freeze.

    Loss is sequence cross-entropy on the majority concept plus per-token copy
    cross-entropy over non-padding positions.
    """
    task = task or get_task("pretrain")
    train = train or PretrainConfig()
    cfg = BackboneConfig(**{**config.to_dict(), "num_classes": task.num_classes})
    rng = Rng(seed)
    w = init_backbone_weights(cfg, rng.child(0))
    hr = rng.child(1)
    w["head.W"] = hr.normal((task.num_classes, cfg.model_dim), 0.02)
    w["head.b"] = np.zeros((1, task.num_classes))
    w["copy.W"] = hr.normal((cfg.vocab_size, cfg.model_dim), 0.02)
    w["copy.b"] = np.zeros((1, cfg.vocab_size))
    model = MolexModel(cfg, w, None, None, sorted(w))
    data = generate(task, "train", train.train_size, cfg.seq_len, cfg.vocab_size)
    opt = AdamW(model.weights, [ParamGroup(sorted(w), train.lr, train.weight_decay)])
    sched = Schedule(train.steps)
    step = 0
    epoch = 0
    while step < train.steps:
        for idx in batches(len(data), train.batch_size, rng.child(100 + epoch)):
            if step >= train.steps:
                break
            tok = data.tokens[idx]
            fw = model.forward(tok, copy_head=True)
            loss, dlog = cross_entropy(fw.logits, data.labels[idx])
            mask = tok.reshape(-1) != PAD
            tl, dtok_m = cross_entropy(fw.tok_logits[mask], tok.reshape(-1)[mask])
            if not math.isfinite(loss + tl):
                raise NumericError("pretraining loss diverged", step=step)
            dtok = np.zeros_like(fw.tok_logits)
            dtok[mask] = dtok_m
            grads = model.backward(fw, dlog, dtok)
            step += 1
            opt.step(grads, sched(step))
        epoch += 1
    test = generate(task, "test", train.test_size, cfg.seq_len, cfg.vocab_size)
    acc = float(np.mean(model.predict(test.tokens) == test.labels))
    model.trainable = []
    model.info = {"base_task_acc": acc, "seed": seed, "steps": train.steps}
    log.info("pretrained backbone: base-task accuracy %.4f", acc)
    return model


# --- evaluation -------------------------------------------------------------------

def accuracy(model: MolexModel, data: Dataset, noise=None, stats=None, executor=None) -> float:
    return float(np.mean(model.predict(data.tokens, noise=noise, stats=stats, executor=executor) == data.labels))


def embedding_rms(model: MolexModel) -> float:
    return float(np.sqrt(np.mean(model.weights["embedding"] ** 2)))


def evaluate_noisy(model: MolexModel, data: Dataset, sigma: float, seed: int = 12345) -> float:
    """Accuracy with i.i.d. N(0, sigma^2) noise added to the token embeddings."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return accuracy(model, data)
    M, N = data.tokens.shape[:2]
    noise = Rng(seed).normal((M, N, model.config.model_dim), sigma)
    return accuracy(model, data, noise=noise)


def zero_shot_transfer(model: MolexModel, data: Dataset, num_classes: int = 2) -> float:
    """Accuracy on an unseen task, taking the better of the two binary label orientations."""
    if model.config.num_classes != 2 or num_classes != 2:
        raise ConfigError("zero-shot protocol needs binary source and target tasks")
    pred = model.predict(data.tokens)
    direct = float(np.mean(pred == data.labels))
    flipped = float(np.mean((1 - pred) == data.labels))
    return max(direct, flipped)


# --- fine-tuning -------------------------------------------------------------------

@dataclass
class RunRecord:
    seed: int
    task: str
    variant: str
    epoch_metrics: list = field(default_factory=list)
    best_metric: float = float("nan")
    best_epoch: int = -1
    clean_acc: float = float("nan")
    noisy_acc: float = float("nan")
    transfer_acc: float | None = None
    selection_csv_path: str | None = None
    selection_counts: list | None = None
    alpha: list | None = None
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""
    failed: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("selection_counts")
        return d


def variant_name(gate: GateConfig | None) -> str:
    if gate is None:
        return "lora"
    return f"molex-top{gate.K}"


def param_groups(model: MolexModel, train: TrainConfig, gate: GateConfig | None) -> list[ParamGroup]:
    main = [n for n in model.trainable if not n.startswith("router")]
    groups = [ParamGroup(main, train.lr, train.weight_decay)]
    routers = [n for n in model.trainable if n.startswith("router")]
    if routers:
        groups.append(ParamGroup(routers, gate.lr, gate.weight_decay))
    return groups


def finetune_one(pretrained: MolexModel, gate: GateConfig | None, task: TaskSpec, seed: int,
                 train: TrainConfig, data=None, transfer: TaskSpec | None = None):
    """One seed; returns ``(record, model restored to its best epoch)``."""
    cfg = pretrained.config
    if data is None:
        data = load_splits(task, train, cfg)
    model = MolexModel.for_finetuning(pretrained, gate, task.num_classes, train.lora_rank, train.lora_alpha, seed)
    rec = RunRecord(seed, task.name, variant_name(gate))
    rec.frozen_hash_before = model.frozen_hash()
    opt = AdamW(model.weights, param_groups(model, train, gate))
    steps_per_epoch = math.ceil(train.train_size / train.batch_size)
    sched = Schedule(train.epochs * steps_per_epoch)
    rng = Rng(seed).child(7)
    best = None
    step = 0
    try:
        for epoch in range(train.epochs):
            for idx in batches(len(data["train"]), train.batch_size, rng.child(epoch)):
                fw = model.forward(data["train"].tokens[idx])
                loss, dlog = cross_entropy(fw.logits, data["train"].labels[idx])
                if not math.isfinite(loss + fw.lb_loss):
                    raise NumericError("fine-tuning loss diverged", step=step)
                grads = model.backward(fw, dlog)
                step += 1
                opt.step(grads, sched(step))
            val = accuracy(model, data["val"])
            rec.epoch_metrics.append(val)
            if best is None or val > rec.best_metric:
                rec.best_metric, rec.best_epoch = val, epoch
                best = {n: model.weights[n].copy() for n in model.trainable}
    except NumericError as exc:
        rec.failed = str(exc)
        log.warning("seed %d failed: %s", seed, exc)
        rec.frozen_hash_after = model.frozen_hash()
        return rec, model
    for n, v in best.items():
        model.weights[n][...] = v
    stats = SelectionStats(cfg.num_layers) if gate is not None else None
    rec.clean_acc = accuracy(model, data["test"], stats=stats)
    sigma = train.noise_scale * embedding_rms(model)
    rec.noisy_acc = evaluate_noisy(model, data["test"], sigma, train.eval_seed)
    if transfer is not None:
        tdata = generate(transfer, "test", train.test_size, cfg.seq_len, cfg.vocab_size)
        rec.transfer_acc = zero_shot_transfer(model, tdata, transfer.num_classes)
    if stats is not None:
        rec.selection_counts = stats.counts.tolist()
        rec.alpha = model.alpha_values()
    rec.frozen_hash_after = model.frozen_hash()
    return rec, model


def load_splits(task: TaskSpec, train: TrainConfig, cfg: BackboneConfig) -> dict:
    return {
        "train": generate(task, "train", train.train_size, cfg.seq_len, cfg.vocab_size),
        "val": generate(task, "val", train.val_size, cfg.seq_len, cfg.vocab_size),
        "test": generate(task, "test", train.test_size, cfg.seq_len, cfg.vocab_size),
    }


def summarize(records: list[RunRecord], key: str) -> dict:
    vals = sorted(getattr(r, key) for r in records if r.failed is None and getattr(r, key) is not None)
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    a = np.array(vals)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": len(vals)}


def finetune(pretrained: MolexModel, gate: GateConfig | None, task: TaskSpec, seeds,
             train: TrainConfig | None = None, transfer: TaskSpec | None = None) -> dict:
    """Seed sweep. Returns ``{"records": [...], "summary": {...}}``."""
    train = train or TrainConfig()
    data = load_splits(task, train, pretrained.config)
    records = []
    for seed in seeds:
        rec, _ = finetune_one(pretrained, gate, task, seed, train, data, transfer)
        records.append(rec)
    summary = {k: summarize(records, k) for k in ("best_metric", "clean_acc", "noisy_acc", "transfer_acc")}
    return {"records": records, "summary": summary}


def metrics_json(result: dict, extra: dict | None = None) -> str:
    doc = {
        "records": [r.to_json() for r in result["records"]],
        "summary": result["summary"],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def selection_csv(record: RunRecord, num_layers: int) -> str:
    stats = SelectionStats(num_layers, counts=np.array(record.selection_counts, dtype=np.int64))
    stats.total_routed = stats.counts.sum(axis=1)
    return export_selection_stats(stats)


# --- timing -----------------------------------------------------------------------

def time_per_sample(model: MolexModel, tokens, repeats: int = 1, executor=None) -> float:
    for i in range(min(20, len(tokens))):
        model.forward(tokens[i:i + 1], executor=executor, infer=True)
    start = time.perf_counter()
    for _ in range(repeats):
        for i in range(len(tokens)):
            model.forward(tokens[i:i + 1], executor=executor, infer=True)
    return (time.perf_counter() - start) / (repeats * len(tokens))


def timing_report(variants: dict, tokens, threads: int | None = None) -> dict:
    """Per-sample inference seconds and parameter counts for each named model.

    Samples are pushed one at a time. With ``threads > 0`` the two expert
    evaluations of each mixing layer run on a thread pool.
    """
    threads = _threads() if threads is None else threads
    if len(tokens) < 1000:
        raise ValueError("timing needs at least 1000 samples")
    report = {}
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 0 else None
    try:
        for name, model in variants.items():
            entry = {
                "sec_per_sample": time_per_sample(model, tokens),
                "params_total": param_count(model),
                "params_trainable": param_count(model, trainable_only=True),
            }
            if pool is not None and model.gate is not None:
                entry["sec_per_sample_parallel"] = time_per_sample(model, tokens, executor=pool)
            report[name] = entry
    finally:
        if pool is not None:
            pool.shutdown()
    return report
