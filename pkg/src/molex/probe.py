"""Layer-wise probing: shallow sigmoid MLPs on mean-pooled hidden states.

Properties:

* ``length_bin``: sequence longer than the median possible length
* ``token_presence``: any token from a small fixed set occurs
* ``pair_order``: aligned pairs swapped (pair tasks) or one adjacent pair of
  positions swapped; blocks are per-token and pooling is a mean, so this is
  invisible to the network and should probe at chance
* ``random``: labels drawn independently of the input (control)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import MolexModel, cross_entropy
from .numerics import Rng, matmul, sigmoid
from .optim import AdamW, ParamGroup
from .tasks import PAD, Dataset

log = logging.getLogger(__name__)

PROPERTIES = ("length_bin", "token_presence", "pair_order", "random")
HIDDEN_GRID = (50, 100, 200)
DROPOUT_GRID = (0.0, 0.1, 0.2)


@dataclass
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 0.0
    num_samples: int = 1200
    hidden_grid: tuple = HIDDEN_GRID
    dropout_grid: tuple = DROPOUT_GRID
    properties: tuple = PROPERTIES


@dataclass
class ProbeReport:
    rows: list = field(default_factory=list)  # dicts: layer, property, accuracy, hidden, dropout, grid

    def best(self, layer: int, prop: str) -> float:
        for r in self.rows:
            if r["layer"] == layer and r["property"] == prop:
                return r["accuracy"]
        raise KeyError((layer, prop))

    def to_csv(self) -> str:
        lines = ["layer,property,accuracy,hidden,dropout"]
        for r in self.rows:
            lines.append(f"{r['layer']},{r['property']},{r['accuracy']:.6f},{r['hidden']},{r['dropout']}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": self.rows}


# --- property labels ----------------------------------------------------------------

def presence_set(tokens, target: float = 0.5) -> np.ndarray:
    """Smallest prefix of token ids whose presence rate reaches ``target``."""
    flat = tokens[..., 0] if tokens.ndim == 3 else tokens
    ids = np.unique(flat[flat != PAD])
    for k in range(1, len(ids) + 1):
        rate = np.mean(np.isin(flat, ids[:k]).any(axis=1))
        if rate >= target:
            return ids[:k]
    return ids


def property_data(prop: str, data: Dataset, rng: Rng):
    """Token array and binary labels for one property."""
    tokens = data.tokens.copy()
    M, N = tokens.shape[:2]
    if prop == "length_bin":
        return tokens, (data.lengths > np.median(np.arange(int(np.min(data.lengths)), N + 1))).astype(np.int64)
    if prop == "token_presence":
        flat = tokens[..., 0] if tokens.ndim == 3 else tokens
        return tokens, np.isin(flat, presence_set(tokens)).any(axis=1).astype(np.int64)
    if prop == "random":
        return tokens, rng.integers(2, M)
    if prop == "pair_order":
        labels = np.zeros(M, dtype=np.int64)
        labels[rng.permutation(M)[: M // 2]] = 1
        for m in np.flatnonzero(labels):
            L = int(data.lengths[m])
            if tokens.ndim == 3:
                tokens[m, :L] = tokens[m, :L, ::-1]
            elif L > 1:
                i = rng.integers(L - 1)
                tokens[m, [i, i + 1]] = tokens[m, [i + 1, i]]
        return tokens, labels
    raise ValueError(f"unknown probe property {prop!r}")


def layer_features(model: MolexModel, tokens, batch_size: int = 256) -> list[np.ndarray]:
    """Mean-pooled ``z_t`` for ``t = 0..T``, one ``(M, D)`` array per layer."""
    N, D = tokens.shape[1], model.config.model_dim
    out = [[] for _ in range(model.config.num_layers + 1)]
    for s in range(0, len(tokens), batch_size):
        fw = model.forward(tokens[s:s + batch_size], pool_only=True)
        for t, z in enumerate(fw.zs):
            out[t].append(z.reshape(-1, N, D).mean(axis=1))
    return [np.concatenate(f) for f in out]


# --- the probe classifier -------------------------------------------------------------

def train_mlp(X, y, Xte, yte, hidden: int, dropout: float, cfg: ProbeConfig, rng: Rng) -> float:
    """Held-out accuracy of a one-hidden-layer sigmoid MLP."""
    D = X.shape[1]
    w = {
        "W1": rng.normal((hidden, D), 1.0 / np.sqrt(D)),
        "b1": np.zeros((1, hidden)),
        "W2": rng.normal((2, hidden), 1.0 / np.sqrt(hidden)),
        "b2": np.zeros((1, 2)),
    }
    opt = AdamW(w, [ParamGroup(list(w), cfg.lr, cfg.weight_decay)])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            h = sigmoid(matmul(X[idx], w["W1"].T) + w["b1"])
            mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout) if dropout > 0 else 1.0
            hd = h * mask
            _, dlog = cross_entropy(matmul(hd, w["W2"].T) + w["b2"], y[idx])
            dh = matmul(dlog, w["W2"]) * mask * h * (1 - h)
            opt.step({
                "W2": matmul(dlog.T, hd), "b2": dlog.sum(0, keepdims=True),
                "W1": matmul(dh.T, X[idx]), "b1": dh.sum(0, keepdims=True),
            })
    h = sigmoid(matmul(Xte, w["W1"].T) + w["b1"])
    pred = np.argmax(matmul(h, w["W2"].T) + w["b2"], axis=1)
    return float(np.mean(pred == yte))


def run_probe(model: MolexModel, data: Dataset, cfg: ProbeConfig | None = None, seed: int = 0) -> ProbeReport:
    """Best held-out accuracy over the grid for every (layer, property) cell."""
    cfg = cfg or ProbeConfig()
    rng = Rng(seed)
    report = ProbeReport()
    for pi, prop in enumerate(cfg.properties):
        if prop == "pair_order" and data.tokens.ndim == 2 and int(np.max(data.lengths)) < 2:
            log.warning("pair_order undefined for length-1 sequences; skipped")
            continue
        tokens, labels = property_data(prop, data, rng.child(pi))
        feats = layer_features(model, tokens)
        half = len(labels) // 2
        for t, F in enumerate(feats):
            mu, sd = F[:half].mean(axis=0), F[:half].std(axis=0) + 1e-8
            Xn = (F - mu) / sd
            grid = {}
            for H in cfg.hidden_grid:
                for p in cfg.dropout_grid:
                    crng = rng.child(1000 * pi + 100 * t + H + int(p * 10))
                    grid[f"{H}/{p}"] = train_mlp(Xn[:half], labels[:half], Xn[half:], labels[half:], H, p, cfg, crng)
            key = max(grid, key=lambda k: (grid[k], -list(grid).index(k)))
            H, p = key.split("/")
            report.rows.append({"layer": t, "property": prop, "accuracy": grid[key],
                                "hidden": int(H), "dropout": float(p), "grid": grid})
    return report
