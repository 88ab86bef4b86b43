"""The fine-tunable network: frozen backbone, LoRA adapters, optional layer mixing, pooled head.

Forward and backward are written out by hand; every gradient here is checked
against central differences in the test-suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    BackboneConfig,
    block_backward,
    block_forward,
    effective_weights,
    embed,
    lora_names,
    weights_hash,
)
from .errors import ConfigError
from .numerics import Rng, matmul, row_softmax
from .routing import GateConfig, Router, SelectionStats, molex_step, molex_step_backward, molex_step_infer, unit_ids


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    P = row_softmax(logits)
    n = len(labels)
    idx = np.arange(n)
    loss = -float(np.mean(np.log(np.maximum(P[idx, labels], 1e-300))))
    d = P.copy()
    d[idx, labels] -= 1.0
    return loss, d / n


@dataclass
class Forward:
    logits: np.ndarray
    tok_logits: np.ndarray | None
    lb_loss: float
    zs: list
    tokens: np.ndarray
    batch: int
    eff: list
    caches: list = field(default_factory=list)
    selections: list = field(default_factory=list)


class MolexModel:
    """Flat-weight model. ``gate=None`` gives the plain LoRA baseline."""

    def __init__(self, config: BackboneConfig, weights: dict, gate: GateConfig | None = None,
                 lora_scale: float | None = None, trainable=None):
        self.config = config
        self.weights = weights
        self.gate = gate
        self.lora_scale = lora_scale
        self.trainable = list(trainable or [])
        if gate is not None:
            gate.check_layers(config.num_layers)

    # --- construction -----------------------------------------------------------------

    @classmethod
    def for_finetuning(cls, pretrained: "MolexModel", gate: GateConfig | None, num_classes: int,
                       lora_rank: int = 8, lora_alpha: float = 8.0, seed: int = 0) -> "MolexModel":
        cfg = pretrained.config
        config = BackboneConfig(**{**cfg.to_dict(), "num_classes": num_classes})
        rng = Rng(seed)
        w = {k: v.copy() for k, v in pretrained.weights.items() if k == "embedding" or k.startswith("layer.")}
        w = {k: v for k, v in w.items() if ".lora." not in k}
        trainable = []
        lrng = rng.child(1)
        for t in range(config.num_layers):
            for target in config.targets:
                out_dim, in_dim = config.weight_shape(target)
                a, b = lora_names(t, target)
                w[a] = lrng.normal((lora_rank, in_dim), 0.02)
                w[b] = np.zeros((out_dim, lora_rank))
                trainable += [a, b]
        hrng = rng.child(2)
        w["head.W"] = hrng.normal((num_classes, config.model_dim), 0.02)
        w["head.b"] = np.zeros((1, num_classes))
        trainable += ["head.W", "head.b"]
        if gate is not None:
            grng = rng.child(3)
            sites = [""] if gate.shared else [f".{t}" for t in range(config.num_layers)]
            for s in sites:
                r = Router.init(gate, config.num_layers, config.model_dim, grng)
                for k, v in r.params.items():
                    w[f"router{s}.{k}"] = v
                    trainable.append(f"router{s}.{k}")
                w[f"alpha{s}"] = np.full((1, 1), gate.alpha)
                if gate.alpha_mode == "learned":
                    trainable.append(f"alpha{s}")
        return cls(config, w, gate, lora_alpha / lora_rank, trainable)

    def copy(self) -> "MolexModel":
        return MolexModel(self.config, {k: v.copy() for k, v in self.weights.items()}, self.gate,
                          self.lora_scale, list(self.trainable))

    def without_gate(self) -> "MolexModel":
        """Same weights with mixing switched off."""
        return MolexModel(self.config, self.weights, None, self.lora_scale, self.trainable)

    @property
    def frozen_names(self) -> list[str]:
        return sorted(n for n in self.weights if n not in set(self.trainable))

    def frozen_hash(self) -> str:
        return weights_hash(self.weights, [n for n in self.frozen_names if n == "embedding" or
                                           (n.startswith("layer.") and ".lora." not in n)])

    def _site(self, t: int) -> str:
        return "" if self.gate.shared else f".{t}"

    def router(self, t: int) -> Router:
        s = self._site(t)
        keys = ("W", "b") if self.gate.kind == "linear" else ("P", "E")
        return Router(self.gate.kind, {k: self.weights[f"router{s}.{k}"] for k in keys},
                      self.gate.temperature, float(self.weights[f"alpha{s}"][0, 0]))

    def effective(self) -> list[dict]:
        return [effective_weights(self.weights, t, self.config, self.lora_scale) for t in range(self.config.num_layers)]

    # --- forward / backward ------------------------------------------------------------

    def forward(self, tokens, noise=None, route=None, detached=None, stats: SelectionStats | None = None,
                executor=None, copy_head: bool = False, pool_only: bool = False, infer: bool = False) -> Forward:
        """Run a batch of token sequences.

        ``route[t]`` forces the selection at layer ``t`` (see :func:`molex_step`);
        ``detached[t]`` fixes the probability-weighted denominators. ``infer``
        takes the cache-free path when it gives the same numbers; the result
        then cannot be passed to :meth:`backward`.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        B = tokens.shape[0]
        N = tokens.shape[1]
        Z = embed(tokens, self.weights["embedding"]).reshape(-1, cfg.model_dim)
        if noise is not None:
            Z = Z + np.asarray(noise).reshape(Z.shape)
        eff = self.effective()
        zs = [Z]
        caches, sels = [], []
        lb_total = 0.0
        fast = False
        if self.gate is not None:
            units, n_units = unit_ids(B, N, self.gate.batch_agg, self.gate.agg_scope)
            fast = (infer and route is None and self.gate.K == 1
                    and self.gate.grad_mode == "onehot")
        for t in range(cfg.num_layers):
            if self.gate is None:
                u, c = block_forward(Z, eff[t], cfg.block_kind, cfg.activation)
                Z = Z + u
            elif fast:
                Z, sel = molex_step_infer(Z, t, eff, cfg.block_kind, cfg.activation, self.router(t),
                                          self.gate, units, n_units, executor)
                c = None
                sels.append(sel)
                if stats is not None:
                    stats.record(t, sel)
            else:
                r = None if route is None else route[t]
                d = None if detached is None else detached.get(t)
                Z, c = molex_step(Z, t, eff, cfg.block_kind, cfg.activation, self.router(t), self.gate,
                                  units, n_units, route=r, detached_p=d, executor=executor)
                lb_total += c.lb
                sels.append(c.sel)
                if stats is not None:
                    stats.record(t, c.sel)
            caches.append(c)
            zs.append(Z)
        lb = lb_total / cfg.num_layers if self.gate is not None and cfg.num_layers else 0.0
        pooled = Z.reshape(B, N, cfg.model_dim).mean(axis=1)
        logits = None if pool_only else matmul(pooled, self.weights["head.W"].T) + self.weights["head.b"]
        tok_logits = None
        if copy_head:
            tok_logits = matmul(Z, self.weights["copy.W"].T) + self.weights["copy.b"]
        return Forward(logits, tok_logits, lb, zs, tokens, B, eff, caches, sels)

    def backward(self, fw: Forward, dlogits, dtok=None) -> dict:
        """Gradients of ``loss(logits) + lb_loss`` for every trainable weight."""
        cfg = self.config
        w = self.weights
        train = set(self.trainable)
        grads = {n: np.zeros_like(w[n]) for n in self.trainable}
        B, N, D = fw.batch, fw.tokens.shape[1], cfg.model_dim
        Z_T = fw.zs[-1]
        pooled = Z_T.reshape(B, N, D).mean(axis=1)
        if "head.W" in train:
            grads["head.W"] += matmul(dlogits.T, pooled)
            grads["head.b"] += dlogits.sum(axis=0, keepdims=True)
        dpooled = matmul(dlogits, w["head.W"])
        dZ = np.repeat(dpooled / N, N, axis=0)
        if dtok is not None:
            if "copy.W" in train:
                grads["copy.W"] += matmul(dtok.T, Z_T)
                grads["copy.b"] += dtok.sum(axis=0, keepdims=True)
            dZ = dZ + matmul(dtok, w["copy.W"])

        eff_grads = [dict() for _ in range(cfg.num_layers)]

        def acc(t, g):
            for k, v in g.items():
                eff_grads[t][k] = eff_grads[t][k] + v if k in eff_grads[t] else v

        for t in reversed(range(cfg.num_layers)):
            c = fw.caches[t]
            if self.gate is None:
                dZu, g = block_backward(dZ, c, fw.eff[t], cfg.block_kind, cfg.activation)
                dZ = dZ + dZu
                acc(t, g)
            else:
                router = self.router(t)
                dZ, lg, rg, dalpha = molex_step_backward(
                    dZ, c, t, fw.eff, cfg.block_kind, cfg.activation, router, self.gate,
                    lb_weight=1.0 / cfg.num_layers)
                for j, g in lg.items():
                    acc(j, g)
                s = self._site(t)
                for k, v in rg.items():
                    if f"router{s}.{k}" in train:
                        grads[f"router{s}.{k}"] += v
                if f"alpha{s}" in train:
                    grads[f"alpha{s}"] += dalpha

        for t in range(cfg.num_layers):
            for target, dW in eff_grads[t].items():
                name = f"layer.{t}.{target}"
                if name in train:
                    grads[name] += dW
                a, b = lora_names(t, target)
                if a in train:
                    grads[a] += self.lora_scale * matmul(w[b].T, dW)
                    grads[b] += self.lora_scale * matmul(dW, w[a].T)

        if "embedding" in train:
            toks = fw.tokens.reshape(B * N, -1)
            for ch in range(toks.shape[1]):
                np.add.at(grads["embedding"], toks[:, ch], dZ)
        return grads

    # --- convenience ------------------------------------------------------------------

    def predict(self, tokens, batch_size: int = 256, noise=None, stats=None, executor=None) -> np.ndarray:
        preds = []
        for s in range(0, len(tokens), batch_size):
            nz = None if noise is None else noise[s:s + batch_size]
            fw = self.forward(tokens[s:s + batch_size], noise=nz, stats=stats, executor=executor, infer=True)
            preds.append(np.argmax(fw.logits, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def alpha_values(self) -> list[float]:
        if self.gate is None:
            return []
        return [self.router(t).alpha for t in range(self.config.num_layers)]


def check_trainable(model: MolexModel):
    missing = [n for n in model.trainable if n not in model.weights]
    if missing:
        raise ConfigError(f"trainable weights missing: {missing}")
