"""Residual backbone ``z_{t+1} = z_t + u_t(z_t)`` with LoRA-adapted frozen weights.

Blocks act on each token row independently:

* ``linear``: ``u(z) = W z``
* ``mlp``:    ``u(z) = W2 act(W1 z)``

Weights live in a flat ``{name: 2-D array}`` dict using the checkpoint names
``embedding``, ``layer.{t}.W`` / ``layer.{t}.W1`` / ``layer.{t}.W2`` and
``layer.{t}.lora.{target}.A`` / ``.B``.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numerics import ACTIVATIONS, Rng, activation, activation_grad, load_matrix, matmul, save_matrix


@dataclass
class BackboneConfig:
    num_layers: int = 4
    model_dim: int = 32
    block_kind: str = "mlp"
    hidden_dim: int = 64
    activation: str = "gelu"
    num_classes: int = 2
    seq_len: int = 16
    vocab_size: int = 64

    def __post_init__(self):
        if self.num_layers < 0 or self.model_dim < 1 or self.num_classes < 2:
            raise ConfigError("need num_layers >= 0, model_dim >= 1, num_classes >= 2")
        if self.seq_len < 1 or self.vocab_size < 2 or self.hidden_dim < 1:
            raise ConfigError("seq_len, hidden_dim must be positive and vocab_size >= 2")
        if self.block_kind not in ("linear", "mlp"):
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.block_kind == "linear":
            self.activation = "identity"

    @property
    def targets(self) -> tuple[str, ...]:
        return ("W",) if self.block_kind == "linear" else ("W1", "W2")

    def weight_shape(self, target: str) -> tuple[int, int]:
        D, H = self.model_dim, self.hidden_dim
        return {"W": (D, D), "W1": (H, D), "W2": (D, H)}[target]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown backbone key {k!r}")
            out[k] = v if known[k] == "str" else int(v)
        return cls(**out)


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * B @ A`` for one weight of a block."""

    A: np.ndarray  # (r, in)
    B: np.ndarray  # (out, r)
    scale: float
    target: str

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.scale * matmul(self.B, self.A)

    @classmethod
    def init(cls, out_dim, in_dim, rank, lora_alpha, target, rng: Rng, std=0.02):
        return cls(rng.normal((rank, in_dim), std), np.zeros((out_dim, rank)), lora_alpha / rank, target)


def layer_names(t: int, config: BackboneConfig) -> list[str]:
    return [f"layer.{t}.{w}" for w in config.targets]


def lora_names(t: int, target: str) -> tuple[str, str]:
    return f"layer.{t}.lora.{target}.A", f"layer.{t}.lora.{target}.B"


def init_backbone_weights(config: BackboneConfig, rng: Rng, embed_std=1.0, layer_gain=0.5) -> dict:
    D, H = config.model_dim, config.hidden_dim
    w = {"embedding": rng.normal((config.vocab_size, D), embed_std)}
    for t in range(config.num_layers):
        if config.block_kind == "linear":
            w[f"layer.{t}.W"] = rng.normal((D, D), layer_gain / np.sqrt(D))
        else:
            w[f"layer.{t}.W1"] = rng.normal((H, D), 1.0 / np.sqrt(D))
            w[f"layer.{t}.W2"] = rng.normal((D, H), layer_gain / np.sqrt(H))
    return w


# --- block kernels -------------------------------------------------------------

def block_forward(Z, eff: dict, kind: str, act: str):
    """Residual branch of one block on token rows ``Z``; returns ``(out, cache)``."""
    if kind == "linear":
        return matmul(Z, eff["W"].T), (Z,)
    pre = matmul(Z, eff["W1"].T)
    h = activation(pre, act)
    return matmul(h, eff["W2"].T), (Z, pre, h)


def block_backward(dout, cache, eff: dict, kind: str, act: str):
    """Gradients of a block: returns ``(dZ, {target: dW_effective})``."""
    if kind == "linear":
        (Z,) = cache
        return matmul(dout, eff["W"]), {"W": matmul(dout.T, Z)}
    Z, pre, h = cache
    dW2 = matmul(dout.T, h)
    dpre = matmul(dout, eff["W2"]) * activation_grad(pre, act)
    return matmul(dpre, eff["W1"]), {"W1": matmul(dpre.T, Z), "W2": dW2}


def effective_weights(weights: dict, t: int, config: BackboneConfig, lora_scale: float | None) -> dict:
    """Block weights of layer ``t`` with any LoRA update folded in."""
    eff = {}
    for target in config.targets:
        W = weights[f"layer.{t}.{target}"]
        a_name, b_name = lora_names(t, target)
        if lora_scale is not None and a_name in weights:
            W = W + lora_scale * matmul(weights[b_name], weights[a_name])
        eff[target] = W
    return eff


def layer_forward(z, layer: dict, adapters: dict | None = None, block_kind="mlp", act="gelu") -> np.ndarray:
    """Residual branch ``u_t(z)`` for token rows ``z``; the caller adds the skip.

    ``layer`` maps target names (``W`` or ``W1``/``W2``) to frozen weights and
    ``adapters`` maps the same names to :class:`LoraAdapter` objects.
    """
    z = np.asarray(z, dtype=np.float64)
    in_dim = layer["W"].shape[1] if block_kind == "linear" else layer["W1"].shape[1]
    if z.ndim != 2 or z.shape[1] != in_dim:
        raise ShapeError(f"layer_forward: tokens {z.shape}, expected (*, {in_dim})")
    eff = dict(layer)
    for target, ad in (adapters or {}).items():
        eff[target] = eff[target] + ad.delta()
    out, _ = block_forward(z, eff, block_kind, act)
    return out


def embed(tokens, embedding: np.ndarray) -> np.ndarray:
    """Sum of embedding rows over the trailing channel axis when tokens are paired."""
    tokens = np.asarray(tokens)
    V = embedding.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise InputError(f"token index outside vocabulary [0, {V})")
    if tokens.ndim == 3:
        out = embedding[tokens[..., 0]]
        for c in range(1, tokens.shape[-1]):
            out = out + embedding[tokens[..., c]]
        return out
    return embedding[tokens]


def forward_residual(tokens, weights: dict, config: BackboneConfig, lora_scale=None):
    """Plain residual forward of one batch; returns ``(z_T, [z_0, ..., z_T])``.

    ``z_t`` arrays are token rows, shape ``(batch * seq_len, D)``.
    """
    z = embed(tokens, weights["embedding"]).reshape(-1, config.model_dim)
    zs = [z]
    for t in range(config.num_layers):
        eff = effective_weights(weights, t, config, lora_scale)
        u, _ = block_forward(z, eff, config.block_kind, config.activation)
        z = z + u
        zs.append(z)
    return z, zs


# --- bookkeeping -----------------------------------------------------------------

def weights_hash(weights: dict, names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(weights if names is None else names):
        arr = np.ascontiguousarray(weights[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def param_count(model, trainable_only: bool = False) -> int:
    names = model.trainable if trainable_only else model.weights
    return int(sum(model.weights[n].size for n in names))


def lora_param_count(config: BackboneConfig, rank: int) -> int:
    total = 0
    for target in config.targets:
        out_dim, in_dim = config.weight_shape(target)
        total += rank * (in_dim + out_dim)
    return total * config.num_layers


def molex_overhead(num_layers: int, model_dim: int, shared=True, learned_alpha=True, gate_kind="linear", proj_dim=0) -> int:
    """Trainable parameters MoLEx adds on top of the adapted backbone."""
    if gate_kind == "linear":
        per_gate = num_layers * model_dim + num_layers
    else:
        per_gate = proj_dim * model_dim + num_layers * proj_dim
    per_gate += 1 if learned_alpha else 0
    return per_gate if shared else per_gate * num_layers


def save_checkpoint(path, weights: dict, manifest: dict) -> None:
    """Directory with ``manifest.txt`` (``key=value`` lines) and one matrix file per weight."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in manifest.items()]
    lines.append("params=" + ",".join(sorted(weights)))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    for name, arr in weights.items():
        save_matrix(path / f"{name}.mat", arr)


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    manifest = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            manifest[k.strip()] = v.strip()
    names = [n for n in manifest.pop("params", "").split(",") if n]
    weights = {n: load_matrix(path / f"{n}.mat") for n in names}
    return manifest, weights


def pretrain(config: BackboneConfig, task=None, seed: int = 0, **kwargs):
    """Train a backbone on the synthetic base task and return it frozen.

    Thin wrapper over :func:`molex.training.pretrain_backbone`.
    """
    from .training import pretrain_backbone

    return pretrain_backbone(config, task, seed, **kwargs)
