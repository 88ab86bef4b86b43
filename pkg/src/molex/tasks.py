"""Synthetic token tasks.

The vocabulary is shared by every task: token 0 is padding, every other token
``v`` carries a latent concept ``(v - 1) % num_concepts``. The lower half of the
vocabulary is the "low" surface set, the upper half the "high" set; both sets
cover every concept, which is what makes the shifted-vocabulary transfer task
meaningful.

Task kinds
----------
pretrain
    majority concept of a sequence (``num_concepts`` classes) plus a per-token
    copy target (the token id itself).
majority
    binary: is the most frequent concept in the even-concept group?
pair
    binary paraphrase detection over aligned token pairs ``(a_i, b_i)``:
    label 1 when every ``b_i`` is a different surface token of ``a_i``'s concept,
    label 0 when a quarter to a half of the positions switch to another concept.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numerics import Rng

PAD = 0
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "majority"
    num_classes: int = 2
    seed: int = 0
    vocab: str = "low"
    num_concepts: int = 8
    min_len_frac: float = 0.5
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("pretrain", "majority", "pair"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab not in ("low", "high", "all"):
            raise ConfigError(f"unknown vocab subset {self.vocab!r}")
        if self.kind == "pretrain" and self.num_classes != self.num_concepts:
            raise ConfigError("pretrain task has one class per concept")
        if self.kind in ("majority", "pair") and self.num_classes != 2:
            raise ConfigError(f"{self.kind} task is binary")

    @property
    def is_pair(self) -> bool:
        return self.kind == "pair"


@dataclass
class Dataset:
    tokens: np.ndarray  # (M, N) or (M, N, 2) int64
    labels: np.ndarray  # (M,)
    lengths: np.ndarray  # (M,)
    copy_targets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(
            self.tokens[idx],
            self.labels[idx],
            self.lengths[idx],
            None if self.copy_targets is None else self.copy_targets[idx],
            dict(self.meta),
        )


def concept_of(tokens, num_concepts: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    return np.where(tokens == PAD, -1, (tokens - 1) % num_concepts)


def surface_tokens(vocab_size: int, subset: str) -> np.ndarray:
    toks = np.arange(1, vocab_size)
    half = (vocab_size - 1) // 2
    if subset == "low":
        return toks[:half]
    if subset == "high":
        return toks[half:]
    return toks


def _tokens_by_concept(allowed: np.ndarray, num_concepts: int) -> list[np.ndarray]:
    groups = [allowed[(allowed - 1) % num_concepts == k] for k in range(num_concepts)]
    if any(len(g) == 0 for g in groups):
        raise ConfigError("vocabulary subset does not cover every concept")
    return groups


def _pick(rng: Rng, pool: np.ndarray):
    return int(pool[rng.integers(len(pool))])


def _length(rng: Rng, seq_len: int, min_frac: float) -> int:
    lo = max(2, int(round(seq_len * min_frac)))
    return lo + rng.integers(seq_len - lo + 1)


def _majority_sequence(rng, winner, length, groups, num_concepts):
    """Tokens whose most frequent concept is exactly ``winner``."""
    lead = 2 + rng.integers(3)
    lead = min(lead, length)
    while True:
        background = [rng.integers(num_concepts) for _ in range(length - lead)]
        counts = np.bincount(np.array(background + [winner] * lead, dtype=np.int64), minlength=num_concepts)
        others = np.delete(counts, winner)
        if others.size == 0 or others.max() < counts[winner]:
            break
    concepts = background + [winner] * lead
    order = rng.permutation(length)
    return np.array([_pick(rng, groups[concepts[i]]) for i in order], dtype=np.int64)


def generate(task: TaskSpec, split: str, size: int, seq_len: int, vocab_size: int) -> Dataset:
    """Class-balanced split; ``split`` selects a disjoint RNG stream."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    rng = Rng(task.seed * 1009 + 7).child(SPLITS[split])
    nc = task.num_concepts
    allowed = surface_tokens(vocab_size, task.vocab)
    groups = _tokens_by_concept(allowed, nc)
    labels = np.arange(size, dtype=np.int64) % task.num_classes
    labels = labels[rng.permutation(size)]
    lengths = np.zeros(size, dtype=np.int64)
    shape = (size, seq_len, 2) if task.is_pair else (size, seq_len)
    tokens = np.full(shape, PAD, dtype=np.int64)

    for m in range(size):
        L = _length(rng, seq_len, task.min_len_frac)
        lengths[m] = L
        y = int(labels[m])
        if task.kind == "pretrain":
            tokens[m, :L] = _majority_sequence(rng, y, L, groups, nc)
        elif task.kind == "majority":
            pool = [k for k in range(nc) if (k % 2 == 0) == (y == 1)]
            winner = pool[rng.integers(len(pool))]
            tokens[m, :L] = _majority_sequence(rng, winner, L, groups, nc)
        else:
            a = np.array([_pick(rng, allowed) for _ in range(L)], dtype=np.int64)
            ca = (a - 1) % nc
            target = ca.copy()
            if y == 0:
                lo = max(1, L // 4)
                n_switch = lo + rng.integers(max(1, L // 2 - lo + 1))
                for i in rng.permutation(L)[:n_switch]:
                    target[i] = (ca[i] + 1 + rng.integers(nc - 1)) % nc
            b = np.empty(L, dtype=np.int64)
            for i in range(L):
                pool = groups[target[i]]
                if target[i] == ca[i] and len(pool) > 1:
                    pool = pool[pool != a[i]]
                b[i] = _pick(rng, pool)
            tokens[m, :L, 0] = a
            tokens[m, :L, 1] = b

    copy_targets = tokens.copy() if task.kind == "pretrain" else None
    return Dataset(tokens, labels, lengths, copy_targets, {"task": task.name, "split": split})


DEFAULT_TASKS = {
    "pretrain": TaskSpec(
        "pretrain", kind="pretrain", num_classes=8, seed=1, vocab="all",
        description="majority concept (8-way) plus per-token copy",
    ),
    "majority": TaskSpec(
        "majority", kind="majority", seed=2, vocab="low",
        description="is the most frequent concept even-numbered",
    ),
    "pair": TaskSpec(
        "pair", kind="pair", seed=3, vocab="low",
        description="aligned paraphrase detection on the low vocabulary",
    ),
    "pair_shifted": TaskSpec(
        "pair_shifted", kind="pair", seed=4, vocab="high",
        description="same paraphrase rule on the high vocabulary",
    ),
}


def get_task(name: str) -> TaskSpec:
    try:
        return DEFAULT_TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; known: {sorted(DEFAULT_TASKS)}") from None
