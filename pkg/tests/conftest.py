import numpy as np
import pytest

from molex.backbone import BackboneConfig, init_backbone_weights
from molex.model import MolexModel, cross_entropy
from molex.numerics import Rng, finite_diff_check
from molex.training import PretrainConfig, pretrain_backbone

SMALL = dict(num_layers=3, model_dim=5, hidden_dim=6, vocab_size=11, seq_len=4)


def small_model(gate, block_kind="mlp", seed=0, activation="gelu", num_layers=3, jitter=0.3):
    """Tiny fine-tunable model with every trainable tensor pushed away from its init."""
    cfg = BackboneConfig(**{**SMALL, "num_layers": num_layers}, block_kind=block_kind, activation=activation)
    rng = Rng(seed)
    pre = MolexModel(cfg, init_backbone_weights(cfg, rng.child(0)))
    m = MolexModel.for_finetuning(pre, gate, 2, lora_rank=2, lora_alpha=4, seed=seed)
    jr = rng.child(1)
    for n in sorted(m.trainable):
        m.weights[n] = m.weights[n] + jr.normal(m.weights[n].shape, jitter)
    return m


def gradient_errors(m, tokens, labels, names=None):
    """Max relative finite-difference error per trainable tensor, routing frozen."""
    fw = m.forward(tokens)
    _, d = cross_entropy(fw.logits, labels)
    g = m.backward(fw, d)
    route = [c.sel for c in fw.caches] if m.gate is not None else None
    det = None
    if m.gate is not None and m.gate.grad_mode == "prob_weighted" and m.gate.K == 1:
        det = {t: c.p0 for t, c in enumerate(fw.caches)}
    out = {}
    for n in names or m.trainable:
        def loss(p, n=n):
            old = m.weights[n]
            m.weights[n] = p
            try:
                f2 = m.forward(tokens, route=route, detached=det)
                return cross_entropy(f2.logits, labels)[0] + f2.lb_loss
            finally:
                m.weights[n] = old
        out[n] = finite_diff_check(loss, m.weights[n], g[n], h=1e-5)
    return out


@pytest.fixture(scope="session")
def backbone():
    """The documented pretrained backbone (default config, seed 0)."""
    return pretrain_backbone(BackboneConfig(), seed=0)


@pytest.fixture(scope="session")
def tiny_backbone():
    cfg = BackboneConfig(num_layers=3, model_dim=8, hidden_dim=16, seq_len=8, vocab_size=32)
    return pretrain_backbone(cfg, seed=0, train=PretrainConfig(steps=60, train_size=256, test_size=128))


@pytest.fixture
def rng():
    return Rng(1234)


def random_tokens(rng, batch, seq_len, vocab):
    return rng.integers(vocab, (batch, seq_len))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
