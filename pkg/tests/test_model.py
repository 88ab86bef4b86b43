import numpy as np
import pytest

from conftest import gradient_errors, small_model
from molex.model import MolexModel, cross_entropy
from molex.numerics import Rng
from molex.routing import GateConfig

GATES = {
    "baseline": None,
    "onehot": GateConfig(),
    "prob_weighted": GateConfig(grad_mode="prob_weighted"),
    "prob_weighted_mean": GateConfig(grad_mode="prob_weighted", batch_agg="mean"),
    "prob_weighted_per_token": GateConfig(grad_mode="prob_weighted", batch_agg="per_token"),
    "prob_weighted_batch_scope": GateConfig(grad_mode="prob_weighted", agg_scope="batch"),
    "top2_mode": GateConfig(K=2),
    "top2_mean": GateConfig(K=2, batch_agg="mean"),
    "top2_per_token": GateConfig(K=2, batch_agg="per_token"),
    "cosine_sigmoid": GateConfig(kind="cosine", proj_dim=3, grad_mode="prob_weighted", sigmoid_scores=True),
    "per_layer_gates": GateConfig(shared=False, grad_mode="prob_weighted"),
    "fixed_alpha": GateConfig(alpha_mode="fixed"),
    "strong_balance": GateConfig(load_balance_coeff=0.5, batch_agg="mean"),
}

SEEDS = range(5)


def batch(seed):
    r = Rng(100 + seed)
    return r.integers(11, (3, 4)), np.array([0, 1, 1])


@pytest.mark.parametrize("name", sorted(GATES))
@pytest.mark.parametrize("seed", SEEDS)
def test_gradients_match_finite_differences(name, seed):
    m = small_model(GATES[name], seed=seed)
    tokens, labels = batch(seed)
    errs = gradient_errors(m, tokens, labels)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_block_and_relu_gradients(seed):
    for kind, act in (("linear", "identity"), ("mlp", "relu"), ("mlp", "sigmoid")):
        m = small_model(GateConfig(grad_mode="prob_weighted"), block_kind=kind, activation=act, seed=seed)
        tokens, labels = batch(seed)
        errs = gradient_errors(m, tokens, labels)
        assert max(errs.values()) < 1e-4, (kind, act, errs)


def test_alpha_and_router_receive_gradient():
    m = small_model(GateConfig(grad_mode="prob_weighted"), seed=1)
    tokens, labels = batch(1)
    fw = m.forward(tokens)
    g = m.backward(fw, cross_entropy(fw.logits, labels)[1])
    assert abs(g["alpha"][0, 0]) > 0 and np.abs(g["router.W"]).sum() > 0


def test_prob_weighted_preserves_forward_values():
    a = small_model(GateConfig(), seed=2)
    b = small_model(GateConfig(grad_mode="prob_weighted"), seed=2)
    tokens, _ = batch(2)
    assert np.array_equal(a.forward(tokens).logits, b.forward(tokens).logits)


@pytest.mark.parametrize("gate", [GateConfig(), GateConfig(batch_agg="mean"), GateConfig(batch_agg="per_token"),
                                  GateConfig(kind="cosine", sigmoid_scores=True), GateConfig(agg_scope="batch")])
def test_inference_path_is_bitwise_identical(gate):
    from concurrent.futures import ThreadPoolExecutor

    m = small_model(gate, seed=4, jitter=1.0)
    r = Rng(8)
    for B in (1, 5, 16):
        tok = r.integers(11, (B, 4))
        ref = m.forward(tok)
        fast = m.forward(tok, infer=True)
        assert np.array_equal(ref.logits, fast.logits)
        assert all(np.array_equal(a, b) for a, b in zip(ref.selections, fast.selections))
        with ThreadPoolExecutor(2) as pool:
            assert np.array_equal(m.forward(tok, infer=True, executor=pool).logits, ref.logits)
            assert np.array_equal(m.forward(tok, executor=pool).logits, ref.logits)


def test_per_sequence_decisions_do_not_depend_on_batch():
    m = small_model(GateConfig(), seed=5, jitter=1.0)
    tok = Rng(3).integers(11, (6, 4))
    full = m.forward(tok).logits
    single = np.concatenate([m.forward(tok[i:i + 1]).logits for i in range(6)])
    assert np.array_equal(full, single)


def test_frozen_hash_ignores_trainables():
    m = small_model(GateConfig(), seed=0)
    h = m.frozen_hash()
    m.weights["head.W"] += 1
    m.weights["router.W"] += 1
    assert m.frozen_hash() == h
    m.weights["layer.0.W1"] = m.weights["layer.0.W1"] + 1
    assert m.frozen_hash() != h


def test_cross_entropy_gradient():
    from molex.numerics import finite_diff_check

    r = Rng(0)
    logits, labels = r.normal((4, 3)), np.array([0, 2, 1, 1])
    _, d = cross_entropy(logits, labels)
    assert finite_diff_check(lambda p: cross_entropy(p, labels)[0], logits, d) < 1e-7
