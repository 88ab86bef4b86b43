import numpy as np
import pytest

from molex.numerics import Rng
from molex.probe import ProbeConfig, layer_features, presence_set, property_data, run_probe
from molex.tasks import generate, get_task

FAST = ProbeConfig(epochs=8, num_samples=400, hidden_grid=(50,), dropout_grid=(0.0, 0.1))


def _data(model, task="majority", n=400):
    return generate(get_task(task), "test", n, model.config.seq_len, model.config.vocab_size)


@pytest.fixture(scope="module")
def fast_report(tiny_backbone):
    return run_probe(tiny_backbone, _data(tiny_backbone), FAST, seed=0)


def test_report_shape_and_range(fast_report, tiny_backbone):
    T = tiny_backbone.config.num_layers
    assert len(fast_report.rows) == (T + 1) * 4
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in fast_report.rows)
    for r in fast_report.rows:
        assert r["accuracy"] == max(r["grid"].values())
        assert r["hidden"] in FAST.hidden_grid and r["dropout"] in FAST.dropout_grid


def test_length_bin_visible_in_tiny_model(fast_report):
    assert fast_report.best(0, "length_bin") > 0.75


def test_probe_deterministic(fast_report, tiny_backbone):
    again = run_probe(tiny_backbone, _data(tiny_backbone), FAST, seed=0)
    assert again.to_csv() == fast_report.to_csv()


def test_features_match_forward(tiny_backbone):
    data = _data(tiny_backbone, n=20)
    feats = layer_features(tiny_backbone, data.tokens, batch_size=7)
    fw = tiny_backbone.forward(data.tokens)
    N, D = data.tokens.shape[1], tiny_backbone.config.model_dim
    for t, F in enumerate(feats):
        np.testing.assert_allclose(F, fw.zs[t].reshape(-1, N, D).mean(axis=1), atol=1e-12)


def test_property_labels():
    cfg = get_task("pair")
    data = generate(cfg, "test", 400, 16, 64)
    toks, lab = property_data("pair_order", data, Rng(0))
    assert lab.sum() == 200
    m = int(np.flatnonzero(lab)[0])
    L = int(data.lengths[m])
    assert np.array_equal(toks[m, :L], data.tokens[m, :L, ::-1])
    _, pres = property_data("token_presence", data, Rng(0))
    assert 0.4 < pres.mean() < 0.8
    with pytest.raises(ValueError):
        property_data("parity", data, Rng(0))


def test_presence_set_reaches_target():
    tok = generate(get_task("majority"), "test", 300, 16, 64).tokens
    ids = presence_set(tok)
    assert np.mean(np.isin(tok, ids).any(axis=1)) >= 0.5
    assert np.mean(np.isin(tok, ids[:-1]).any(axis=1)) < 0.5 or len(ids) == 1


@pytest.fixture(scope="module")
def full_report(backbone):
    cfg = ProbeConfig()
    return run_probe(backbone, _data(backbone, n=cfg.num_samples), cfg, seed=0)


@pytest.mark.slow
def test_documented_probe_length_bin(full_report):
    assert full_report.best(0, "length_bin") > 0.9


@pytest.mark.slow
def test_documented_probe_random_control(full_report, backbone):
    T = backbone.config.num_layers
    assert all(abs(full_report.best(t, "random") - 0.5) <= 0.05 for t in range(T + 1))
