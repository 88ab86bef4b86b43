import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molex.backbone import BackboneConfig, init_backbone_weights
from molex.ensemble import (
    LinearStack,
    certify_ensemble,
    certify_single,
    decompose_two_layer,
    evaluate_terms,
    identity_example,
    molex_stack_forward,
    molex_vs_sequential,
    random_certified_instance,
    random_stack,
    report_json,
    stack_from_model,
    term_bound_check,
    unroll,
    verdict,
)
from molex.errors import UnsupportedModelError
from molex.numerics import Rng


def brute_force_terms(routes, alpha):
    """Expand every branch of the recursion separately, then collect equal paths."""
    T = len(routes)
    out = {}
    for choice in itertools.product(range(3), repeat=T):
        path, c = (), 1.0
        for t, k in enumerate(choice):
            if k == 1:
                path, c = path + (t,), c * alpha
            elif k == 2:
                path, c = path + (routes[t],), c * (1 - alpha)
        out[path] = out.get(path, 0.0) + c
    return {p: c for p, c in out.items() if c != 0.0}


def test_single_layer_self_route():
    W = Rng(0).normal((3, 3))
    terms = unroll(LinearStack([W], [0], 0.3))
    assert [t.path for t in terms] == [(), (0,)]
    assert terms[0].coeff == 1.0 and abs(terms[1].coeff - 1.0) < 1e-15
    x = Rng(1).normal((3,))
    np.testing.assert_allclose(evaluate_terms(terms, x), (np.eye(3) + W) @ x, atol=1e-12)


def test_two_layer_matches_symbolic_oracle():
    r = Rng(2)
    stack = LinearStack([r.normal((4, 4)), r.normal((4, 4))], [1, 0], 0.95)
    terms = unroll(stack)
    oracle = brute_force_terms([1, 0], 0.95)
    assert {t.path for t in terms} == set(oracle)
    for t in terms:
        assert abs(t.coeff - oracle[t.path]) < 1e-14 and t.coeff >= 0
    X = r.normal((50, 4))
    np.testing.assert_allclose(evaluate_terms(terms, X), molex_stack_forward(stack, X), atol=1e-10, rtol=0)


@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_unroll_matches_mixing_forward(T):
    r = Rng(10 + T)
    for _ in range(5):
        stack = random_stack(r, T, 4)
        terms = unroll(stack)
        X = r.normal((50, 4))
        np.testing.assert_allclose(evaluate_terms(terms, X), molex_stack_forward(stack, X), atol=1e-10, rtol=0)
        np.testing.assert_allclose(stack.forward(X), molex_stack_forward(stack, X), atol=1e-12, rtol=0)
        assert term_bound_check(terms, T - 1)
        oracle = brute_force_terms(stack.routes, stack.alpha)
        assert {t.path: t.coeff for t in terms}.keys() == oracle.keys()


def test_term_bound_small_cases():
    r = Rng(3)
    s = LinearStack([r.normal((2, 2))], [0], 0.5)
    assert sum(not t.is_identity for t in unroll(s)) == 1
    s = LinearStack([r.normal((2, 2)), r.normal((2, 2))], [1, 0], 0.5)
    assert sum(not t.is_identity for t in unroll(s)) <= 8


def test_term_bound_random_four_layer():
    r = Rng(4)
    for _ in range(100):
        stack = random_stack(r, 4, 2)
        for t in range(4):
            assert term_bound_check(unroll(stack, upto=t + 1), t)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10**6), st.floats(0, 1))
def test_every_level_reconstructs_recursion(T, seed, alpha):
    r = Rng(seed)
    stack = random_stack(r, T, 3, alpha=alpha)
    x = r.normal((3,))
    z = x.copy()
    for level in range(T + 1):
        got = evaluate_terms(unroll(stack, upto=level), x)
        np.testing.assert_allclose(got, z, atol=1e-10)
        if level < T:
            W, V = stack.weights[level], stack.weights[stack.routes[level]]
            z = z + alpha * W @ z + (1 - alpha) * V @ z
        assert all(t.coeff >= 0 for t in unroll(stack, upto=level))


def test_nonlinear_stack_is_unsupported():
    cfg = BackboneConfig(num_layers=2, model_dim=3, hidden_dim=4, vocab_size=5)
    w = init_backbone_weights(cfg, Rng(0))
    with pytest.raises(UnsupportedModelError):
        stack_from_model(w, cfg, [0, 1], 0.5)
    lin = BackboneConfig(num_layers=2, model_dim=3, vocab_size=5, block_kind="linear")
    assert stack_from_model(init_backbone_weights(lin, Rng(0)), lin, [1, 0], 0.5).num_layers == 2


# --- two-layer decomposition --------------------------------------------------------

def test_decomposition_identity_random():
    r = Rng(5)
    for _ in range(20):
        stack = LinearStack([r.normal((4, 4)), r.normal((4, 4))], [1, 0], r.random())
        sp = decompose_two_layer(stack)
        W0, W1 = stack.weights
        a = stack.alpha
        np.testing.assert_allclose(sp.remainder, (1 - a) * a * W1 @ (W1 - W0), atol=1e-12)
        X = r.normal((20, 4))
        np.testing.assert_allclose(X @ sp.combined().T, molex_stack_forward(stack, X), atol=1e-10, rtol=0)


def test_decomposition_self_route_and_alpha_one():
    r = Rng(6)
    Ws = [r.normal((3, 3)), r.normal((3, 3))]
    sp = decompose_two_layer(LinearStack(Ws, [0, 1], 0.4))
    assert np.array_equal(sp.remainder, np.zeros((3, 3)))
    np.testing.assert_allclose(sp.upcycled, sp.f0, atol=1e-12)
    sp = decompose_two_layer(LinearStack(Ws, [1, 0], 1.0))
    np.testing.assert_allclose(sp.combined(), sp.f0, atol=1e-12)
    with pytest.raises(UnsupportedModelError):
        decompose_two_layer(LinearStack(Ws + [Ws[0]], [0, 1, 2], 0.5))


# --- certificates ------------------------------------------------------------------

def test_identity_example_radius():
    W, x, y = identity_example()
    c = certify_single(W, x, y)
    assert c.margins[0] == 2.0 and abs(c.sensitivities[0] - np.sqrt(2)) < 1e-15
    assert abs(c.eps_star - np.sqrt(2)) < 1e-9
    # closed-form ball minimum changes sign at eps*
    m, s = c.margins[0], c.sensitivities[0]
    assert m - (c.eps_star - 1e-9) * s > 0 > m - (c.eps_star + 1e-9) * s


def sample_ball(rng, n, dim, radius):
    d = rng.normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius * rng.random(n)[:, None] ** (1 / dim)


@pytest.mark.parametrize("seed", range(5))
def test_perturbations_inside_radius_never_flip(seed):
    r = Rng(seed)
    W, x = r.normal((4, 3)), r.normal((4,))
    y = int(np.argmax(W.T @ x))
    c = certify_single(W, x, y)
    pts = x + sample_ball(r, 1000, 4, 0.999 * c.eps_star)
    # include points on the sphere too
    d = r.normal((500, 4))
    pts = np.vstack([pts, x + 0.999 * c.eps_star * d / np.linalg.norm(d, axis=1, keepdims=True)])
    assert np.all(np.argmax(pts @ W, axis=1) == y)
    v = W[:, y] - W[:, c.binding_rival]
    xa = x - (c.eps_star + 1e-6) * v / np.linalg.norm(v)
    out = W.T @ xa
    assert out[c.binding_rival] >= out[y]


def test_boundary_and_misclassified():
    c = certify_single(np.eye(2), np.array([1.0, 1.0]), 0)
    assert c.eps_star == 0.0 and c.correct
    c = certify_single(np.eye(2), np.array([0.0, 1.0]), 0)
    assert not c.correct and c.eps_star == 0.0


def test_single_model_ensemble_is_single_certificate():
    r = Rng(7)
    W, x = r.normal((3, 3)), r.normal((3,))
    y = int(np.argmax(W.T @ x))
    a = certify_single(W, x, y)
    b = certify_ensemble([W], [1.0], x, y, 0.5 * a.eps_star)
    assert b.eps_star == a.eps_star and np.array_equal(a.margins, b.margins)
    assert b.noncolinear is False and not b.applicable


def test_colinear_models_make_no_claim():
    x = np.array([2.0, 0.0])
    W0 = np.array([[1.0, -1.0], [0.0, 0.0]])
    W1 = 2 * W0
    c = certify_ensemble([W0, W1], [0.5, 0.5], x, 0, 1.0)
    assert c.noncolinear is False and not c.applicable


def test_two_model_strict_gap():
    # sensitivity directions (1,-1)/sqrt2 and (1,0), both scaled so the per-model margin condition holds at eps = 1
    x = np.array([3.0, 0.0])
    v0 = 2.0 * np.array([1.0, -1.0]) / np.sqrt(2)
    v1 = 2.0 * np.array([1.0, 0.0])
    W0 = np.column_stack([v0, np.zeros(2)])
    W1 = np.column_stack([v1, np.zeros(2)])
    for W in (W0, W1):
        assert certify_single(W, x, 0, 1.0).cond1 == [True]
    c = certify_ensemble([W0, W1], [0.5, 0.5], x, 0, 1.0)
    vbar = 0.5 * (v0 + v1)
    closed = (vbar @ x) / np.linalg.norm(vbar)
    assert c.applicable and abs(c.eps_star - closed) < 1e-12
    assert c.strict_gap > 1e-9


def test_alpha_one_collapses_to_residual_model():
    r = Rng(8)
    stack = LinearStack([np.eye(3) + r.normal((3, 3), 0.3) for _ in range(2)], [1, 0], 1.0)
    x = r.normal((3,))
    y = int(np.argmax(stack.dense() @ x))
    cmp = molex_vs_sequential(stack, x, y)
    # at alpha = 1 the mixing stack is the dense residual model exactly
    assert abs(cmp.eps_molex - cmp.eps_dense) < 1e-12


def test_constructed_instance_is_strict():
    stack, x, y, cmp, _ = random_certified_instance(Rng(9))
    assert cmp.applicable and verdict(cmp) == "strictly more robust"
    assert cmp.eps_molex - cmp.eps_sequential > 1e-9
    d = json.loads(report_json(cmp))
    assert set(d["certificate"]) == {"y", "per_rival", "eps_star", "correct", "assumptions", "strict_gap"}


def test_random_instances_never_violate():
    r = Rng(10)
    for _ in range(100):
        _, _, _, cmp, _ = random_certified_instance(r)
        assert cmp.certificate.strict_gap > 1e-9 and cmp.eps_molex - cmp.eps_sequential > 1e-9


def test_argmax_invariant_to_affine_normalization():
    r = Rng(11)
    W, x = r.normal((3, 4)), r.normal((3,))
    out = W.T @ x
    assert np.argmax(out) == np.argmax(2.5 * out + 7.0)
