"""Linear mixing stacks as ensembles of layer compositions, and l2 robustness certificates.

With linear blocks ``u_j(z) = W_j z`` and a fixed route schedule ``i_t``, one
mixing layer is ``z -> z + a W_t z + (1 - a) W_{i_t} z``. Expanding the
recursion writes the whole stack as ``x + sum_j c_j P_j x`` where each ``P_j``
is a product of layer weights (a path) and ``c_j >= 0``.

Predictors follow the column convention ``f(x) = W^T x`` with ``W`` of shape
``(D, C)``; a path matrix ``P`` acting as ``x -> P x`` is the predictor
``W = P^T``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UnsupportedModelError
from .numerics import Rng

COLINEAR_TOL = 1e-9
INCONCLUSIVE_TOL = 1e-6
COND1_RTOL = 1e-12


@dataclass
class LinearStack:
    weights: list  # T square (D, D) matrices
    routes: list  # i_t per layer
    alpha: float

    def __post_init__(self):
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.routes = [int(r) for r in self.routes]
        if len(self.routes) != len(self.weights):
            raise ShapeError("need one route per layer")
        D = self.dim
        for W in self.weights:
            if W.shape != (D, D):
                raise ShapeError(f"stack weights must be square {D}x{D}, got {W.shape}")
        if any(r < 0 or r >= len(self.weights) for r in self.routes):
            raise ShapeError("route outside the stack")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else 0

    def forward(self, x) -> np.ndarray:
        """Direct recursion on a vector or on rows of ``x``."""
        z = np.asarray(x, dtype=np.float64)
        a = self.alpha
        for t, W in enumerate(self.weights):
            z = z + a * (z @ W.T) + (1 - a) * (z @ self.weights[self.routes[t]].T)
        return z

    def sequential(self) -> np.ndarray:
        """Pure composition ``W_{T-1} ... W_0``."""
        P = np.eye(self.dim)
        for W in self.weights:
            P = W @ P
        return P

    def dense(self) -> np.ndarray:
        """The residual backbone ``(I + W_{T-1}) ... (I + W_0)``."""
        P = np.eye(self.dim)
        for W in self.weights:
            P = P + W @ P
        return P


def molex_stack_forward(stack: LinearStack, x) -> np.ndarray:
    """Same stack pushed through the mixing layer implementation with forced routes."""
    from .routing import GateConfig, Router, molex_forward

    z = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T, D = stack.num_layers, stack.dim
    gate = GateConfig(kind="linear", alpha_mode="fixed", alpha=stack.alpha, load_balance_coeff=0.0)
    router = Router("linear", {"W": np.zeros((T, D)), "b": np.zeros((1, T))}, 1.0, stack.alpha)
    eff = [{"W": W} for W in stack.weights]
    for t in range(T):
        z = molex_forward(z, t, eff, "linear", "identity", router, gate, route=stack.routes[t])
    return z.reshape(np.shape(x))


def stack_from_model(weights: dict, config, routes, alpha) -> LinearStack:
    """Linear stack from backbone checkpoint weights (LoRA folded in is the caller's job)."""
    if config.block_kind != "linear":
        raise UnsupportedModelError("certification requires linear blocks")
    return LinearStack([weights[f"layer.{t}.W"] for t in range(config.num_layers)], routes, alpha)


@dataclass
class EnsembleTerm:
    path: tuple
    coeff: float
    composed: np.ndarray

    @property
    def is_identity(self) -> bool:
        return len(self.path) == 0


def compose(weights, path) -> np.ndarray:
    D = weights[0].shape[0] if weights else 0
    P = np.eye(D)
    for j in path:
        P = weights[j] @ P
    return P


def expand_coefficients(routes, alpha, upto=None) -> dict:
    """Path -> coefficient after ``upto`` layers, merging equal paths."""
    terms = {(): 1.0}
    n = len(routes) if upto is None else upto
    for t in range(n):
        new: dict = {}
        for path, c in terms.items():
            for p, w in ((path, c), (path + (t,), alpha * c), (path + (routes[t],), (1 - alpha) * c)):
                new[p] = new.get(p, 0.0) + w
        terms = {p: c for p, c in new.items() if c != 0.0}
    return terms


def unroll(stack: LinearStack, upto: int | None = None) -> list[EnsembleTerm]:
    """Terms ``c_j, P_j`` with ``stack.forward(x) == sum_j c_j P_j x``; identity term first."""
    coeffs = expand_coefficients(stack.routes, stack.alpha, upto)
    paths = sorted(coeffs, key=lambda p: (len(p), p))
    return [EnsembleTerm(p, coeffs[p], compose(stack.weights, p)) for p in paths]


def evaluate_terms(terms, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for term in terms:
        out = out + term.coeff * (x @ term.composed.T)
    return out


def term_bound_check(terms, t: int) -> bool:
    """Non-identity term count of a ``t + 1``-layer expansion is at most ``3^(t+1) - 1``."""
    n = sum(1 for term in terms if not term.is_identity)
    return n <= 3 ** (t + 1) - 1


@dataclass
class TwoLayerSplit:
    f0: np.ndarray
    upcycled: np.ndarray
    remainder: np.ndarray
    alpha: float

    def combined(self) -> np.ndarray:
        return self.alpha * self.f0 + (1 - self.alpha) * self.upcycled + self.remainder


def decompose_two_layer(stack: LinearStack) -> TwoLayerSplit:
    """Split a two-layer stack into the dense model, the upcycled model and a remainder.

    ``a f0 + (1 - a) f_up + R`` equals the mixing forward, with
    ``f_up(x) = x + v_0(x) + v_1(z_1)`` and ``R = (1 - a) a W_1 (W_{i_0} - W_0)``.
    """
    if stack.num_layers != 2:
        raise UnsupportedModelError("two-layer decomposition needs exactly two layers")
    W0, W1 = stack.weights
    V0, V1 = (stack.weights[r] for r in stack.routes)
    a = stack.alpha
    I = np.eye(stack.dim)
    f0 = (I + W1) @ (I + W0)
    z1 = I + a * W0 + (1 - a) * V0
    up = I + V0 + V1 @ z1
    R = (1 - a) * a * W1 @ (V0 - W0)
    return TwoLayerSplit(f0, up, R, a)


# --- certificates ------------------------------------------------------------------

@dataclass
class Certificate:
    y: int
    rivals: list
    margins: np.ndarray
    sensitivities: np.ndarray
    eps_star: float
    correct: bool
    epsilon: float | None = None
    cond1: list = field(default_factory=list)
    noncolinear: object = None  # True, False or "inconclusive"
    applicable: bool = False
    strict_gap: float | None = None

    @property
    def binding_rival(self) -> int:
        return self.rivals[int(np.argmin(_ratios(self.margins, self.sensitivities)))]

    def to_dict(self) -> dict:
        return {
            "y": self.y,
            "per_rival": [
                {"rival": int(r), "margin": float(m), "sensitivity": float(s)}
                for r, m, s in zip(self.rivals, self.margins, self.sensitivities)
            ],
            "eps_star": float(self.eps_star),
            "correct": self.correct,
            "assumptions": {"cond1": list(self.cond1), "noncolinear": self.noncolinear},
            "strict_gap": self.strict_gap,
        }


def _ratios(m, s):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(s > 0, m / np.where(s > 0, s, 1.0), np.where(m > 0, np.inf, 0.0))
    return r


def rival_vectors(W, y) -> np.ndarray:
    """Columns ``W (e_y - e_i)`` for every rival ``i``, stacked as rows."""
    C = W.shape[1]
    return np.stack([W[:, y] - W[:, i] for i in range(C) if i != y]) if C > 1 else np.zeros((0, W.shape[0]))


def certify_single(W, x, y: int, epsilon: float | None = None) -> Certificate:
    """Margins, sensitivities and the exact certified radius of ``f(x) = W^T x``."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if W.ndim != 2 or W.shape[0] != x.size:
        raise ShapeError(f"predictor {W.shape} does not match input of size {x.size}")
    if not 0 <= y < W.shape[1]:
        raise ShapeError("label outside the class range")
    rivals = [i for i in range(W.shape[1]) if i != y]
    V = rival_vectors(W, y)
    margins = V @ x
    sens = np.sqrt(np.sum(V * V, axis=1))
    correct = bool(np.all(margins >= 0))
    eps_star = float(np.min(_ratios(margins, sens))) if correct and rivals else 0.0
    cert = Certificate(y, rivals, margins, sens, eps_star, correct, epsilon)
    if epsilon is not None:
        cert.cond1 = [condition1(margins, sens, epsilon)]
    return cert


def condition1(margins, sens, epsilon) -> bool:
    """``margin / eps >= sensitivity`` for every rival, with a roundoff allowance."""
    slack = margins - epsilon * sens
    return bool(np.all(slack >= -COND1_RTOL * np.maximum(1.0, np.abs(margins))))


def max_sine(vectors) -> float:
    """Largest pairwise sine between nonzero vectors (0 if fewer than two)."""
    vs = [v / np.linalg.norm(v) for v in vectors if np.linalg.norm(v) > 0]
    best = 0.0
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            perp = vs[j] - np.dot(vs[i], vs[j]) * vs[i]
            best = max(best, float(np.linalg.norm(perp)))
    return best


def noncolinear_status(Ws, y) -> object:
    """Non-colinearity of the sensitivity vectors across base models, checked rival by rival."""
    per_rival = [rival_vectors(W, y) for W in Ws]
    worst = math.inf
    for r in range(per_rival[0].shape[0]):
        worst = min(worst, max_sine([v[r] for v in per_rival]))
    if worst == math.inf:
        return False
    if worst <= COLINEAR_TOL:
        return False
    if worst < INCONCLUSIVE_TOL:
        return "inconclusive"
    return True


def certify_ensemble(Ws, coeffs, x, y: int, epsilon: float) -> Certificate:
    """Certificate of ``sum_j c_j W_j^T x`` plus the assumption checks for strictness."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if len(Ws) != len(coeffs) or len(Ws) == 0:
        raise ShapeError("need one coefficient per base model")
    if np.any(coeffs < 0):
        raise ValueError("ensemble coefficients must be nonnegative")
    Wbar = sum(c * np.asarray(W, dtype=np.float64) for c, W in zip(coeffs, Ws))
    cert = certify_single(Wbar, x, y)
    cert.epsilon = epsilon
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    active = [np.asarray(W, dtype=np.float64) for c, W in zip(coeffs, Ws) if c > 0]
    cert.cond1 = []
    for W in active:
        c1 = certify_single(W, x, y)
        cert.cond1.append(c1.correct and epsilon > 0 and condition1(c1.margins, c1.sensitivities, epsilon))
    cert.noncolinear = noncolinear_status(active, y) if len(active) > 1 else False
    cert.applicable = all(cert.cond1) and cert.noncolinear is True
    cert.strict_gap = cert.eps_star - epsilon
    return cert


@dataclass
class Comparison:
    eps_molex: float
    eps_sequential: float
    eps_dense: float
    applicable: bool
    strict: bool
    certificate: Certificate

    def to_dict(self) -> dict:
        return {
            "eps_molex": self.eps_molex,
            "eps_sequential": self.eps_sequential,
            "eps_dense": self.eps_dense,
            "verdict": verdict(self),
            "certificate": self.certificate.to_dict(),
        }


def verdict(cmp: Comparison) -> str:
    if not cmp.applicable:
        return "theorem not applicable"
    return "strictly more robust" if cmp.strict else "violation"


def molex_vs_sequential(stack: LinearStack, x, y: int) -> Comparison:
    """Certified radii of the unrolled mixing stack and of the pure composition.

    The assumptions are checked at ``eps = eps*_sequential``, so they hold when
    every base model is at least as robust as the composition.
    """
    terms = unroll(stack)
    seq = stack.sequential()
    seq_path = tuple(range(stack.num_layers))
    if not any(term.path == seq_path for term in terms):
        raise UnsupportedModelError("sequential composition is not among the base models")
    Ws = [term.composed.T for term in terms]
    cs = [term.coeff for term in terms]
    eps_seq = certify_single(seq.T, x, y).eps_star
    eps_dense = certify_single(stack.dense().T, x, y).eps_star
    cert = certify_ensemble(Ws, cs, x, y, eps_seq)
    applicable = cert.applicable and eps_seq > 0
    cert.applicable = applicable
    return Comparison(cert.eps_star, eps_seq, eps_dense, applicable, cert.eps_star > eps_seq, cert)


def report_json(obj) -> str:
    return json.dumps(obj.to_dict(), indent=2, sort_keys=True)


# --- instances ----------------------------------------------------------------------

def identity_example():
    """``W = I`` (2x2), ``x = (3, 1)``, class 0: margin 2, sensitivity sqrt(2)."""
    return np.eye(2), np.array([3.0, 1.0]), 0


def random_stack(rng: Rng, num_layers: int, dim: int, scale: float = 0.5, alpha=None) -> LinearStack:
    Ws = [rng.normal((dim, dim), scale) for _ in range(num_layers)]
    routes = [int(rng.integers(num_layers)) for _ in range(num_layers)] if num_layers else []
    a = rng.random() if alpha is None else alpha
    return LinearStack(Ws, routes, a)


def random_certified_instance(rng: Rng, num_layers: int = 2, dim: int = 3, max_tries: int = 10000):
    """Random near-identity stack, input and label for which the comparison applies.

    Rejection sampling: keeps draws where the composition classifies correctly,
    is the least robust base model and the sensitivity vectors are not colinear.
    Returns ``(stack, x, y, comparison, tries)``.
    """
    for tries in range(1, max_tries + 1):
        Ws = [np.eye(dim) + rng.normal((dim, dim), 0.3) for _ in range(num_layers)]
        routes = [int(rng.integers(num_layers)) for _ in range(num_layers)]
        a = 0.2 + 0.6 * rng.random()
        stack = LinearStack(Ws, routes, a)
        x = rng.normal((dim,), 1.0)
        y = int(np.argmax(stack.sequential() @ x))
        cmp = molex_vs_sequential(stack, x, y)
        if cmp.applicable:
            return stack, x, y, cmp, tries
    raise RuntimeError("no assumption-satisfying instance found")
