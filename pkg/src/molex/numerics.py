"""Dense float64 kernels, a counter-based RNG and the finite-difference gradient check.

Every matrix is a 2-D ``numpy.float64`` array. ``matmul`` accumulates each
output entry left to right over the inner index, so its result is bitwise
identical to the textbook triple loop regardless of thread count.
"""
from __future__ import annotations

import io
import math
from pathlib import Path

import numba
import numpy as np
from scipy.special import erf

from .errors import InvalidRowError, NumericError, ShapeError

ACTIVATIONS = ("relu", "gelu", "sigmoid", "identity")


@numba.njit(nogil=True, cache=True)
def _matmul_kernel(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]
    return out


def as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    return _matmul_kernel(a, b, out)


def row_softmax(m) -> np.ndarray:
    """Softmax over each row; ``-inf`` entries map to exactly 0."""
    m = as_matrix(m)
    if np.isnan(m).any() or np.isposinf(m).any():
        raise NumericError("row_softmax: NaN or +inf input")
    top = m.max(axis=1, keepdims=True)
    if np.isneginf(top).any():
        bad = np.flatnonzero(np.isneginf(top[:, 0]))
        raise InvalidRowError(f"row_softmax: rows {bad.tolist()} are entirely -inf")
    e = np.exp(m - top)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(m, kind: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if kind == "identity":
        return m
    if kind == "relu":
        return np.maximum(m, 0.0)
    if kind == "gelu":
        return 0.5 * m * (1.0 + erf(m / math.sqrt(2.0)))
    if kind == "sigmoid":
        return sigmoid(m)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(m, kind: str) -> np.ndarray:
    """Elementwise derivative of ``activation(m, kind)`` with respect to ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if kind == "identity":
        return np.ones_like(m)
    if kind == "relu":
        return (m > 0).astype(np.float64)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(m / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * m * m) / math.sqrt(2.0 * math.pi)
        return cdf + m * pdf
    if kind == "sigmoid":
        s = sigmoid(m)
        return s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


def finite_diff_check(loss_fn, params, analytic_grad, h: float = 1e-5) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    ``loss_fn`` receives a perturbed copy of ``params``. The per-coordinate
    error is ``|fd - an| / max(1e-8, |fd| + |an|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != p.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    worst = 0.0
    flat = p.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(loss_fn(p))
        flat[idx] = orig - h
        down = float(loss_fn(p))
        flat[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing coordinate {idx}")
        fd = (up - down) / (2.0 * h)
        an = g.reshape(-1)[idx]
        err = abs(fd - an) / max(1e-8, abs(fd) + abs(an))
        worst = max(worst, err)
    return worst


# --- RNG -------------------------------------------------------------------
# SplitMix64 evaluated at counter positions: word i of a stream with key k is
# mix(k + (i + 1) * GAMMA) mod 2**64. Uniforms take the top 53 bits; normals
# use Box-Muller (cosine branch) on consecutive uniform pairs.

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) % (1 << 64)
        self.counter = 0

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(size))
        u = self.random(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (scale * r * np.cos(2.0 * np.pi * u[:, 1])).reshape(size)

    def integers(self, high: int, size=None):
        u = self.random(size if size is not None else 1)
        out = np.minimum(np.floor(np.asarray(u) * high), high - 1).astype(np.int64)
        return int(out[0]) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def child(self, tag: int) -> "Rng":
        with np.errstate(over="ignore"):
            key = _mix(np.array([self.seed ^ int(_mix(np.array([tag], dtype=np.uint64))[0])], dtype=np.uint64))
        return Rng(int(key[0]))


# --- serialization -----------------------------------------------------------

def dumps_matrix(m) -> str:
    m = as_matrix(m)
    buf = io.StringIO()
    buf.write(f"{m.shape[0]} {m.shape[1]}\n")
    for row in m:
        buf.write(" ".join(f"{v:.17g}" for v in row))
        buf.write("\n")
    return buf.getvalue()


def loads_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ShapeError("empty matrix file")
    rows, cols = (int(v) for v in lines[0].split())
    body = lines[1:]
    if len(body) != rows:
        raise ShapeError(f"header says {rows} rows, found {len(body)}")
    data = np.array([[float(v) for v in ln.split()] for ln in body], dtype=np.float64).reshape(rows, cols)
    return data


def save_matrix(path, m) -> None:
    Path(path).write_text(dumps_matrix(m))


def load_matrix(path) -> np.ndarray:
    return loads_matrix(Path(path).read_text())
