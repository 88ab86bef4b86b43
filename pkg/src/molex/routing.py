"""Layer-expert routing: gates, Top-K masking, batch aggregation and the mixing step.

The mixing step at sequential layer ``t`` is

    z_{t+1} = z_t + alpha * u_t(z_t) + (1 - alpha) * v_t(z_t),
    v_t(z)  = sum_j softmax(TopK(g(z)))_j * u_j(z)

where the experts ``u_j`` are the backbone's own (adapted) layers. With
``K = 1`` the softmax of the masked scores is exactly one-hot, so ``v_t`` is the
selected layer's output itself.

Routing decisions are made per *unit*: a token (``per_token``), a sequence,
or the whole batch. Inside a unit the per-token scores are collapsed by

* ``mode``: majority vote over per-token Top-K picks,
* ``mean``: Top-K of the mean per-token probability vector.
"""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .backbone import block_backward, block_forward
from .errors import ConfigError, ShapeError
from .numerics import Rng, matmul, row_softmax, sigmoid

NEG_INF = -np.inf


@dataclass
class GateConfig:
    kind: str = "linear"
    proj_dim: int = 16
    temperature: float = 1.0
    sigmoid_scores: bool = False
    shared: bool = True
    batch_agg: str = "mode"
    agg_scope: str = "sequence"
    K: int = 1
    alpha_mode: str = "learned"
    alpha: float = 0.95
    load_balance_coeff: float = 0.01
    grad_mode: str = "onehot"
    lr: float = 0.1
    weight_decay: float = 0.01
    init_std: float = 0.02

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ConfigError(f"unknown gate kind {self.kind!r}")
        if self.batch_agg not in ("mode", "mean", "per_token"):
            raise ConfigError(f"unknown batch_agg {self.batch_agg!r}")
        if self.agg_scope not in ("sequence", "batch"):
            raise ConfigError(f"unknown agg_scope {self.agg_scope!r}")
        if self.alpha_mode not in ("fixed", "learned"):
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.grad_mode not in ("onehot", "prob_weighted"):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.alpha_mode == "fixed" and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("fixed alpha must lie in [0, 1]")
        if self.load_balance_coeff < 0:
            raise ConfigError("load_balance_coeff must be nonnegative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def check_layers(self, num_layers: int):
        if self.K > num_layers:
            raise ConfigError(f"K={self.K} exceeds the number of layer experts T={num_layers}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GateConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in types:
                raise ConfigError(f"unknown gate key {k!r}")
            out[k] = _coerce(v, types[k])
        return cls(**out)


def _coerce(v, typ: str):
    if not isinstance(v, str):
        return v
    if typ == "bool":
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {v!r}")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


@dataclass
class Router:
    """Gate parameters for one routing site.

    ``params`` holds ``W`` (T x D) and ``b`` (1 x T) for the linear gate, or the
    projection ``P`` (p x D) and expert embeddings ``E`` (T x p) for the cosine gate.
    """

    kind: str
    params: dict
    temperature: float = 1.0
    alpha: float = 0.95

    @property
    def num_experts(self) -> int:
        return (self.params["W"] if self.kind == "linear" else self.params["E"]).shape[0]

    @classmethod
    def init(cls, gate: GateConfig, num_layers: int, model_dim: int, rng: Rng) -> "Router":
        if gate.kind == "linear":
            params = {"W": rng.normal((num_layers, model_dim), gate.init_std), "b": np.zeros((1, num_layers))}
        else:
            params = {
                "P": rng.normal((gate.proj_dim, model_dim), 1.0 / np.sqrt(model_dim)),
                "E": rng.normal((num_layers, gate.proj_dim), 1.0),
            }
        return cls(gate.kind, params, gate.temperature, gate.alpha)


# --- scores ----------------------------------------------------------------------

_NORM_EPS = 1e-12


def gate_scores_raw(Z, router: Router):
    """Pre-sigmoid scores (R x T) and a cache for :func:`gate_scores_backward`."""
    Z = np.asarray(Z, dtype=np.float64)
    p = router.params
    if router.kind == "linear":
        if Z.shape[1] != p["W"].shape[1]:
            raise ShapeError(f"gate: tokens {Z.shape} vs W {p['W'].shape}")
        return matmul(Z, p["W"].T) + p["b"], (Z,)
    if Z.shape[1] != p["P"].shape[1]:
        raise ShapeError(f"gate: tokens {Z.shape} vs P {p['P'].shape}")
    Q = matmul(Z, p["P"].T)
    qn = np.maximum(np.sqrt((Q * Q).sum(axis=1, keepdims=True)), _NORM_EPS)
    en = np.maximum(np.sqrt((p["E"] * p["E"]).sum(axis=1, keepdims=True)), _NORM_EPS)
    Qh, Eh = Q / qn, p["E"] / en
    S = matmul(Qh, Eh.T) / router.temperature
    return S, (Z, Qh, qn, Eh, en)


def gate_scores_backward(dS, cache, router: Router):
    """Returns ``(dZ, {param: grad})`` for upstream gradient ``dS`` on raw scores."""
    p = router.params
    if router.kind == "linear":
        (Z,) = cache
        return matmul(dS, p["W"]), {"W": matmul(dS.T, Z), "b": dS.sum(axis=0, keepdims=True)}
    Z, Qh, qn, Eh, en = cache
    tau = router.temperature
    dQh = matmul(dS, Eh) / tau
    dEh = matmul(dS.T, Qh) / tau
    dQ = (dQh - Qh * (dQh * Qh).sum(axis=1, keepdims=True)) / qn
    dE = (dEh - Eh * (dEh * Eh).sum(axis=1, keepdims=True)) / en
    return matmul(dQ, p["P"]), {"P": matmul(dQ.T, Z), "E": dE}


def gate_scores(z, router: Router, sigmoid_scores: bool = False) -> np.ndarray:
    """Per-token affinity scores, shape ``(N, T)``."""
    S, _ = gate_scores_raw(z, router)
    return sigmoid(S) if sigmoid_scores else S


# --- Top-K and weights ------------------------------------------------------------

def topk_indices(scores, K: int) -> np.ndarray:
    """Indices of the ``K`` largest entries per row, largest first, ties to the lower index."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if K > s.shape[1]:
        raise ConfigError(f"K={K} exceeds {s.shape[1]} experts")
    return np.argsort(-s, axis=1, kind="stable")[:, :K]


def topk(scores, K: int) -> np.ndarray:
    """Keep the ``K`` largest scores, replace the rest by ``-inf``."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ConfigError("topk expects finite scores")
    s2 = np.atleast_2d(s)
    keep = topk_indices(s2, K)
    out = np.full_like(s2, NEG_INF)
    rows = np.arange(s2.shape[0])[:, None]
    out[rows, keep] = s2[rows, keep]
    return out.reshape(s.shape)


def gate_weights(masked) -> np.ndarray:
    m = np.asarray(masked, dtype=np.float64)
    return row_softmax(np.atleast_2d(m)).reshape(m.shape)


def aggregate_batch(per_token_scores, agg: str = "mode") -> int:
    """Single K = 1 decision for a group of tokens."""
    S = np.atleast_2d(np.asarray(per_token_scores, dtype=np.float64))
    if agg == "mode":
        votes = np.bincount(topk_indices(S, 1)[:, 0], minlength=S.shape[1])
        return int(np.argmax(votes))
    if agg == "mean":
        return int(np.argmax(row_softmax(S).mean(axis=0)))
    raise ConfigError(f"aggregate_batch supports mode|mean, got {agg!r}")


# --- load balancing ---------------------------------------------------------------

def load_balance_loss(per_token_probs, selections, coeff: float = 1.0, num_experts: int | None = None) -> float:
    """``coeff * T * sum_j f_j P_j`` with ``f_j`` the share of routing picks going to
    expert ``j`` and ``P_j`` the mean router probability on ``j``."""
    if coeff == 0:
        return 0.0
    P = np.atleast_2d(np.asarray(per_token_probs, dtype=np.float64))
    T = P.shape[1] if num_experts is None else num_experts
    f = np.bincount(np.asarray(selections).reshape(-1), minlength=T) / np.asarray(selections).size
    return float(coeff * T * np.dot(f, P.mean(axis=0)))


# --- telemetry ------------------------------------------------------------------

@dataclass
class SelectionStats:
    num_layers: int
    counts: np.ndarray = None
    total_routed: np.ndarray = None
    log: list = field(default_factory=list)
    keep_log: bool = False

    def __post_init__(self):
        T = self.num_layers
        if self.counts is None:
            self.counts = np.zeros((T, T), dtype=np.int64)
        if self.total_routed is None:
            self.total_routed = np.zeros(T, dtype=np.int64)

    def record(self, t: int, experts) -> None:
        experts = np.asarray(experts, dtype=np.int64).reshape(-1)
        self.counts[t] += np.bincount(experts, minlength=self.num_layers)
        self.total_routed[t] += experts.size
        if self.keep_log:
            self.log.extend((t, int(e)) for e in experts)

    def merge(self, other: "SelectionStats") -> None:
        self.counts += other.counts
        self.total_routed += other.total_routed
        self.log.extend(other.log)

    def counts_csv(self) -> str:
        return _table_csv(self.counts, lambda v: str(int(v)))


def _table_csv(table, fmt) -> str:
    T = table.shape[1]
    buf = io.StringIO()
    buf.write("layer," + ",".join(f"expert_{j}" for j in range(T)) + "\n")
    for t, row in enumerate(table):
        buf.write(f"{t}," + ",".join(fmt(v) for v in row) + "\n")
    return buf.getvalue()


def normalize_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise ValueError("cannot normalize a layer with no routed decisions")
    return counts / totals


def quantize_rows(frac, digits: int = 6) -> np.ndarray:
    """Row fractions as integers in units of ``10^-digits`` that sum exactly to ``10^digits``.

    Largest-remainder rounding; leftover units go to the largest remainders,
    ties to the lower index.
    """
    scale = 10 ** digits
    x = np.asarray(frac, dtype=np.float64) * scale
    q = np.floor(x).astype(np.int64)
    for r in range(q.shape[0]):
        short = scale - int(q[r].sum())
        order = np.argsort(-(x[r] - q[r]), kind="stable")
        q[r, order[:short]] += 1
    return q


def heatmap_csv(counts, digits: int = 6) -> str:
    q = quantize_rows(normalize_counts(counts), digits)
    scale = 10 ** digits
    return _table_csv(q, lambda v: f"{v // scale}.{v % scale:0{digits}d}")


def export_selection_stats(stats: SelectionStats) -> str:
    """Heat-map CSV: row ``t`` holds the fraction of decisions at layer ``t`` picking each expert.

    Six decimals, rounded so every row's printed values add up to exactly 1.
    """
    if np.any(stats.counts.sum(axis=1) != stats.total_routed):
        raise ValueError("selection counts disagree with total_routed")
    return heatmap_csv(stats.counts)


# --- the mixing step ------------------------------------------------------------------

def unit_ids(batch: int, seq_len: int, agg: str, scope: str) -> tuple[np.ndarray, int]:
    """Decision unit of every token row, and the number of units."""
    rows = batch * seq_len
    if agg == "per_token":
        return np.arange(rows), rows
    if scope == "batch":
        return np.zeros(rows, dtype=np.int64), 1
    return np.repeat(np.arange(batch), seq_len), batch


def _aggregate(S, P, units, n_units, agg):
    if agg == "per_token":
        return S, None
    counts = np.bincount(units, minlength=n_units).astype(np.float64)[:, None]
    if agg == "mode":
        sums = np.zeros((n_units, S.shape[1]))
        np.add.at(sums, units, S)
        return sums / counts, counts
    sums = np.zeros((n_units, S.shape[1]))
    np.add.at(sums, units, P)
    pbar = sums / counts
    with np.errstate(divide="ignore"):
        return np.log(pbar), (counts, pbar)


def _select(abar, S, units, n_units, agg, K):
    if agg != "mode":
        return topk_indices(abar, K)
    T = S.shape[1]
    picks = topk_indices(S, K)
    votes = np.zeros((n_units, T))
    for k in range(K):
        np.add.at(votes, (units, picks[:, k]), 1.0)
    return topk_indices(votes, K)


@dataclass
class StepCache:
    Z: np.ndarray
    units: np.ndarray
    n_units: int
    S: np.ndarray
    P: np.ndarray
    gcache: tuple
    agg_cache: object
    sel: np.ndarray
    w: np.ndarray
    p_sel: np.ndarray | None
    p0: np.ndarray | None
    f: np.ndarray
    alpha: float
    u: np.ndarray
    ucache: tuple
    slots: list  # per k: list of (expert, rows, out, cache)
    v: np.ndarray
    collapsed: np.ndarray
    lb: float
    lb_f: np.ndarray | None


def molex_step(Z, t, eff, kind, act, router: Router, gate: GateConfig, units, n_units,
               alpha=None, route=None, detached_p=None, executor=None):
    """Forward of one mixing layer on token rows ``Z``.

    ``eff[j]`` are the effective (adapter-folded) weights of layer ``j``.
    ``route`` forces the selection: an int (every unit picks it) or an array of
    shape ``(n_units, K)``. ``detached_p`` fixes the denominator of the
    probability-weighted factor, which otherwise equals its numerator.
    Returns ``(z_next, cache)``.
    """
    T = len(eff)
    K = gate.K
    if alpha is None:
        alpha = gate.alpha if gate.alpha_mode == "fixed" else router.alpha
    S_raw, gcache = gate_scores_raw(Z, router)
    S = sigmoid(S_raw) if gate.sigmoid_scores else S_raw
    P = row_softmax(S)
    abar, agg_cache = _aggregate(S, P, units, n_units, gate.batch_agg)
    if route is None:
        sel = _select(abar, S, units, n_units, gate.batch_agg, K)
    else:
        r = np.asarray(route, dtype=np.int64)
        if r.ndim == 0:
            sel = np.full((n_units, K), int(r))
        else:
            sel = np.broadcast_to(r.reshape(-1, K), (n_units, K)).copy()
        if sel.min() < 0 or sel.max() >= T:
            raise ConfigError(f"route outside [0, {T})")
    rows_idx = np.arange(n_units)[:, None]
    if K == 1:
        w = np.ones((n_units, 1))
    else:
        w = row_softmax(abar[rows_idx, sel])

    p_sel = p0 = None
    f = np.ones(n_units)
    if gate.grad_mode == "prob_weighted" and K == 1:
        p_sel = row_softmax(abar)[np.arange(n_units), sel[:, 0]]
        p0 = p_sel.copy() if detached_p is None else np.asarray(detached_p, dtype=np.float64)
        f = p_sel / p0

    row_sel = sel[units]  # (R, K)
    collapsed = (row_sel[:, 0] == t) & (f[units] == 1.0) if K == 1 else np.zeros(len(Z), dtype=bool)

    jobs = []  # (k, expert, rows)
    for k in range(K):
        for e in np.unique(row_sel[:, k]):
            rows = np.flatnonzero((row_sel[:, k] == e) & ~collapsed)
            if rows.size:
                jobs.append((k, int(e), rows))

    def run(job):
        k, e, rows = job
        out, c = block_forward(Z[rows], eff[e], kind, act)
        return k, e, rows, out, c

    if executor is not None and jobs:
        fut_u = executor.submit(block_forward, Z, eff[t], kind, act)
        results = list(executor.map(run, jobs))
        u, ucache = fut_u.result()
    else:
        u, ucache = block_forward(Z, eff[t], kind, act)
        results = [run(j) for j in jobs]

    slots = [[] for _ in range(K)]
    outs = [np.zeros_like(Z) for _ in range(K)]
    for k, e, rows, out, c in results:
        outs[k][rows] = out
        slots[k].append((e, rows, out, c))
    if K == 1:
        outs[0][collapsed] = u[collapsed]
        v = outs[0]
    else:
        v = w[units, 0][:, None] * outs[0]
        for k in range(1, K):
            v = v + w[units, k][:, None] * outs[k]

    fr = f[units][:, None]
    z_next = Z + alpha * u + (1.0 - alpha) * (fr * v)
    if collapsed.any():
        z_next[collapsed] = Z[collapsed] + u[collapsed]

    lb = 0.0
    lb_f = None
    if gate.load_balance_coeff > 0:
        lb_f = np.bincount(sel.reshape(-1), minlength=T) / sel.size
        lb = float(gate.load_balance_coeff * T * np.dot(lb_f, P.mean(axis=0)))

    cache = StepCache(Z, units, n_units, S, P, gcache, agg_cache, sel, w, p_sel, p0, f, alpha,
                      u, ucache, slots, v, collapsed, lb, lb_f)
    return z_next, cache


def molex_step_infer(Z, t, eff, kind, act, router: Router, gate: GateConfig, units, n_units, executor=None):
    """Forward-only mixing layer for K = 1 with one-hot weights.

    Same output as :func:`molex_step` bit for bit, without the caches and
    load-balancing statistics. Returns ``(z_next, sel)``.
    """
    T = len(eff)
    S, _ = gate_scores_raw(Z, router)
    if gate.sigmoid_scores:
        S = sigmoid(S)
    if gate.batch_agg == "per_token":
        sel = np.argmax(S, axis=1)
    elif gate.batch_agg == "mode":
        votes = np.bincount(units * T + np.argmax(S, axis=1), minlength=n_units * T)
        sel = np.argmax(votes.reshape(n_units, T), axis=1)
    else:
        abar, _ = _aggregate(S, row_softmax(S), units, n_units, "mean")
        sel = np.argmax(abar, axis=1)
    alpha = gate.alpha if gate.alpha_mode == "fixed" else router.alpha
    if n_units == 1 and int(sel[0]) != t:
        e = int(sel[0])
        if executor is not None:
            fut = executor.submit(block_forward, Z, eff[e], kind, act)
            u, _ = block_forward(Z, eff[t], kind, act)
            v, _ = fut.result()
        else:
            u, _ = block_forward(Z, eff[t], kind, act)
            v, _ = block_forward(Z, eff[e], kind, act)
        return Z + alpha * u + (1.0 - alpha) * v, sel[:, None]
    u, _ = block_forward(Z, eff[t], kind, act)
    if n_units == 1:
        return Z + u, sel[:, None]
    row_sel = sel[units]
    v = np.zeros_like(Z)
    for e in np.unique(row_sel):
        if e != t:
            rows = np.flatnonzero(row_sel == e)
            v[rows], _ = block_forward(Z[rows], eff[e], kind, act)
    z_next = Z + alpha * u + (1.0 - alpha) * v
    same = row_sel == t
    z_next[same] = Z[same] + u[same]
    return z_next, sel[:, None]


def molex_step_backward(dzn, c: StepCache, t, eff, kind, act, router: Router, gate: GateConfig, lb_weight=1.0):
    """Backward of :func:`molex_step`.

    Returns ``(dZ, layer_grads, router_grads, dalpha)`` where ``layer_grads[j]``
    maps targets of layer ``j`` to gradients of its effective weights.
    """
    T = len(eff)
    K = gate.K
    a = c.alpha
    units = c.units
    fr = c.f[units][:, None]
    dZ = dzn.copy()
    layer_grads: dict[int, dict] = {}

    def add_layer(j, g):
        acc = layer_grads.setdefault(j, {})
        for name, val in g.items():
            acc[name] = acc[name] + val if name in acc else val

    dalpha = float(np.sum(dzn * (c.u - fr * c.v)))

    du = a * dzn
    if c.collapsed.any():
        du[c.collapsed] += (1.0 - a) * fr[c.collapsed] * dzn[c.collapsed]
    dv = (1.0 - a) * fr * dzn

    dZu, gu = block_backward(du, c.ucache, eff[t], kind, act)
    dZ += dZu
    add_layer(t, gu)
    for k in range(K):
        wk = c.w[units, k][:, None]
        for e, rows, out, cache in c.slots[k]:
            dZe, ge = block_backward(dv[rows] * wk[rows], cache, eff[e], kind, act)
            dZ[rows] += dZe
            add_layer(e, ge)

    n_units = c.n_units
    dabar = np.zeros((n_units, T))
    ridx = np.arange(n_units)
    if K > 1:
        dw = np.zeros((n_units, K))
        for k in range(K):
            outk = np.zeros_like(c.Z)
            for e, rows, out, _ in c.slots[k]:
                outk[rows] = out
            np.add.at(dw[:, k], units, np.sum(dv * outk, axis=1))
        gw = c.w * (dw - np.sum(c.w * dw, axis=1, keepdims=True))
        for k in range(K):
            dabar[ridx, c.sel[:, k]] += gw[:, k]
    if c.p_sel is not None:
        df = np.zeros(n_units)
        np.add.at(df, units, (1.0 - a) * np.sum(dzn * c.v, axis=1))
        dp_sel = df / c.p0
        abar_full = _abar_from_cache(c, gate)
        p = row_softmax(abar_full)
        onehot = np.zeros_like(p)
        onehot[ridx, c.sel[:, 0]] = 1.0
        dabar += (dp_sel * c.p_sel)[:, None] * (onehot - p)

    dP = np.zeros_like(c.P)
    if gate.batch_agg == "per_token":
        dS = dabar
    elif gate.batch_agg == "mode":
        counts = c.agg_cache
        dS = (dabar / counts)[units]
    else:
        counts, pbar = c.agg_cache
        with np.errstate(invalid="ignore", divide="ignore"):
            dpbar = np.where(dabar != 0, dabar / pbar, 0.0)
        dP += (dpbar / counts)[units]
        dS = np.zeros_like(c.S)
    if c.lb_f is not None:
        R = c.P.shape[0]
        dP += lb_weight * gate.load_balance_coeff * T * c.lb_f[None, :] / R
    if np.any(dP):
        dS = dS + c.P * (dP - np.sum(c.P * dP, axis=1, keepdims=True))
    if gate.sigmoid_scores:
        dS = dS * c.S * (1.0 - c.S)
    dZg, rgrads = gate_scores_backward(dS, c.gcache, router)
    dZ += dZg
    return dZ, layer_grads, rgrads, dalpha


def _abar_from_cache(c: StepCache, gate: GateConfig):
    if gate.batch_agg == "per_token":
        return c.S
    if gate.batch_agg == "mode":
        sums = np.zeros((c.n_units, c.S.shape[1]))
        np.add.at(sums, c.units, c.S)
        return sums / c.agg_cache
    _, pbar = c.agg_cache
    with np.errstate(divide="ignore"):
        return np.log(pbar)


def molex_forward(z, t, eff, kind, act, router: Router, gate: GateConfig, stats: SelectionStats | None = None,
                  route=None, alpha=None):
    """Mixing layer ``t`` on the token rows of one sequence; records the decision into ``stats``."""
    z = np.asarray(z, dtype=np.float64)
    units, n_units = unit_ids(1, z.shape[0], gate.batch_agg, "sequence")
    z_next, cache = molex_step(z, t, eff, kind, act, router, gate, units, n_units, alpha=alpha, route=route)
    if stats is not None:
        stats.record(t, cache.sel)
    return z_next
