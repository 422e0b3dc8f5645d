"""Dense and block-sparse multi-head attention over token sequences.

Keys and values are partitioned into fixed blocks of size B (the last
block may be short when B does not divide H; a short block behaves like
a padded block whose pad slots are excluded from gates and softmax).
Each query scores every block by dot(query, block key mean) and attends
only to its top k_blocks blocks, with its own block always included and
score ties broken toward the lower block index.  Routing is computed
outside the autodiff graph and is therefore constant during backward.

Two implementations exist on purpose:

* graph paths (``dense_attention`` / ``efficient_attention``) build the
  full score matrix and apply additive -inf masks, which keeps the
  autodiff core simple while being numerically identical to gathering
  the selected keys;
* ``dense_core`` / ``sparse_core`` are graph-free numpy kernels for the
  wall-clock benchmark; the sparse one gathers the selected (query,
  block) pairs into per-block panels so all contractions stay batched.

Scores are scaled by 1/sqrt(d_head).  Attention here is non-causal: the
tokens are features of one instance, not a temporal sequence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T


def k_blocks_for(h, block_size, rho):
    """Routed block count: max(1, ceil(rho * H / B)), capped at the block count."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"sparsity rho must be in (0, 1], got {rho}")
    n_blocks = -(-h // block_size)
    k = max(1, math.ceil(rho * h / block_size - 1e-9))
    return min(k, n_blocks)


class AttentionParams:
    """Projection weights plus the block/sparsity knobs for one layer."""

    def __init__(self, d_model, n_heads, block_size, rho, rng, force_own=True):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"sparsity rho must be in (0, 1], got {rho}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.block_size = block_size
        self.rho = float(rho)
        self.force_own = force_own
        self.wq = T.glorot(rng, (d_model, d_model))
        self.wk = T.glorot(rng, (d_model, d_model))
        self.wv = T.glorot(rng, (d_model, d_model))
        self.wo = T.glorot(rng, (d_model, d_model))

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo]


@dataclass
class RoutingPlan:
    """Frozen per-query block selection for one head.

    block_ids: (n, H, k_blocks) int, each row sorted ascending, distinct,
    always containing the query's own block when force_own was set.
    gates: (n, H, n_blocks) raw gate scores (before own-block forcing).
    """
    block_ids: np.ndarray
    gates: np.ndarray
    block_size: int


def _block_means(k, block_size):
    """Mean key per block, (n, n_blocks, d_head); short last block uses its
    true member count."""
    n, h, _ = k.shape
    starts = np.arange(0, h, block_size)
    sums = np.add.reduceat(k, starts, axis=1)
    counts = np.minimum(block_size, h - starts).astype(np.float64)
    return sums / counts[None, :, None]


def moba_route(q, k, block_size, k_blocks, force_own=True):
    """Select k_blocks key blocks per query from gate = dot(q, block key mean).

    q, k: (H, d_head) for one instance or (n, H, d_head) batched.
    Ties broken toward the lower block index; the query's own block is
    forced in unless force_own is False.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    single = q.ndim == 2
    if single:
        q, k = q[None], k[None]
    n, h, _ = q.shape
    n_blocks = -(-h // block_size)
    if k_blocks > n_blocks:
        raise ValueError(f"k_blocks {k_blocks} exceeds block count {n_blocks}")
    if k_blocks < 1:
        raise ValueError("k_blocks must be >= 1")
    means = _block_means(k, block_size)
    gates = q @ np.swapaxes(means, 1, 2)
    aug = gates.copy()
    if force_own:
        own = np.arange(h) // block_size
        aug[:, np.arange(h), own] = np.inf
    order = np.argsort(-aug, axis=-1, kind="stable")
    sel = np.sort(order[..., :k_blocks], axis=-1)
    if single:
        sel, gates = sel[0:1], gates[0:1]
    return RoutingPlan(block_ids=sel, gates=gates, block_size=block_size)


def plan_to_mask(plan, h):
    """Additive mask (n, H, H): 0 on keys inside selected blocks, -inf elsewhere."""
    n, hq, _ = plan.block_ids.shape
    if hq != h:
        raise ValueError(f"plan covers {hq} queries, sequence has {h}")
    n_blocks = plan.gates.shape[-1]
    allowed = np.zeros((n, h, n_blocks), dtype=bool)
    rows = np.arange(h)[None, :, None]
    batch = np.arange(n)[:, None, None]
    allowed[batch, rows, plan.block_ids] = True
    col_block = np.arange(h) // plan.block_size
    return np.where(allowed[:, :, col_block], 0.0, -np.inf)


def _lift(x):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"attention input must be rank 2 or 3, got {x.ndim}")


def _project_heads(x3, params):
    q = T.matmul(x3, params.wq)
    k = T.matmul(x3, params.wk)
    v = T.matmul(x3, params.wv)
    dh = params.d_head
    heads = []
    for i in range(params.n_heads):
        heads.append((T.narrow(q, 2, i * dh, dh),
                      T.narrow(k, 2, i * dh, dh),
                      T.narrow(v, 2, i * dh, dh)))
    return heads


def dense_attention(x, params):
    """Full softmax attention over all H tokens, multi-head, output projection."""
    x3, squeeze = _lift(x)
    scale = 1.0 / math.sqrt(params.d_head)
    outs = []
    for qh, kh, vh in _project_heads(x3, params):
        scores = T.mul(T.matmul(qh, T.transpose_last(kh)), scale)
        outs.append(T.matmul(T.softmax(scores, axis=-1), vh))
    out = T.matmul(T.concat(outs, axis=2), params.wo)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def efficient_attention(x, params, plans=None, return_plans=False):
    """Block-sparse attention: each query's softmax is restricted to its
    routed blocks via an additive -inf mask.

    ``plans`` (one RoutingPlan per head) replays a frozen routing, which
    is what gradient checks need; otherwise routing is derived from the
    current Q/K values, outside the graph.
    """
    x3, squeeze = _lift(x)
    n, h, _ = x3.shape
    kb = k_blocks_for(h, params.block_size, params.rho)
    scale = 1.0 / math.sqrt(params.d_head)
    outs = []
    used = []
    for i, (qh, kh, vh) in enumerate(_project_heads(x3, params)):
        if plans is None:
            plan = moba_route(qh.values, kh.values, params.block_size, kb,
                              force_own=params.force_own)
        else:
            plan = plans[i]
        used.append(plan)
        scores = T.mul(T.matmul(qh, T.transpose_last(kh)), scale)
        scores = T.add(scores, T.Tensor(plan_to_mask(plan, h)))
        outs.append(T.matmul(T.softmax(scores, axis=-1), vh))
    out = T.matmul(T.concat(outs, axis=2), params.wo)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return (out, used) if return_plans else out


def attention_flops(h, d_model, n_heads, block_size, k_blocks, include_projections=True):
    """Analytic flop count (multiply-adds x 2) for one H-token sequence.

    Counts the score and value-weighting contractions, which scale with
    the selected key count min(k_blocks * B, H), plus optionally the four
    dense projections.  Gate scoring, softmax and block means are not
    counted: they carry no multiply-add mass comparable to the main
    terms, and leaving them out keeps full selection exactly equal to
    dense.  Dense cost = attention_flops with k_blocks = ceil(H / B).
    """
    n_blocks = -(-h // block_size)
    if not 1 <= k_blocks <= n_blocks:
        raise ValueError(f"k_blocks {k_blocks} out of range [1, {n_blocks}]")
    if d_model % n_heads != 0:
        raise ValueError("d_model not divisible by n_heads")
    selected = min(k_blocks * block_size, h)
    macs = 2 * h * selected * (d_model // n_heads) * n_heads
    if include_projections:
        macs += 4 * h * d_model * d_model
    return 2 * macs


# ---------------------------------------------------------------------------
# graph-free kernels for the wall-clock benchmark
# ---------------------------------------------------------------------------

_SCRATCH: dict = {}


def _scratch(name, shape):
    """Reusable uninitialized work buffer.

    Freshly mmapped pages cost more to fault in than these kernels spend
    computing, so repeated calls (the benchmark takes a min over repeats)
    must not reallocate their large temporaries.  Zero-filled only on
    allocation: panel pad slots may later hold stale values from earlier
    calls, which is fine because they are finite and never gathered.
    Never returned to the caller; every kernel's result is freshly
    allocated.
    """
    buf = _SCRATCH.get(name)
    if buf is None or buf.shape != shape:
        buf = np.zeros(shape)
        _SCRATCH[name] = buf
    return buf


def dense_core(q, k, v):
    """Stable softmax attention on raw (n_heads, H, d_head) arrays."""
    n_heads, h, dh = q.shape
    s = _scratch("dense.scores", (n_heads, h, h))
    np.matmul(q, np.swapaxes(k, 1, 2), out=s)
    s *= 1.0 / math.sqrt(dh)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    out = s @ v
    out /= s.sum(axis=-1, keepdims=True)
    return out


def sparse_core(q, k, v, block_size, k_blocks, force_own=True):
    """Routed block-sparse attention on raw (n_heads, H, d_head) arrays.

    The selected (query, block) pairs of all heads are grouped by block
    into padded per-block panels, so the score and value contractions
    run as matmuls over full panels and the softmax touches only the
    selected scores.  Work scales with k_blocks * B selected keys per
    query (plus panel-padding slack), not with H.  Panel pad rows hold
    stale values from previous calls; they are computed over but never
    gathered back.  Agrees with dense_core at full selection to ~1e-12.
    """
    n_heads, h, dh = q.shape
    nb = -(-h // block_size)
    plan = moba_route(q, k, block_size, k_blocks, force_own=force_own)
    sel = plan.block_ids

    # pair p = (head e, query i, slot c) in row-major order; panel id e*nb + block
    groups = (sel + nb * np.arange(n_heads)[:, None, None]).ravel()
    order = np.argsort(groups, kind="stable")
    counts = np.bincount(groups, minlength=n_heads * nb)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    total = groups.size
    # row of each pair within its (padded) panel, in natural pair order
    pos = np.empty(total, dtype=np.intp)
    pos[order] = np.arange(total) - np.repeat(starts, counts)
    rows = int(counts.max())
    slot = groups * rows + pos                          # flat pair position

    pq_key = ("pair_query", n_heads * h, k_blocks)
    pair_query = _SCRATCH.get(pq_key)
    if pair_query is None:
        pair_query = np.repeat(np.arange(n_heads * h), k_blocks)
        _SCRATCH[pq_key] = pair_query

    qpairs = _scratch("sparse.qpairs", (total, dh))
    np.take(q.reshape(-1, dh), pair_query, axis=0, out=qpairs, mode="clip")
    qpairs *= 1.0 / math.sqrt(dh)
    qbuf = _scratch("sparse.qbuf", (n_heads * nb, rows, dh))
    qbuf.reshape(-1, dh)[slot] = qpairs

    # keys/values by block, zero-padded when the last block is short
    pad = nb * block_size - h
    if pad:
        kb = _scratch("sparse.kpad", (n_heads, nb * block_size, dh))
        vb = _scratch("sparse.vpad", (n_heads, nb * block_size, dh))
        kb[:, :h], kb[:, h:] = k, 0.0
        vb[:, :h], vb[:, h:] = v, 0.0
    else:
        kb, vb = k, v
    kb = kb.reshape(n_heads * nb, block_size, dh)
    vb = vb.reshape(n_heads * nb, block_size, dh)

    scores = _scratch("sparse.scores", (n_heads * nb, rows, block_size))
    np.matmul(qbuf, np.swapaxes(kb, 1, 2), out=scores)

    # softmax in compact query layout (heads * h, k_blocks * B)
    sq = _scratch("sparse.probs", (total, block_size))
    np.take(scores.reshape(-1, block_size), slot, axis=0, out=sq, mode="clip")
    if pad:
        sq[(sel == nb - 1).ravel(), -pad:] = -np.inf    # pad keys are not real
    compact = sq.reshape(n_heads * h, k_blocks * block_size)
    compact -= compact.max(axis=-1, keepdims=True)
    np.exp(compact, out=compact)
    denom = compact.sum(axis=-1)

    scores.reshape(-1, block_size)[slot] = sq
    contrib = _scratch("sparse.contrib", (n_heads * nb, rows, dh))
    for g in range(n_heads * nb):                       # 2-d gemms beat batched here
        np.matmul(scores[g], vb[g], out=contrib[g])
    opairs = _scratch("sparse.opairs", (total, dh))
    np.take(contrib.reshape(-1, dh), slot, axis=0, out=opairs, mode="clip")
    out = opairs.reshape(n_heads * h, k_blocks, dh).sum(axis=1)
    out /= denom[:, None]
    return out.reshape(n_heads, h, dh)


def bench_attention(h, d_model=256, n_heads=4, block_size=32, rho=0.5,
                    repeats=7, seed=0):
    """Time dense_core vs sparse_core on one random sequence.

    Returns a dict matching the bench CSV columns.  Sparse timing
    includes routing (it is part of the efficient path).  The rho=1
    agreement figure is computed on the same inputs as a correctness
    tie-down for every benched shape.
    """
    rng = np.random.default_rng(seed)
    dh = d_model // n_heads
    q, k, v = (rng.normal(size=(n_heads, h, dh)) for _ in range(3))
    kb = k_blocks_for(h, block_size, rho)
    n_blocks = -(-h // block_size)

    def best_of(fn):
        fn()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times) * 1e3

    dense_ms = best_of(lambda: dense_core(q, k, v))
    sparse_ms = best_of(lambda: sparse_core(q, k, v, block_size, kb))
    diff = float(np.max(np.abs(
        sparse_core(q, k, v, block_size, n_blocks) - dense_core(q, k, v))))
    return {
        "H": h,
        "B": block_size,
        "k_blocks": kb,
        "dense_flops": attention_flops(h, d_model, n_heads, block_size, n_blocks),
        "sparse_flops": attention_flops(h, d_model, n_heads, block_size, kb),
        "wall_time_dense_ms": dense_ms,
        "wall_time_sparse_ms": sparse_ms,
        "max_abs_diff_at_rho1": diff,
    }
