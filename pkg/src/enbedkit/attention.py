"""Scaled dot-product attention: dense, sliding-window, and sliding+global.

The sparse variants never materialize an L x L score matrix. Window scores
are computed per diagonal offset into an [L, 2r+1] slot layout, and the k
block-global tokens contribute k extra key/value columns, so the number of
query-key score evaluations stays within L*(2r+1+k). A module-level counter
(`score_counter`) records every score actually computed; the budget tests
read it.

Global tokens are the per-block arithmetic means of the key/value rows.
Because the key/value projections are linear, this equals projecting the
mean of the block's input embeddings, which is how the global tokens are
defined upstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor, as_tensor


class ScoreCounter:
    """Tally of query-key score evaluations (for complexity budgets)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


score_counter = ScoreCounter()


@dataclass(frozen=True)
class AttnSpec:
    """Which attention variant a stack uses, plus head geometry."""

    mode: str = "dense"  # dense | sliding | sliding_global
    r: int | None = None
    k: int | None = None
    causal: bool = False
    heads: int = 1
    d_kv: int = 64

    def __post_init__(self):
        if self.mode not in ("dense", "sliding", "sliding_global"):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.mode != "dense" and (self.r is None or self.r < 1):
            raise ValueError("sliding modes need a window radius r >= 1")
        if self.mode == "sliding_global" and (self.k is None or self.k < 1):
            raise ValueError("sliding_global needs k >= 1 global blocks")


@dataclass(frozen=True)
class HeadProjections:
    """Per-stack projection weights; heads live side by side in the columns."""

    wq: Tensor  # [d_model, heads*d_kv]
    wk: Tensor
    wv: Tensor
    wo: Tensor  # [heads*d_kv, d_model]


@dataclass(frozen=True)
class LayerRadiusSchedule:
    """Window radius per layer: small radii early, large radii later."""

    radii: tuple

    @classmethod
    def paper_style(cls, n_layers, r_small=64, r_large=128):
        """Small radius for the first three layers, large for the rest."""
        cut = min(3, n_layers)
        return cls(tuple([r_small] * cut + [r_large] * (n_layers - cut)))

    @classmethod
    def scaled(cls, n_layers, r_small, r_large):
        """Desk-scale shape: first half small, second half large."""
        cut = (n_layers + 1) // 2
        return cls(tuple([r_small] * cut + [r_large] * (n_layers - cut)))


# -- banded primitives -----------------------------------------------------

# gather-based path below this many L*(2r+1) slots; the per-diagonal path
# avoids the [L, 2r+1, d] temporaries that dominate at long L
_GATHER_SLOT_LIMIT = 1 << 16


def _band_ranges(L, r):
    for o in range(-r, r + 1):
        qs, qe = max(0, -o), L - max(0, o)
        if qe > qs:
            yield o, qs, qe


def _band_index(L, r):
    idx = np.arange(L)[:, None] + np.arange(-r, r + 1)[None, :]
    return idx.clip(0, L - 1)


def _scatter_band(target, updates, L, r):
    """target[..., i+o, :] += updates[..., i, r+o, :] over in-range slots."""
    for o, qs, qe in _band_ranges(L, r):
        target[..., qs + o : qe + o, :] += updates[..., qs:qe, o + r, :]


def banded_scores(q, k, r, scale=None) -> Tensor:
    """Scaled window scores, slot layout: out[..., i, r+o] = q_i . k_{i+o} * scale.

    Out-of-range slots carry clipped-edge garbage; mask them before the
    softmax. The evaluation count per (batch, head) slice never exceeds
    L*(2r+1).
    """
    q, k = as_tensor(q), as_tensor(k)
    L, d = q.data.shape[-2], q.data.shape[-1]
    W = 2 * r + 1
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    lead = int(np.prod(q.data.shape[:-2], dtype=np.int64))

    if L * W <= _GATHER_SLOT_LIMIT:
        idx = _band_index(L, r)
        valid_scale = np.where(band_valid_mask(L, r), scale, 0.0).astype(q.data.dtype)
        k_slots = k.data[..., idx, :]  # [..., L, W, d]
        out = (k_slots @ q.data[..., :, :, None])[..., 0] * valid_scale
        score_counter.add(lead * L * W)

        def backward(g):
            gs = g * valid_scale
            q._accum_grad((gs[..., None, :] @ k_slots)[..., 0, :])
            dk_slots = gs[..., None] * q.data[..., :, None, :]
            dk = np.zeros_like(k.data)
            _scatter_band(dk, dk_slots, L, r)
            k._accum_grad(dk)

        return nm._node(out, (q, k), backward)

    out = np.zeros(q.data.shape[:-1] + (W,), dtype=q.data.dtype)
    for o, qs, qe in _band_ranges(L, r):
        out[..., qs:qe, o + r] = (q.data[..., qs:qe, :] * k.data[..., qs + o : qe + o, :]).sum(-1)
        score_counter.add(lead * (qe - qs))
    out *= scale

    def backward(g):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        for o, qs, qe in _band_ranges(L, r):
            gg = g[..., qs:qe, o + r : o + r + 1] * scale
            dq[..., qs:qe, :] += gg * k.data[..., qs + o : qe + o, :]
            dk[..., qs + o : qe + o, :] += gg * q.data[..., qs:qe, :]
        q._accum_grad(dq)
        k._accum_grad(dk)

    return nm._node(out, (q, k), backward)


def banded_weighted_sum(w, v, r) -> Tensor:
    """Apply slot weights to values: out[..., i, :] = sum_o w[..., i, r+o] * v_{i+o}.

    Out-of-range slots must carry zero weight (the masked softmax
    guarantees that), so the clipped gather contributes nothing.
    """
    w, v = as_tensor(w), as_tensor(v)
    L = v.data.shape[-2]
    W = w.data.shape[-1]

    if L * W <= _GATHER_SLOT_LIMIT:
        idx = _band_index(L, r)
        valid = band_valid_mask(L, r)
        v_slots = v.data[..., idx, :]  # [..., L, W, d]
        w_eff = w.data * valid
        out = (w_eff[..., None, :] @ v_slots)[..., 0, :]

        def backward(g):
            w._accum_grad((v_slots @ g[..., :, :, None])[..., 0] * valid)
            dv_slots = w_eff[..., None] * g[..., :, None, :]
            dv = np.zeros_like(v.data)
            _scatter_band(dv, dv_slots, L, r)
            v._accum_grad(dv)

        return nm._node(out, (w, v), backward)

    out = np.zeros(v.data.shape[:-2] + (w.data.shape[-2], v.data.shape[-1]), dtype=v.data.dtype)
    for o, qs, qe in _band_ranges(L, r):
        out[..., qs:qe, :] += w.data[..., qs:qe, o + r : o + r + 1] * v.data[..., qs + o : qe + o, :]

    def backward(g):
        dw = np.zeros_like(w.data)
        dv = np.zeros_like(v.data)
        for o, qs, qe in _band_ranges(L, r):
            dw[..., qs:qe, o + r] = (g[..., qs:qe, :] * v.data[..., qs + o : qe + o, :]).sum(-1)
            dv[..., qs + o : qe + o, :] += w.data[..., qs:qe, o + r : o + r + 1] * g[..., qs:qe, :]
        w._accum_grad(dw)
        v._accum_grad(dv)

    return nm._node(out, (w, v), backward)


def band_valid_mask(L, r, key_valid=None):
    """Boolean [(...,) L, 2r+1] mask of in-range (and un-padded) window slots."""
    idx = np.arange(L)[:, None] + np.arange(-r, r + 1)[None, :]
    in_range = (idx >= 0) & (idx < L)
    if key_valid is None:
        return in_range
    key_valid = np.asarray(key_valid, dtype=bool)
    return in_range & key_valid[..., idx.clip(0, L - 1)]


def _slice_cols(t, a, b) -> Tensor:
    t = as_tensor(t)
    data = t.data[..., a:b]

    def backward(g):
        full = np.zeros_like(t.data)
        full[..., a:b] = g
        t._accum_grad(full)

    return nm._node(data, (t,), backward)


def _counted_matmul_scores(q, keys, scale) -> Tensor:
    """q @ keys^T * scale with every score evaluation tallied."""
    scores = nm.mul(nm.matmul(q, nm.swap_last(keys)), scale)
    score_counter.add(scores.data.size)
    return scores


# -- block-global tokens -----------------------------------------------------

def block_boundaries(L, k):
    """Contiguous near-equal partition; the remainder goes to leading blocks."""
    if not 1 <= k <= L:
        raise ValueError(f"need 1 <= k <= L, got k={k}, L={L}")
    base, rem = divmod(L, k)
    sizes = [base + 1] * rem + [base] * (k - rem)
    edges = np.cumsum([0] + sizes)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(k)]


def block_means(x, k, valid=None):
    """Per-block mean rows of x ([..., L, d] -> [..., k, d]) plus block validity.

    With a validity mask, each mean runs over the block's valid rows only;
    a block with no valid rows yields a zero row flagged invalid.
    """
    x = as_tensor(x)
    L = x.data.shape[-2]
    bounds = block_boundaries(L, k)
    lead = x.data.shape[:-2]
    out = np.zeros(lead + (k, x.data.shape[-1]), dtype=x.data.dtype)
    if valid is None:
        counts = np.array([b - a for a, b in bounds], dtype=x.data.dtype)
        block_ok = np.ones(lead + (k,), dtype=bool)
        for b, (lo, hi) in enumerate(bounds):
            out[..., b, :] = x.data[..., lo:hi, :].mean(axis=-2)

        def backward(g):
            dx = np.zeros_like(x.data)
            for b, (lo, hi) in enumerate(bounds):
                dx[..., lo:hi, :] += g[..., b : b + 1, :] / counts[b]
            x._accum_grad(dx)

    else:
        vmask = np.broadcast_to(np.asarray(valid, dtype=bool), lead + (L,))
        counts = np.zeros(lead + (k,), dtype=x.data.dtype)
        for b, (lo, hi) in enumerate(bounds):
            vb = vmask[..., lo:hi]
            counts[..., b] = vb.sum(axis=-1)
            seg = x.data[..., lo:hi, :] * vb[..., None]
            out[..., b, :] = seg.sum(axis=-2)
        safe = np.maximum(counts, 1.0)
        out /= safe[..., None]
        block_ok = counts > 0

        def backward(g):
            dx = np.zeros_like(x.data)
            for b, (lo, hi) in enumerate(bounds):
                vb = vmask[..., lo:hi]
                dx[..., lo:hi, :] += (g[..., b : b + 1, :] / safe[..., b : b + 1, None]) * vb[..., None]
            x._accum_grad(dx)

    return nm._node(out, (x,), backward), block_ok


def block_global_tokens(x, k) -> Tensor:
    """Global token per block: the arithmetic mean of the block's rows."""
    tokens, _ = block_means(x, k)
    return tokens


# -- attention variants --------------------------------------------------------

def dense_attention(q, k, v, mask=None, bias=None, weight_dropout=None, return_weights=False):
    """Softmax(q k^T / sqrt(d)) v with optional boolean mask and additive bias.

    Masked positions act as -inf scores; a fully masked query row comes out
    all-zero instead of NaN. Returns (output, weights); the weights are the
    post-softmax score matrix for export.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = _counted_matmul_scores(q, k, scale)
    if bias is not None:
        scores = nm.add(scores, bias)
    if mask is None:
        weights = nm.softmax(scores, axis=-1)
    else:
        weights = nm.masked_softmax(scores, mask, axis=-1)
    applied = weights if weight_dropout is None else weight_dropout(weights)
    out = nm.matmul(applied, v)
    if return_weights:
        return out, weights
    return out


def sliding_attention(q, k, v, r, key_valid=None, slot_bias=None, weight_dropout=None,
                      return_weights=False):
    """Window attention: row i attends to keys [i-r, i+r] clipped to the sequence."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    L = q.data.shape[-2]
    scores = banded_scores(q, k, r)
    if slot_bias is not None:
        scores = nm.add(scores, slot_bias)
    mask = band_valid_mask(L, r, key_valid)
    weights = nm.masked_softmax(scores, mask, axis=-1)
    applied = weights if weight_dropout is None else weight_dropout(weights)
    out = banded_weighted_sum(applied, v, r)
    if return_weights:
        return out, weights
    return out


def sliding_global_attention(q, k, v, r, n_global, key_valid=None, slot_bias=None,
                             weight_dropout=None, return_weights=False):
    """Window keys plus k block-global keys under one softmax.

    The global key/value rows are block means of k and v; validity masking
    removes padded rows from both the window and the block means.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    L = q.data.shape[-2]
    W = 2 * r + 1
    scale = 1.0 / np.sqrt(q.data.shape[-1])

    gkeys, block_ok = block_means(k, n_global, valid=key_valid)
    gvals, _ = block_means(v, n_global, valid=key_valid)

    win_scores = banded_scores(q, k, r)
    if slot_bias is not None:
        win_scores = nm.add(win_scores, slot_bias)
    glob_scores = _counted_matmul_scores(q, gkeys, scale)

    scores = nm.concat([win_scores, glob_scores], axis=-1)
    win_mask = band_valid_mask(L, r, key_valid)
    win_mask = np.broadcast_to(win_mask, scores.data.shape[:-1] + (W,))
    glob_mask = np.broadcast_to(block_ok[..., None, :], scores.data.shape[:-1] + (n_global,))
    mask = np.concatenate([win_mask, glob_mask], axis=-1)

    weights = nm.masked_softmax(scores, mask, axis=-1)
    applied = weights if weight_dropout is None else weight_dropout(weights)
    out = nm.add(
        banded_weighted_sum(_slice_cols(applied, 0, W), v, r),
        nm.matmul(_slice_cols(applied, W, W + n_global), gvals),
    )
    if return_weights:
        return out, weights
    return out


def cross_attention(q_states, kv_states, key_valid=None, weight_dropout=None,
                    return_weights=False):
    """Dense attention from decoder queries onto encoder keys/values.

    No causal mask; only the encoder-side padding mask applies. Query and
    key lengths may differ (rectangular score matrix).
    """
    q, kv = as_tensor(q_states), as_tensor(kv_states)
    mask = None
    if key_valid is not None:
        key_valid = np.asarray(key_valid, dtype=bool)
        mask = np.broadcast_to(
            key_valid[..., None, :],
            np.broadcast_shapes(q.data.shape[:-1] + (kv.data.shape[-2],),
                                key_valid[..., None, :].shape),
        )
    return dense_attention(q, kv, kv, mask=mask, weight_dropout=weight_dropout,
                           return_weights=return_weights)


def split_heads(t, heads, d_kv) -> Tensor:
    """[..., L, heads*d_kv] -> [..., heads, L, d_kv]."""
    t = as_tensor(t)
    shape = t.data.shape[:-1] + (heads, d_kv)
    return nm.swap_axes(nm.reshape(t, shape), -3, -2)


def merge_heads(t) -> Tensor:
    """[..., heads, L, d_kv] -> [..., L, heads*d_kv]."""
    t = as_tensor(t)
    swapped = nm.swap_axes(t, -3, -2)
    shape = swapped.data.shape[:-2] + (swapped.data.shape[-2] * swapped.data.shape[-1],)
    return nm.reshape(swapped, shape)


def multi_head(x, proj: HeadProjections, spec: AttnSpec, kv=None, key_valid=None,
               bias=None, weight_dropout=None, collect=None) -> Tensor:
    """Project into heads, attend per the spec, concatenate, project out.

    ``kv`` switches the key/value source (cross-attention); ``bias`` is a
    per-head additive score bias ([heads, Lq, Lk] dense or [heads, 1, 2r+1]
    slot layout). ``collect``, when a dict, receives the post-softmax
    weights and a column legend for map export.
    """
    x = as_tensor(x)
    kv_src = x if kv is None else as_tensor(kv)
    q = split_heads(nm.matmul(x, proj.wq), spec.heads, spec.d_kv)
    k = split_heads(nm.matmul(kv_src, proj.wk), spec.heads, spec.d_kv)
    v = split_heads(nm.matmul(kv_src, proj.wv), spec.heads, spec.d_kv)

    batched = x.data.ndim > 2
    kv_valid = None
    if key_valid is not None:
        kv_valid = np.asarray(key_valid, dtype=bool)
        if batched and kv_valid.ndim == x.data.ndim - 1:
            kv_valid = kv_valid[..., None, :]  # broadcast over heads

    Lq, Lk = q.data.shape[-2], k.data.shape[-2]
    if spec.mode == "dense":
        if spec.causal:
            mask = causal_mask(Lk) if Lq == Lk else causal_mask(Lk)[-Lq:]
            if kv_valid is not None:
                mask = mask & kv_valid[..., None, :]
        elif kv_valid is not None:
            mask = np.broadcast_to(kv_valid[..., None, :], kv_valid.shape[:-1] + (Lq, Lk))
        else:
            mask = None
        out, weights = dense_attention(q, k, v, mask=mask, bias=bias,
                                       weight_dropout=weight_dropout, return_weights=True)
        legend = None
    elif spec.mode == "sliding":
        out, weights = sliding_attention(q, k, v, spec.r, key_valid=kv_valid,
                                         slot_bias=bias, weight_dropout=weight_dropout,
                                         return_weights=True)
        legend = slot_legend(spec.r)
    else:
        out, weights = sliding_global_attention(q, k, v, spec.r, spec.k, key_valid=kv_valid,
                                                slot_bias=bias, weight_dropout=weight_dropout,
                                                return_weights=True)
        legend = slot_legend(spec.r, spec.k)

    if collect is not None:
        collect["weights"] = np.array(weights.data)
        collect["legend"] = legend
    return nm.matmul(merge_heads(out), proj.wo)


def causal_mask(L, key_valid=None):
    tri = np.tril(np.ones((L, L), dtype=bool))
    if key_valid is None:
        return tri
    key_valid = np.asarray(key_valid, dtype=bool)
    return tri & key_valid[..., None, :]


# -- relative position bias ----------------------------------------------------

def relative_position_bucket(relpos, causal, num_buckets=32, max_distance=128):
    """Map signed key-minus-query offsets to bucket ids.

    Bidirectional mode splits the buckets between the two directions;
    causal mode spends them all on the past. Nearby offsets get exact
    buckets, distant ones share log-spaced buckets up to max_distance.
    """
    relpos = np.asarray(relpos, dtype=np.int64)
    buckets = np.zeros_like(relpos)
    if causal:
        n = num_buckets
        dist = np.maximum(-relpos, 0)
    else:
        n = num_buckets // 2
        buckets = np.where(relpos > 0, n, 0)
        dist = np.abs(relpos)
    max_exact = n // 2
    is_small = dist < max_exact
    with np.errstate(divide="ignore"):
        log_part = max_exact + (
            np.log(np.maximum(dist, 1) / max_exact)
            / np.log(max_distance / max_exact)
            * (n - max_exact)
        ).astype(np.int64)
    log_part = np.minimum(log_part, n - 1)
    return buckets + np.where(is_small, dist, log_part)


def dense_position_bias(table, Lq, Lk, causal, num_buckets=32, max_distance=128) -> Tensor:
    """Bias [heads, Lq, Lk] from a [num_buckets, heads] table."""
    rel = np.arange(Lk)[None, :] - np.arange(Lq)[:, None]
    idx = relative_position_bucket(rel, causal, num_buckets, max_distance)
    bias = nm.take_rows(table, idx)  # [Lq, Lk, heads]
    return nm.transpose(bias, (2, 0, 1))


def slot_position_bias(table, r, causal=False, num_buckets=32, max_distance=128) -> Tensor:
    """Bias [heads, 1, 2r+1] for window slots; slot j sits at offset j - r."""
    rel = np.arange(-r, r + 1)
    idx = relative_position_bucket(rel, causal, num_buckets, max_distance)
    bias = nm.take_rows(table, idx)  # [2r+1, heads]
    return nm.reshape(nm.transpose(bias, (1, 0)), (table.data.shape[1], 1, 2 * r + 1))


def slot_legend(r, k=0):
    """Column labels for exported sparse attention maps."""
    labels = [f"w{o:+d}" for o in range(-r, r + 1)]
    labels += [f"g{b}" for b in range(k)]
    return labels


def map_to_csv_bytes(matrix, legend=None) -> bytes:
    """Render one attention map as CSV; sparse maps carry the slot legend."""
    matrix = np.asarray(matrix)
    lines = []
    if legend is not None:
        lines.append(",".join(legend))
    for row in matrix:
        lines.append(",".join(f"{x:.8g}" for x in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def map_to_pgm_bytes(matrix) -> bytes:
    """Render one attention map as binary PGM (P5), rows normalized to max."""
    matrix = np.asarray(matrix, dtype=np.float64)
    h, w = matrix.shape
    rowmax = matrix.max(axis=1, keepdims=True)
    scaled = np.divide(matrix, rowmax, out=np.zeros_like(matrix), where=rowmax > 0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()
