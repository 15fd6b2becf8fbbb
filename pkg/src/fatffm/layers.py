"""Differentiable building blocks of the field-aware models.

Every forward returns (output, cache); the matching *_backward consumes that
cache plus the upstream gradient and returns input/parameter gradients. The
batch axis comes first everywhere. The gathered embedding block EM has shape
(B, n, n, k): EM[b, i, j] is field i's active-feature embedding aimed at
target field j, already scaled by the instance value.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .diffcore import dropout_mask
from .errors import DataError


@lru_cache(maxsize=None)
def pair_indices(n: int):
    """Lexicographic (i, j) with i < j: (0,1), (0,2), ..., (n-2, n-1)."""
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if not pairs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    ii, jj = zip(*pairs)
    return np.asarray(ii, dtype=np.int64), np.asarray(jj, dtype=np.int64)


def check_indices(idx, sizes) -> None:
    if idx.size and (np.any(idx < 0) or np.any(idx >= sizes[None, :])):
        bad = np.argwhere((idx < 0) | (idx >= sizes[None, :]))[0]
        raise DataError(
            f"feature index out of range: row {bad[0]}, field {bad[1]}, "
            f"index {idx[bad[0], bad[1]]}, field size {sizes[bad[1]]}"
        )


def gather(table, idx, val, offsets, sizes):
    """Collect the per-field embedding blocks for a batch.

    table is (m, n, k) for field-aware variants or (m, 1, k) for the shared
    (plain FM) variant, which is broadcast across target fields.
    """
    check_indices(idx, sizes)
    rows = idx + offsets[None, :]
    em = table[rows] * val[:, :, None, None]  # (B, n, t, k)
    n = idx.shape[1]
    if em.shape[2] == 1 and n > 1:
        em = np.broadcast_to(em, (em.shape[0], n, n, em.shape[3]))
    cache = (rows, val, table.shape)
    return em, cache


def gather_backward(dem, cache):
    rows, val, table_shape = cache
    t = table_shape[1]
    per_field = dem if t != 1 else dem.sum(axis=2, keepdims=True)
    contrib = per_field * val[:, :, None, None]
    dtable = np.zeros(table_shape, dtype=dem.dtype)
    np.add.at(dtable, rows.ravel(), contrib.reshape(-1, t, table_shape[2]))
    return dtable


def compose_conv(em, u, b, shared=False):
    """Pointwise-convolution composer: one ReLU'd scalar per (field, target).

    Per-slot mode uses a distinct length-k kernel per (i, f) plus bias;
    shared mode reuses one kernel per owning field i across targets.
    """
    if shared:
        pre = np.einsum("bijk,ik->bij", em, u, optimize=True) + b[None, :, None]
    else:
        pre = np.einsum("bijk,ijk->bij", em, u, optimize=True) + b[None]
    out = np.maximum(pre, 0)
    batch, n = em.shape[0], em.shape[1]
    return out.reshape(batch, n * n), (em, u, pre, shared)


def compose_conv_backward(dd, cache):
    em, u, pre, shared = cache
    batch, n = em.shape[0], em.shape[1]
    dpre = dd.reshape(batch, n, n) * (pre > 0)
    if shared:
        du = np.einsum("bij,bijk->ik", dpre, em, optimize=True)
        db = dpre.sum(axis=(0, 2))
        dem = dpre[..., None] * u[None, :, None, :]
    else:
        du = np.einsum("bij,bijk->ijk", dpre, em, optimize=True)
        db = dpre.sum(axis=0)
        dem = dpre[..., None] * u[None]
    return dem, du, db


def compose_maxpool(em):
    """Parameter-free composer: the strongest coordinate of each embedding."""
    arg = em.argmax(axis=3)
    out = np.take_along_axis(em, arg[..., None], axis=3)[..., 0]
    batch, n = em.shape[0], em.shape[1]
    return out.reshape(batch, n * n), (em.shape, arg)


def compose_maxpool_backward(dd, cache):
    shape, arg = cache
    batch, n = shape[0], shape[1]
    dem = np.zeros(shape, dtype=dd.dtype)
    np.put_along_axis(dem, arg[..., None], dd.reshape(batch, n, n)[..., None], axis=3)
    return dem


def excite(d, w1, w2):
    """Two bias-free FC layers with ReLU; w1 reduces, w2 restores the width."""
    h_pre = d @ w1.T
    h = np.maximum(h_pre, 0)
    s_pre = h @ w2.T
    s = np.maximum(s_pre, 0)
    return s, (d, w1, w2, h_pre, h, s_pre)


def excite_backward(ds, cache):
    d, w1, w2, h_pre, h, s_pre = cache
    dspre = ds * (s_pre > 0)
    dw2 = dspre.T @ h
    dh = dspre @ w2
    dhpre = dh * (h_pre > 0)
    dw1 = dhpre.T @ d
    dd = dhpre @ w1
    return dd, dw1, dw2


def rescale(em, s):
    """Multiply each embedding vector by its attention scalar; shape kept."""
    batch, n = em.shape[0], em.shape[1]
    s3 = s.reshape(batch, n, n)
    return em * s3[..., None], (em, s3)


def rescale_backward(daem, cache):
    em, s3 = cache
    dem = daem * s3[..., None]
    ds = np.einsum("bijk,bijk->bij", daem, em, optimize=True)
    batch, n = em.shape[0], em.shape[1]
    return dem, ds.reshape(batch, n * n)


def interact_inner(em):
    """Pairwise dot products <v_ij, v_ji> for i < j; output (B, n(n-1)/2)."""
    n = em.shape[1]
    ii, jj = pair_indices(n)
    a = np.einsum("bpk,bpk->bp", em[:, ii, jj, :], em[:, jj, ii, :], optimize=True)
    return a, (em, ii, jj)


def interact_inner_backward(da, cache):
    em, ii, jj = cache
    dem = np.zeros(em.shape, dtype=da.dtype)
    dem[:, ii, jj, :] = da[..., None] * em[:, jj, ii, :]
    dem[:, jj, ii, :] = da[..., None] * em[:, ii, jj, :]
    return dem


def interact_hadamard(em):
    """Pairwise elementwise products, concatenated; output (B, k*n(n-1)/2)."""
    n = em.shape[1]
    ii, jj = pair_indices(n)
    prod = em[:, ii, jj, :] * em[:, jj, ii, :]
    return prod.reshape(em.shape[0], -1), (em, ii, jj)


def interact_hadamard_backward(da, cache):
    em, ii, jj = cache
    k = em.shape[3]
    d3 = da.reshape(em.shape[0], len(ii), k)
    dem = np.zeros(em.shape, dtype=da.dtype)
    dem[:, ii, jj, :] = d3 * em[:, jj, ii, :]
    dem[:, jj, ii, :] = d3 * em[:, ii, jj, :]
    return dem


def mlp_forward(a, weights, biases, rate, training, rng):
    """Stack of affine + ReLU (+ inverted dropout while training)."""
    x = a
    caches = []
    for w, b in zip(weights, biases):
        pre = x @ w.T + b
        h = np.maximum(pre, 0)
        if training and rate > 0.0:
            mask = dropout_mask(rng, h.shape, rate, h.dtype)
            out = h * mask
        else:
            mask = None
            out = h
        caches.append((x, w, pre, mask))
        x = out
    return x, caches


def mlp_backward(dx, caches):
    dws, dbs = [], []
    for x, w, pre, mask in reversed(caches):
        if mask is not None:
            dx = dx * mask
        dpre = dx * (pre > 0)
        dws.append(dpre.T @ x)
        dbs.append(dpre.sum(axis=0))
        dx = dpre @ w
    return dx, dws[::-1], dbs[::-1]


def linear_score(w, b, idx, val, offsets, sizes):
    """First-order term: b + sum over fields of value * weight[feature]."""
    check_indices(idx, sizes)
    rows = idx + offsets[None, :]
    return b[0] + np.sum(w[rows] * val, axis=1), rows


def linear_backward(dscore, rows, val, m, dtype):
    dw = np.zeros(m, dtype=dtype)
    np.add.at(dw, rows.ravel(), (dscore[:, None] * val).astype(dtype).ravel())
    db = np.array([dscore.sum()], dtype=dtype)
    return dw, db


def _softmax_rows(e):
    z = e - e.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def cross_attention_mlp(a, d_pair, w, b, h):
    """Softmax attention over cross features, scored by a small shared MLP.

    a is the interaction vector; each pair's cross feature c_p is a scalar
    (inner product) or a k-vector (Hadamard). Scores e_p = h . relu(W c_p + b)
    are softmax-normalised over pairs and reweight the cross features.
    """
    batch = a.shape[0]
    c = a.reshape(batch, -1, d_pair)
    pre = np.einsum("bpd,wd->bpw", c, w, optimize=True) + b
    r = np.maximum(pre, 0)
    e = np.einsum("bpw,w->bp", r, h, optimize=True)
    att = _softmax_rows(e)
    out = att[..., None] * c
    return out.reshape(batch, -1), (c, w, h, pre, r, att)


def cross_attention_mlp_backward(dout, cache):
    c, w, h, pre, r, att = cache
    batch, n_pairs, d_pair = c.shape
    d3 = dout.reshape(batch, n_pairs, d_pair)
    datt = np.einsum("bpd,bpd->bp", d3, c, optimize=True)
    dc = att[..., None] * d3
    de = att * (datt - np.sum(datt * att, axis=1, keepdims=True))
    dh = np.einsum("bpw,bp->w", r, de, optimize=True)
    dpre = (de[..., None] * h) * (pre > 0)
    dw = np.einsum("bpw,bpd->wd", dpre, c, optimize=True)
    db = dpre.sum(axis=(0, 1))
    dc = dc + np.einsum("bpw,wd->bpd", dpre, w, optimize=True)
    return dc.reshape(batch, -1), dw, db, dh


def cross_attention_cenet(a, d_pair, u, ub, w1, w2, force_ones=False):
    """ReLU (un-normalised) attention over cross features.

    Hadamard cross features are composed to one descriptor each by a
    pointwise convolution (u, ub); scalar cross features are their own
    descriptors (u is None). The two-FC excitation then produces one
    non-negative weight per pair. `force_ones` is a test hook that pins the
    attention to 1 so the layer reduces to the identity.
    """
    batch = a.shape[0]
    c = a.reshape(batch, -1, d_pair)
    if u is None:
        desc = c[..., 0]
        pre = None
    else:
        pre = np.einsum("bpk,pk->bp", c, u, optimize=True) + ub
        desc = np.maximum(pre, 0)
    if force_ones:
        s, exc_cache = np.ones_like(desc), None
    else:
        s, exc_cache = excite(desc, w1, w2)
    out = s[..., None] * c
    return out.reshape(batch, -1), (c, u, pre, s, exc_cache)


def cross_attention_cenet_backward(dout, cache):
    c, u, pre, s, exc_cache = cache
    batch = c.shape[0]
    d3 = dout.reshape(c.shape)
    dc = s[..., None] * d3
    if exc_cache is None:  # attention was pinned: no gradient flows through it
        return dc.reshape(batch, -1), None, None, None, None
    ds = np.einsum("bpd,bpd->bp", d3, c, optimize=True)
    ddesc, dw1, dw2 = excite_backward(ds, exc_cache)
    if u is None:
        dc[..., 0] += ddesc
        du = dub = None
    else:
        dpre = ddesc * (pre > 0)
        du = np.einsum("bp,bpk->pk", dpre, c, optimize=True)
        dub = dpre.sum(axis=0)
        dc = dc + dpre[..., None] * u[None]
    return dc.reshape(batch, -1), du, dub, dw1, dw2
