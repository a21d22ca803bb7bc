"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same
signature; ``kernels`` picks one at import time.
"""
import numpy as np

NEG_INF = -np.inf


def logsumexp_rows(a):
    """Row-wise log-sum-exp of a 2-D array; all ``-inf`` rows give ``-inf``."""
    a = np.asarray(a, dtype=np.float64)
    m = a.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - safe[:, None]).sum(axis=1)) + safe
    out[m == NEG_INF] = NEG_INF
    return out


def oohmm_forward(log_trans, log_emit_seq, bos):
    """Log forward vectors ``alpha_0 .. alpha_T``.

    ``log_emit_seq[t-1, u]`` is ``log p(x_t, y_t | u)`` for the observed pair.
    """
    log_trans = np.asarray(log_trans, dtype=np.float64)
    log_emit_seq = np.asarray(log_emit_seq, dtype=np.float64)
    k = log_trans.shape[0]
    T = log_emit_seq.shape[0]
    out = np.full((T + 1, k), NEG_INF)
    out[0, bos] = 0.0
    for t in range(T):
        out[t + 1] = logsumexp_rows((out[t][:, None] + log_trans).T) + log_emit_seq[t]
    return out


def oohmm_backward(log_trans, log_xmarg_seq):
    """Log backward vectors ``beta_0 .. beta_T`` with ``beta_T = 1``.

    ``log_xmarg_seq[t-1, u]`` is ``log p(x_t | u)`` (emission summed over y).
    """
    log_trans = np.asarray(log_trans, dtype=np.float64)
    log_xmarg_seq = np.asarray(log_xmarg_seq, dtype=np.float64)
    k = log_trans.shape[0]
    T = log_xmarg_seq.shape[0]
    out = np.zeros((T + 1, k))
    for t in range(T - 1, -1, -1):
        out[t] = logsumexp_rows(log_trans + (log_xmarg_seq[t] + out[t + 1])[None, :])
    return out


def oohmm_score_paths(log_trans, log_emit_xy, paths, bos):
    """Log joint ``G_T`` for many tag paths over one input.

    ``log_emit_xy[t, y, u]`` is ``log p(x_{t+1}, y | u)``; ``paths`` is an
    ``(N, T)`` integer array of tag indices.
    """
    log_trans = np.asarray(log_trans, dtype=np.float64)
    log_emit_xy = np.asarray(log_emit_xy, dtype=np.float64)
    paths = np.asarray(paths, dtype=np.int64)
    N, T = paths.shape
    k = log_trans.shape[0]
    la = np.full((N, k), NEG_INF)
    la[:, bos] = 0.0
    for t in range(T):
        prev = la[:, :, None] + log_trans[None, :, :]
        la = logsumexp_rows(prev.transpose(0, 2, 1).reshape(N * k, k)).reshape(N, k)
        la = la + log_emit_xy[t, paths[:, t], :]
    return logsumexp_rows(la)


def _sigmoid(v):
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def gru_forward(x, h, W, U, b):
    """One GRU step for a batch of rows.

    Gate blocks are ordered ``[update | reset | candidate]`` along the last
    axis of ``W``, ``U`` and ``b``.  Returns the new hidden state and the
    cache ``(z, r, n, hn)`` needed by :func:`gru_backward`.
    """
    d = h.shape[1]
    a = x @ W + b
    c = h @ U
    z = _sigmoid(a[:, :d] + c[:, :d])
    r = _sigmoid(a[:, d:2 * d] + c[:, d:2 * d])
    hn = c[:, 2 * d:]
    n = np.tanh(a[:, 2 * d:] + r * hn)
    h_new = z * h + (1.0 - z) * n
    return h_new, z, r, n, hn


def gru_expand(xa, hc, h):
    """GRU step for every (state, input) combination.

    ``xa = x @ W + b`` holds the input projections of ``Y`` candidate inputs
    and ``hc = h @ U`` the recurrent projections of ``M`` states.  Returns
    the ``(M, Y, d)`` array of next states, equal to :func:`gru_forward` on
    all ``M * Y`` pairs.
    """
    d = h.shape[1]
    a, c = xa[None, :, :], hc[:, None, :]
    z = _sigmoid(a[..., :d] + c[..., :d])
    r = _sigmoid(a[..., d:2 * d] + c[..., d:2 * d])
    n = np.tanh(a[..., 2 * d:] + r * c[..., 2 * d:])
    return n + z * (h[:, None, :] - n)


def gru_backward(dh_new, x, h, W, U, z, r, n, hn):
    """Gradients of one GRU step; returns ``(dx, dh, dW, dU, db)``."""
    dz = dh_new * (h - n)
    dn_pre = dh_new * (1.0 - z) * (1.0 - n * n)
    dr_pre = dn_pre * hn * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)
    da = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1)
    dc = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=1)
    dx = da @ W.T
    dh = dh_new * z + dc @ U.T
    dW = x.T @ da
    dU = h.T @ dc
    db = da.sum(axis=0)
    return dx, dh, dW, dU, db


def cumulative_inversion(weights, uniforms):
    """Map uniforms in [0, 1) to indices by inverting the weight CDF.

    The last positive-weight bucket absorbs floating-point residue.
    """
    w = np.asarray(weights, dtype=np.float64)
    u = np.asarray(uniforms, dtype=np.float64)
    positive = np.flatnonzero(w > 0)
    if positive.size == 0:
        raise ValueError("all weights are zero")
    c = np.cumsum(w)
    c = c / c[-1]
    idx = np.searchsorted(c, u, side="right")
    return np.minimum(idx, positive[-1]).astype(np.int64)
