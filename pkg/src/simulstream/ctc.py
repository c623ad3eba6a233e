"""CTC: collapsing, forward-algorithm loss, greedy decoding, expected prefix counts.

Token id conventions shared by every vocabulary in the package:
0 = padding, 1 = <eos>, 2 = CTC blank.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import Tensor, make_op

PAD = 0
EOS = 1
BLANK = 2

NEG_INF = -np.inf


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


def collapse_continue(path: Sequence[int], prev: int | None, blank: int = BLANK) -> tuple[list[int], int | None]:
    """Collapse a path segment that continues a previous one ending in ``prev``.

    Returns the new tokens and the last path symbol to carry forward, so that
    concatenated segment outputs equal the collapse of the concatenated path.
    """
    out = []
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out, prev


def greedy_path(log_probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest id.
    return np.argmax(log_probs, axis=-1)


def greedy_decode(dist, blank: int = BLANK) -> list[int]:
    """Per-position argmax then collapse.  Accepts probabilities or log-probabilities."""
    arr = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    return collapse(greedy_path(arr), blank)


def _logsumexp2(a, b):
    m = np.maximum(a, b)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(np.exp(a - safe) + np.exp(b - safe)), m)


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
        return np.where(np.isfinite(m), safe + np.log(s), m)


def _extend(targets: np.ndarray, blank: int) -> np.ndarray:
    B, L = targets.shape
    ext = np.full((B, 2 * L + 1), blank, dtype=np.int64)
    ext[:, 1::2] = targets
    return ext


def ctc_forward_backward(logp: np.ndarray, input_lengths, targets, target_lengths, blank: int = BLANK):
    """Batched log-space alpha/beta recursions.

    logp: (B, T, V) log-probabilities (treated as free variables).
    targets: (B, L) padded target ids.
    Returns (log_likelihood (B,), grad (B, T, V)) where grad is
    d(-log p)/d logp, zero for infeasible samples and padded frames.
    """
    B, T, V = logp.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(B, -1)
    in_len = np.asarray(input_lengths, dtype=np.int64)
    tg_len = np.asarray(target_lengths, dtype=np.int64)
    L = targets.shape[1]
    S = 2 * L + 1
    ext = _extend(targets, blank)
    s_idx = np.arange(S)
    s_len = 2 * tg_len + 1
    valid_s = s_idx[None, :] < s_len[:, None]
    # skip transition s-2 -> s allowed for non-blank labels differing from s-2
    skip = np.zeros((B, S), dtype=bool)
    if S > 2:
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    rows = np.arange(B)[:, None]
    emit = logp[rows[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]]  # (B, T, S)
    emit = np.where(valid_s[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = np.where(tg_len > 0, emit[:, 0, 1], NEG_INF)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a1 = np.concatenate([np.full((B, 1), NEG_INF), prev[:, :-1]], axis=1)
        a2 = np.concatenate([np.full((B, 2), NEG_INF), prev[:, :-2]], axis=1)[:, :S]
        a2 = np.where(skip, a2, NEG_INF)
        alpha[:, t] = _logsumexp3(prev, a1, a2) + emit[:, t]

    last = in_len - 1
    a_last = alpha[np.arange(B), last]  # (B, S)
    end1 = a_last[np.arange(B), s_len - 1]
    end2 = np.where(s_len >= 2, a_last[np.arange(B), np.maximum(s_len - 2, 0)], NEG_INF)
    loglik = _logsumexp2(end1, end2)

    # beta_t(s): log prob of emitting the rest after being at s at time t (excl. emission at t)
    beta = np.full((B, T, S), NEG_INF)
    b_idx = np.arange(B)
    beta[b_idx, last, s_len - 1] = 0.0
    beta[b_idx[s_len >= 2], last[s_len >= 2], s_len[s_len >= 2] - 2] = 0.0
    skip_next = np.zeros((B, S), dtype=bool)
    if S > 2:
        skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        b1 = np.concatenate([nxt[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
        b2 = np.concatenate([nxt[:, 2:], np.full((B, 2), NEG_INF)], axis=1)[:, :S]
        b2 = np.where(skip_next, b2, NEG_INF)
        rec = _logsumexp3(nxt, b1, b2)
        active = (t < last)[:, None]
        beta[:, t] = np.where(active, rec, beta[:, t])

    feasible = np.isfinite(loglik)
    occ_log = alpha + beta - np.where(feasible, loglik, 0.0)[:, None, None]
    occ = np.where(np.isfinite(occ_log), np.exp(np.where(np.isfinite(occ_log), occ_log, 0.0)), 0.0)
    occ *= (np.arange(T)[None, :] < in_len[:, None])[:, :, None]
    occ *= feasible[:, None, None]
    onehot = np.zeros((B, S, V))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=-1)
    grad = -(occ @ onehot)
    return loglik, grad


def ctc_loss(log_probs: Tensor, targets, input_lengths=None, target_lengths=None,
             blank: int = BLANK) -> Tensor:
    """Per-sample CTC negative log-likelihood, graph-attached.

    log_probs: (T, V) or (B, T, V).  Returns shape () or (B,).
    Infeasible samples get +inf and contribute no gradient.
    """
    single = log_probs.ndim == 2
    lp = log_probs.data[None] if single else log_probs.data
    B, T, _ = lp.shape
    if single:
        tg = np.asarray(targets, dtype=np.int64).reshape(1, -1)
        tl = np.array([tg.shape[1]])
        il = np.array([T])
    else:
        tg = np.asarray(targets, dtype=np.int64).reshape(B, -1)
        tl = np.full(B, tg.shape[1]) if target_lengths is None else np.asarray(target_lengths)
        il = np.full(B, T) if input_lengths is None else np.asarray(input_lengths)
    if tg.size and np.any((tg == blank) & (np.arange(tg.shape[1])[None] < tl[:, None])):
        raise ValueError("CTC targets must not contain the blank id")
    if tg.shape[1] == 0:
        tg = np.zeros((B, 1), dtype=np.int64)
    loglik, grad = ctc_forward_backward(lp, il, tg, tl, blank)
    loss = -loglik

    def grad_fn(g):
        gg = grad * np.reshape(g, (-1, 1, 1))
        return (gg[0] if single else gg,)

    return make_op(loss[0] if single else loss, (log_probs,), grad_fn)


def expected_prefix_counts(probs, blank: int = BLANK) -> np.ndarray:
    """Expected number of collapsed tokens decodable from each prefix.

    N_j = sum_{m<=j} (1 - p(blank|m) - sum_v p(v|m) p(v|m-1)), with p(.|0) = 0.
    ``probs`` is (T, V) or (B, T, V) probabilities.
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    nonblank = np.delete(p, blank, axis=-1)
    prev = np.zeros_like(nonblank)
    prev[..., 1:, :] = nonblank[..., :-1, :]
    contrib = 1.0 - p[..., blank] - (nonblank * prev).sum(axis=-1)
    return np.cumsum(contrib, axis=-1)


def discrete_prefix_counts(log_probs, blank: int = BLANK) -> np.ndarray:
    """|collapse(argmax path[:j])| for every j (integer counts)."""
    arr = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    path = greedy_path(arr)
    new = (path != blank)
    new[1:] &= path[1:] != path[:-1]
    return np.cumsum(new).astype(np.int64)
