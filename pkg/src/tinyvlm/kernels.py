"""Hot numeric kernels, each with a numba-jitted and a pure-numpy implementation.

The active backend is chosen once at import from the ``TINYVLM_NUMBA`` env var
("0" forces the numpy path) and can be switched at runtime with
:func:`set_backend` (used by the benchmark and the cross-path tests). When
numba is not importable the numpy path is used silently.

Determinism notes:
  * ``adamw_update`` and the BPE kernels are bit-identical across backends
    (same per-element operation sequence, computed in the array dtype).
  * The softmax kernels differ only in reduction order (numpy uses pairwise
    summation), so they agree to float tolerance, and each backend is
    individually deterministic run to run.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit, typed, types

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    _HAVE_NUMBA = False

_backend = "numpy"
if _HAVE_NUMBA and os.environ.get("TINYVLM_NUMBA", "1") != "0":
    _backend = "numba"


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in available_backends():
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _backend = name


# ---------------------------------------------------------------------------
# AdamW fused parameter update
# ---------------------------------------------------------------------------

def _adamw_numpy(p, g, m, v, lr, beta1, omb1, beta2, omb2, eps, lrwd, bc1, bc2):
    m *= beta1
    m += omb1 * g
    v *= beta2
    v += omb2 * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    decay = lrwd * p  # decoupled decay uses the pre-update parameter
    p -= lr * (mhat / (np.sqrt(vhat) + eps))
    p -= decay


if _HAVE_NUMBA:

    @njit(cache=True)
    def _adamw_numba(p, g, m, v, lr, beta1, omb1, beta2, omb2, eps, lrwd, bc1, bc2):
        for i in range(p.shape[0]):
            gi = g[i]
            m[i] = beta1 * m[i] + omb1 * gi
            v[i] = beta2 * v[i] + omb2 * (gi * gi)
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            pi = p[i]
            p[i] = (pi - lr * (mhat / (np.sqrt(vhat) + eps))) - lrwd * pi


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """In-place AdamW update on flat arrays of one parameter tensor.

    ``bc1``/``bc2`` are the bias-correction denominators ``1 - beta^t``. All
    scalars (including the precomputed 1-beta factors) are cast to the
    parameter dtype so both backends run the identical per-element operation
    sequence and produce bit-identical results.
    """
    t = p.dtype.type
    args = (t(lr), t(beta1), t(1.0 - beta1), t(beta2), t(1.0 - beta2), t(eps),
            t(t(lr) * t(wd)), t(bc1), t(bc2))
    if _backend == "numba":
        _adamw_numba(p, g, m, v, *args)
    else:
        _adamw_numpy(p, g, m, v, *args)


# ---------------------------------------------------------------------------
# Causal (lower-triangular) softmax over attention scores [B, H, T, T]
# ---------------------------------------------------------------------------

def _causal_softmax_numpy(scores):
    T = scores.shape[-1]
    mask = np.tril(np.ones((T, T), dtype=bool))
    neg = np.array(-np.inf, dtype=scores.dtype)
    masked = np.where(mask, scores, neg)
    mx = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - mx)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_softmax_grad_numpy(probs, dprobs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _causal_softmax_numba(scores):
        B, H, T, _ = scores.shape
        out = np.zeros_like(scores)
        for b in range(B):
            for h in range(H):
                for t in range(T):
                    mx = scores[b, h, t, 0]
                    for j in range(1, t + 1):
                        s = scores[b, h, t, j]
                        if s > mx:
                            mx = s
                    total = 0.0
                    for j in range(t + 1):
                        e = np.exp(scores[b, h, t, j] - mx)
                        out[b, h, t, j] = e
                        total += e
                    for j in range(t + 1):
                        out[b, h, t, j] /= total
        return out

    @njit(cache=True)
    def _causal_softmax_grad_numba(probs, dprobs):
        B, H, T, _ = probs.shape
        out = np.zeros_like(probs)
        for b in range(B):
            for h in range(H):
                for t in range(T):
                    inner = 0.0
                    for j in range(t + 1):
                        inner += dprobs[b, h, t, j] * probs[b, h, t, j]
                    for j in range(t + 1):
                        out[b, h, t, j] = probs[b, h, t, j] * (dprobs[b, h, t, j] - inner)
        return out


def causal_softmax(scores):
    """Row-wise softmax over positions j <= t; entries above the diagonal are 0."""
    if _backend == "numba":
        return _causal_softmax_numba(scores)
    return _causal_softmax_numpy(scores)


def causal_softmax_grad(probs, dprobs):
    """Backward of :func:`causal_softmax` given its output and its cotangent."""
    if _backend == "numba":
        return _causal_softmax_grad_numba(probs, dprobs)
    return _causal_softmax_grad_numpy(probs, dprobs)


# ---------------------------------------------------------------------------
# BPE training primitives over padded symbol-id matrices
# ---------------------------------------------------------------------------
# words: int32 [n_units, width], padded with -1 past each unit's length
# lengths: int32 [n_units], counts: int64 [n_units]
# Pair (a, b) at adjacent positions is coded as a * n_syms + b (int64).

def _pair_counts_numpy(words, lengths, counts, n_syms):
    width = words.shape[1]
    if width < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    col = np.arange(width - 1)
    valid = col[None, :] < (lengths - 1)[:, None]
    if not valid.any():
        return np.empty(0, np.int64), np.empty(0, np.int64)
    left = words[:, :-1][valid].astype(np.int64)
    right = words[:, 1:][valid].astype(np.int64)
    weight = np.broadcast_to(counts[:, None], valid.shape)[valid]
    codes = left * np.int64(n_syms) + right
    uniq, inv = np.unique(codes, return_inverse=True)
    # float64 bincount sums are exact below 2**53, far above any corpus here
    sums = np.bincount(inv, weights=weight.astype(np.float64)).astype(np.int64)
    return uniq, sums


if _HAVE_NUMBA:

    @njit(cache=True)
    def _pair_counts_numba(words, lengths, counts, n_syms):
        table = typed.Dict.empty(key_type=types.int64, value_type=types.int64)
        for w in range(words.shape[0]):
            n = lengths[w]
            c = counts[w]
            for i in range(n - 1):
                code = np.int64(words[w, i]) * np.int64(n_syms) + np.int64(words[w, i + 1])
                if code in table:
                    table[code] += c
                else:
                    table[code] = c
        m = len(table)
        codes = np.empty(m, np.int64)
        k = 0
        for code in table:
            codes[k] = code
            k += 1
        codes = np.sort(codes)
        sums = np.empty(m, np.int64)
        for i in range(m):
            sums[i] = table[codes[i]]
        return codes, sums


def pair_counts(words, lengths, counts, n_syms):
    """Frequency of each adjacent symbol pair, weighted by unit counts.

    Returns (codes, sums) with codes == left * n_syms + right, sorted ascending.
    """
    if _backend == "numba":
        return _pair_counts_numba(words, lengths, counts, n_syms)
    return _pair_counts_numpy(words, lengths, counts, n_syms)


def _apply_merge_row(row, n, left, right, new_id):
    # greedy left-to-right rewrite; returns the new length
    w = 0
    i = 0
    while i < n:
        if i + 1 < n and row[i] == left and row[i + 1] == right:
            row[w] = new_id
            i += 2
        else:
            row[w] = row[i]
            i += 1
        w += 1
    for j in range(w, n):
        row[j] = -1
    return w


def _apply_merge_numpy(words, lengths, left, right, new_id):
    col = np.arange(words.shape[1] - 1)
    valid = col[None, :] < (lengths - 1)[:, None]
    hit = ((words[:, :-1] == left) & (words[:, 1:] == right) & valid).any(axis=1)
    for w in np.nonzero(hit)[0]:
        lengths[w] = _apply_merge_row(words[w], lengths[w], left, right, new_id)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _apply_merge_numba(words, lengths, left, right, new_id):
        for w in range(words.shape[0]):
            n = lengths[w]
            hit = False
            for i in range(n - 1):
                if words[w, i] == left and words[w, i + 1] == right:
                    hit = True
                    break
            if not hit:
                continue
            wr = 0
            i = 0
            while i < n:
                if i + 1 < n and words[w, i] == left and words[w, i + 1] == right:
                    words[w, wr] = new_id
                    i += 2
                else:
                    words[w, wr] = words[w, i]
                    i += 1
                wr += 1
            for j in range(wr, n):
                words[w, j] = -1
            lengths[w] = wr


def apply_merge(words, lengths, left, right, new_id):
    """Rewrite every (left, right) adjacency to new_id, greedily left to right.

    Mutates ``words`` and ``lengths`` in place.
    """
    if _backend == "numba":
        _apply_merge_numba(words, lengths, np.int32(left), np.int32(right), np.int32(new_id))
    else:
        _apply_merge_numpy(words, lengths, left, right, new_id)
