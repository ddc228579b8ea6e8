"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorized
numpy version. ``CROSSMATCH_NO_NUMBA=1`` (or numba missing) selects numpy.
Both paths are deterministic; integer-valued kernels agree exactly, float
kernels agree to ~1e-15 absolute.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("CROSSMATCH_NO_NUMBA", "0") not in ("1", "true", "yes")


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_cell_forward_np(z, h_prev, c_prev, mask):
    H = c_prev.shape[1]
    i = _sigmoid_np(z[:, :H])
    f = _sigmoid_np(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid_np(z[:, 3 * H:])
    c_new = f * c_prev + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    m = mask[:, None] > 0
    h = np.where(m, h_new, h_prev)
    c = np.where(m, c_new, c_prev)
    acts = np.concatenate([i, f, g, o], axis=1)
    return h, c, acts, tanh_c


def lstm_cell_backward_np(dh, dc, acts, tanh_c, c_prev, mask):
    H = c_prev.shape[1]
    i, f, g, o = acts[:, :H], acts[:, H:2 * H], acts[:, 2 * H:3 * H], acts[:, 3 * H:]
    m = (mask > 0)[:, None]
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.concatenate([
        dct * g * i * (1.0 - i),
        dct * c_prev * f * (1.0 - f),
        dct * i * (1.0 - g * g),
        dh * tanh_c * o * (1.0 - o),
    ], axis=1)
    dz = np.where(m, dz, 0.0)
    dh_prev = np.where(m, 0.0, dh)
    dc_prev = np.where(m, dct * f, dc)
    return dz, dh_prev, dc_prev


def _ranking_np(scores):
    # stable sort of negated scores: descending, ties by ascending gallery index
    return np.argsort(-scores, axis=1, kind="stable")


def first_hit_positions_np(scores, probe_labels, gallery_labels):
    order = _ranking_np(scores)
    hits = gallery_labels[order] == probe_labels[:, None]
    pos = np.argmax(hits, axis=1).astype(np.int64)
    pos[~hits.any(axis=1)] = -1
    return pos


def topk_correct_counts_np(scores, probe_labels, gallery_labels, k):
    order = _ranking_np(scores)[:, :k]
    return (gallery_labels[order] == probe_labels[:, None]).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------- numba path

if numba is not None:

    # branch-free forms vectorize; exp overflow to inf still yields the right limit
    @numba.njit(cache=True, inline="always")
    def _sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    @numba.njit(cache=True, inline="always")
    def _tanh(x):
        return 2.0 / (1.0 + np.exp(-2.0 * x)) - 1.0

    @numba.njit(cache=True)
    def lstm_cell_forward_nb(z, h_prev, c_prev, mask):
        B, H = c_prev.shape
        h = np.empty((B, H))
        c = np.empty((B, H))
        acts = np.empty((B, 4 * H))
        tanh_c = np.empty((B, H))
        for b in range(B):
            for j in range(H):
                i = _sig(z[b, j])
                f = _sig(z[b, H + j])
                g = _tanh(z[b, 2 * H + j])
                o = _sig(z[b, 3 * H + j])
                cn = f * c_prev[b, j] + i * g
                tc = _tanh(cn)
                acts[b, j] = i
                acts[b, H + j] = f
                acts[b, 2 * H + j] = g
                acts[b, 3 * H + j] = o
                tanh_c[b, j] = tc
                if mask[b] > 0:
                    c[b, j] = cn
                    h[b, j] = o * tc
                else:
                    c[b, j] = c_prev[b, j]
                    h[b, j] = h_prev[b, j]
        return h, c, acts, tanh_c

    @numba.njit(cache=True)
    def lstm_cell_backward_nb(dh, dc, acts, tanh_c, c_prev, mask):
        B, H = c_prev.shape
        dz = np.zeros((B, 4 * H))
        dh_prev = np.zeros((B, H))
        dc_prev = np.empty((B, H))
        for b in range(B):
            if mask[b] > 0:
                for j in range(H):
                    i = acts[b, j]
                    f = acts[b, H + j]
                    g = acts[b, 2 * H + j]
                    o = acts[b, 3 * H + j]
                    tc = tanh_c[b, j]
                    dct = dc[b, j] + dh[b, j] * o * (1.0 - tc * tc)
                    dz[b, j] = dct * g * i * (1.0 - i)
                    dz[b, H + j] = dct * c_prev[b, j] * f * (1.0 - f)
                    dz[b, 2 * H + j] = dct * i * (1.0 - g * g)
                    dz[b, 3 * H + j] = dh[b, j] * tc * o * (1.0 - o)
                    dc_prev[b, j] = dct * f
            else:
                for j in range(H):
                    dh_prev[b, j] = dh[b, j]
                    dc_prev[b, j] = dc[b, j]
        return dz, dh_prev, dc_prev

    @numba.njit(cache=True)
    def _beaten_by(row, j):
        # 0-based rank of gallery item j: items scoring higher, or tied at a lower index
        s = row[j]
        n = 0
        for l in range(row.shape[0]):
            if row[l] > s or (row[l] == s and l < j):
                n += 1
        return n

    @numba.njit(cache=True)
    def first_hit_positions_nb(scores, probe_labels, gallery_labels):
        M, N = scores.shape
        out = np.full(M, -1, dtype=np.int64)
        for m in range(M):
            best = -1
            for j in range(N):
                if gallery_labels[j] == probe_labels[m]:
                    p = _beaten_by(scores[m], j)
                    if best < 0 or p < best:
                        best = p
            out[m] = best
        return out

    @numba.njit(cache=True)
    def topk_correct_counts_nb(scores, probe_labels, gallery_labels, k):
        M, N = scores.shape
        out = np.zeros(M, dtype=np.int64)
        for m in range(M):
            for j in range(N):
                if gallery_labels[j] == probe_labels[m] and _beaten_by(scores[m], j) < k:
                    out[m] += 1
        return out

else:  # pragma: no cover
    lstm_cell_forward_nb = lstm_cell_forward_np
    lstm_cell_backward_nb = lstm_cell_backward_np
    first_hit_positions_nb = first_hit_positions_np
    topk_correct_counts_nb = topk_correct_counts_np


if USE_NUMBA:
    lstm_cell_forward = lstm_cell_forward_nb
    lstm_cell_backward = lstm_cell_backward_nb
    first_hit_positions = first_hit_positions_nb
    topk_correct_counts = topk_correct_counts_nb
else:
    lstm_cell_forward = lstm_cell_forward_np
    lstm_cell_backward = lstm_cell_backward_np
    first_hit_positions = first_hit_positions_np
    topk_correct_counts = topk_correct_counts_np
