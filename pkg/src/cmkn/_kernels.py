"""Hot loops of the motif kernel, each with a numba and a numpy implementation.

Every public function here dispatches on :func:`cmkn._accel.use_numba`. Both
paths compute the same quantity; they agree to a few ulps, not bit-for-bit.

Conventions: motif windows are rows of a ``(P, D)`` float64 array (``D = |A|k``),
circle-mapped positions are rows of a ``(P, 2)`` array. ``pos_scale`` is
``beta / (2 sigma^2)``.
"""

import numpy as np

from ._accel import njit, use_numba

# ---------------------------------------------------------------- numba side

@njit
def _k0_matrix_nb(am, ap, bm, bp, alpha, k, pos_scale):
    n = am.shape[0]
    m = bm.shape[0]
    d = am.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            dot = 0.0
            for c in range(d):
                dot += am[i, c] * bm[j, c]
            pdot = ap[i, 0] * bp[j, 0] + ap[i, 1] * bp[j, 1]
            out[i, j] = np.exp(alpha * (dot - k) + pos_scale * (pdot - 1.0))
    return out


@njit
def _pair_sum(windows, codes, onehot, a, b, c, e, epos, tab, alpha, k):
    # sum over window pairs (p in a..b, q in c..e) of exp(motif term) * epos[p-a, q-c]
    d = windows.shape[1]
    kk = codes.shape[1]
    total = 0.0
    for p in range(a, b):
        for q in range(c, e):
            if onehot[p] and onehot[q]:
                hits = 0
                for col in range(kk):
                    if codes[p, col] == codes[q, col]:
                        hits += 1
                motif = tab[hits]
            else:
                dot = 0.0
                for col in range(d):
                    dot += windows[p, col] * windows[q, col]
                motif = np.exp(alpha * (dot - k))
            total += motif * epos[p - a, q - c]
    return total


@njit
def _fill_epos(positions, a, b, c, e, pos_scale, epos):
    for p in range(a, b):
        for q in range(c, e):
            pdot = positions[p, 0] * positions[q, 0] + positions[p, 1] * positions[q, 1]
            epos[p - a, q - c] = np.exp(pos_scale * (pdot - 1.0))


@njit
def _motif_table(kk, alpha, k):
    tab = np.empty(kk + 1)
    for h in range(kk + 1):
        tab[h] = np.exp(alpha * (h - k))
    return tab


@njit
def _pam_sum_nb(windows, positions, codes, onehot, n1, alpha, k, pos_scale):
    # windows of both sequences stacked: rows [0, n1) and [n1, end)
    n2 = windows.shape[0] - n1
    epos = np.empty((n1, n2))
    _fill_epos(positions, 0, n1, n1, n1 + n2, pos_scale, epos)
    tab = _motif_table(codes.shape[1], alpha, k)
    return _pair_sum(windows, codes, onehot, 0, n1, n1, n1 + n2, epos, tab, alpha, k)


@njit
def _gram_tile_nb(windows, positions, offsets, codes, onehot, i0, i1, j0, j1, alpha, k,
                  pos_scale, out):
    # out is the (i1-i0, j1-j0) tile; entries below the diagonal are skipped.
    # Window positions depend only on the window count, so the position factors
    # are cached per pair of counts.
    maxp = 0
    for i in range(offsets.shape[0] - 1):
        maxp = max(maxp, offsets[i + 1] - offsets[i])
    epos = np.empty((maxp, maxp))
    tab = _motif_table(codes.shape[1], alpha, k)
    na_cached = -1
    nb_cached = -1
    for i in range(i0, i1):
        a, b = offsets[i], offsets[i + 1]
        for j in range(max(i, j0), j1):
            c, e = offsets[j], offsets[j + 1]
            if b - a != na_cached or e - c != nb_cached:
                _fill_epos(positions, a, b, c, e, pos_scale, epos)
                na_cached = b - a
                nb_cached = e - c
            out[i - i0, j - j0] = _pair_sum(windows, codes, onehot, a, b, c, e, epos, tab, alpha, k)


@njit
def _motif_function_nb(windows, positions, chis, ts, alpha, pos_scale):
    m = chis.shape[0]
    d = chis.shape[1]
    out = np.zeros(m)
    for s in range(m):
        acc = 0.0
        for p in range(windows.shape[0]):
            dist = 0.0
            for c in range(d):
                diff = chis[s, c] - windows[p, c]
                dist += diff * diff
            t0 = ts[s, 0] - positions[p, 0]
            t1 = ts[s, 1] - positions[p, 1]
            acc += np.exp(-alpha * dist - pos_scale * (t0 * t0 + t1 * t1))
        out[s] = acc
    return out


@njit
def _nearest_center_nb(points, centers):
    m = points.shape[0]
    n = centers.shape[0]
    d = points.shape[1]
    labels = np.empty(m, dtype=np.int64)
    dist2 = np.empty(m)
    for i in range(m):
        best = np.inf
        arg = 0
        for j in range(n):
            acc = 0.0
            for c in range(d):
                diff = points[i, c] - centers[j, c]
                acc += diff * diff
            if acc < best:  # strict: ties keep the lowest index
                best = acc
                arg = j
        labels[i] = arg
        dist2[i] = best
    return labels, dist2


# ---------------------------------------------------------------- numpy side

def _k0_matrix_np(am, ap, bm, bp, alpha, k, pos_scale):
    return np.exp(alpha * (am @ bm.T - k) + pos_scale * (ap @ bp.T - 1.0))


def _pam_sum_np(w1, q1, w2, q2, alpha, k, pos_scale):
    return float(_k0_matrix_np(w1, q1, w2, q2, alpha, k, pos_scale).sum())


def _gram_tile_np(windows, positions, offsets, i0, i1, j0, j1, alpha, k,
                  pos_scale, out):
    for i in range(i0, i1):
        a, b = offsets[i], offsets[i + 1]
        for j in range(max(i, j0), j1):
            c, e = offsets[j], offsets[j + 1]
            out[i - i0, j - j0] = _pam_sum_np(
                windows[a:b], positions[a:b], windows[c:e], positions[c:e],
                alpha, k, pos_scale)


def _motif_function_np(windows, positions, chis, ts, alpha, pos_scale, chunk=65536):
    out = np.empty(chis.shape[0])
    wsq = np.einsum("pd,pd->p", windows, windows)
    psq = np.einsum("pd,pd->p", positions, positions)
    for s in range(0, chis.shape[0], chunk):
        c = chis[s:s + chunk]
        t = ts[s:s + chunk]
        dist = np.einsum("sd,sd->s", c, c)[:, None] - 2.0 * c @ windows.T + wsq[None, :]
        tdist = np.einsum("sd,sd->s", t, t)[:, None] - 2.0 * t @ positions.T + psq[None, :]
        np.maximum(dist, 0.0, out=dist)
        np.maximum(tdist, 0.0, out=tdist)
        out[s:s + chunk] = np.exp(-alpha * dist - pos_scale * tdist).sum(axis=1)
    return out


def _nearest_center_np(points, centers):
    # accumulate exact squared differences column by column: same rounding as
    # the compiled loop, so both backends break distance ties identically
    d2 = np.zeros((points.shape[0], centers.shape[0]))
    for c in range(points.shape[1]):
        diff = points[:, c, None] - centers[None, :, c]
        d2 += diff * diff
    labels = np.argmin(d2, axis=1)  # argmin returns the first minimum
    return labels.astype(np.int64), d2[np.arange(points.shape[0]), labels]


# ------------------------------------------------------------------ dispatch

def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def k0_matrix(am, ap, bm, bp, alpha, k, pos_scale):
    """Matrix of K0 values between two sets of motif-position pairs."""
    args = (_f64(am), _f64(ap), _f64(bm), _f64(bp), float(alpha), float(k), float(pos_scale))
    if use_numba():
        return _k0_matrix_nb(*args)
    return _k0_matrix_np(*args)


def onehot_codes(windows, k):
    """Letter index per motif column, and whether every column of a window is one-hot."""
    windows = np.asarray(windows, dtype=np.float64)
    p, d = windows.shape
    cols = windows.reshape(p, k, d // k)
    codes = np.ascontiguousarray(cols.argmax(axis=2), dtype=np.int64)
    exact = (cols.max(axis=2) == 1.0) & (cols.sum(axis=2) == 1.0)
    return codes, np.ascontiguousarray(exact.all(axis=1))


def pam_sum(w1, q1, w2, q2, alpha, k, pos_scale):
    """Unscaled double sum of K0 over all window pairs of two sequences."""
    if use_numba():
        windows = _f64(np.concatenate([w1, w2]))
        codes, onehot = onehot_codes(windows, int(k))
        return float(_pam_sum_nb(windows, _f64(np.concatenate([q1, q2])), codes, onehot,
                                 len(w1), float(alpha), float(k), float(pos_scale)))
    return _pam_sum_np(_f64(w1), _f64(q1), _f64(w2), _f64(q2), float(alpha), float(k), float(pos_scale))


def gram_tile(windows, positions, offsets, i0, i1, j0, j1, alpha, k, pos_scale, codes=None):
    """Unscaled PAM sums for sequences ``i0..i1`` x ``j0..j1`` (upper triangle only).

    ``codes`` is the optional precomputed :func:`onehot_codes` pair for ``windows``.
    """
    out = np.zeros((i1 - i0, j1 - j0))
    windows = _f64(windows)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    rest = (int(i0), int(i1), int(j0), int(j1), float(alpha), float(k), float(pos_scale), out)
    if use_numba():
        codes, onehot = onehot_codes(windows, int(k)) if codes is None else codes
        _gram_tile_nb(windows, _f64(positions), offsets, codes, onehot, *rest)
    else:
        _gram_tile_np(windows, _f64(positions), offsets, *rest)
    return out


def motif_function(windows, positions, chis, ts, alpha, pos_scale):
    """Motif function of one sequence evaluated at many (chi, t) points."""
    chis = np.atleast_2d(_f64(chis))
    ts = np.atleast_2d(_f64(ts))
    args = (_f64(windows), _f64(positions), chis, ts, float(alpha), float(pos_scale))
    if use_numba():
        return _motif_function_nb(*args)
    return _motif_function_np(*args)


def nearest_center(points, centers):
    """Index of and squared distance to the closest center (lowest index on ties)."""
    if use_numba():
        return _nearest_center_nb(_f64(points), _f64(centers))
    return _nearest_center_np(_f64(points), _f64(centers))
