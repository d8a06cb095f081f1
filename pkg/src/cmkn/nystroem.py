"""Convolutional motif kernel layer: Nystroem projection onto learnable anchors.

The layer maps every motif-position pair ``y`` of an input to
``psi(y) = K_ZZ^{-1/2} K_Z(y)`` where ``K_ZZ`` is the K0 Gram matrix of the
anchors. Gradients with respect to the anchors include the derivative of the
inverse square root, computed from the eigendecomposition with divided
differences.
"""

from __future__ import annotations

import hashlib
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import StaleCacheError
from .kernel import KernelParams, k0_matrix
from .seqdata import make_rng

DEFAULT_EPSILON = 1e-6


# ------------------------------------------------------------ initialisation

def sample_pairs(ds, m, k, rng):
    """Draw ``m`` motif-position pairs uniformly over all valid windows.

    Returns ``(motifs, positions)`` arrays of shape ``(m, |A|k)`` and ``(m, 2)``.
    """
    if m < 1:
        raise ValueError("need at least one sample")
    seqs = [s for s in getattr(ds, "sequences", ds) if s.length >= k]
    if not seqs:
        raise ValueError(f"no sequence is at least k={k} long")
    rng = make_rng(rng)
    counts = np.array([s.num_windows(k) for s in seqs])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    flat = rng.integers(0, offsets[-1], size=m)
    seq_idx = np.searchsorted(offsets, flat, side="right") - 1
    win_idx = flat - offsets[seq_idx]
    motifs = np.empty((m, seqs[0].matrix.shape[0] * k))
    positions = np.empty((m, 2))
    for r, (si, wi) in enumerate(zip(seq_idx, win_idx)):
        s = seqs[si]
        motifs[r] = s.matrix[:, wi:wi + k].T.reshape(-1)
        angle = (wi + 1) * np.pi / s.length
        positions[r] = np.cos(angle), np.sin(angle)
    return motifs, positions


class KMeansResult(NamedTuple):
    centers: np.ndarray
    labels: np.ndarray
    inertia: list  # after every assignment step


def _dsquared_seeding(points, n, rng):
    m = points.shape[0]
    centers = np.empty((n, points.shape[1]))
    first = int(rng.integers(m))
    centers[0] = points[first]
    chosen = {first}
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    for c in range(1, n):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            remaining = np.array(sorted(set(range(m)) - chosen))
            idx = int(rng.choice(remaining)) if len(remaining) else int(rng.integers(m))
        chosen.add(idx)
        centers[c] = points[idx]
        np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1), out=d2)
    return centers


def kmeans_pp(points, n, rng, max_iter=100, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its current center.
    """
    points = np.asarray(points, dtype=float)
    if not 1 <= n <= points.shape[0]:
        raise ValueError(f"need 1 <= n <= {points.shape[0]}, got n={n}")
    rng = make_rng(rng)
    centers = _dsquared_seeding(points, n, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        labels, d2 = _kernels.nearest_center(points, centers)
        history.append(float(d2.sum()))
        new = np.zeros_like(centers)
        np.add.at(new, labels, points)
        sizes = np.bincount(labels, minlength=n)
        empty = np.flatnonzero(sizes == 0)
        nonempty = sizes > 0
        new[nonempty] /= sizes[nonempty, None]
        if len(empty):
            far = np.argsort(-d2, kind="stable")[:len(empty)]
            new[empty] = points[far]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol and not len(empty):
            break
    labels, d2 = _kernels.nearest_center(points, centers)
    history.append(float(d2.sum()))
    return KMeansResult(centers, labels, history)


def project_anchors(motifs, positions, alphabet_size):
    """Enforce nPFM and half-circle constraints on stacked anchors (returns copies)."""
    motifs = np.maximum(np.asarray(motifs, dtype=float), 0.0)
    n = motifs.shape[0]
    cols = motifs.reshape(n, -1, alphabet_size)  # (n, k, |A|): one row per motif column
    norms = np.linalg.norm(cols, axis=2, keepdims=True)
    uniform = np.full_like(cols, 1.0 / np.sqrt(alphabet_size))
    cols = np.where(norms > 0, cols / np.where(norms > 0, norms, 1.0), uniform)
    positions = np.array(positions, dtype=float)
    pnorm = np.linalg.norm(positions, axis=1, keepdims=True)
    positions = np.where(pnorm > 0, positions / np.where(pnorm > 0, pnorm, 1.0), [0.0, 1.0])
    positions[:, 1] = np.abs(positions[:, 1])
    return cols.reshape(n, -1), positions


def project_to_anchor(v, k, alphabet_size):
    """Project a concatenated ``[motif ; position]`` vector onto the anchor constraints."""
    v = np.asarray(v, dtype=float)
    d = alphabet_size * k
    if v.shape != (d + 2,):
        raise ValueError(f"expected a vector of length {d + 2}, got shape {v.shape}")
    motifs, positions = project_anchors(v[None, :d], v[None, d:], alphabet_size)
    return motifs[0], positions[0]


# ----------------------------------------------------- inverse square root

def _floor_values(lam, epsilon):
    return np.where(lam > epsilon, 1.0 / np.sqrt(np.where(lam > epsilon, lam, 1.0)), 0.0)


def inv_sqrt_psd(matrix, epsilon=0.0, return_eig=False):
    """Pseudo-inverse square root of a symmetric PSD matrix.

    Eigenvalues at or below ``epsilon`` are dropped.
    """
    matrix = np.asarray(matrix, dtype=float)
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("inv_sqrt_psd expects a square matrix")
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > 1e-10 * scale:
        raise ValueError("inv_sqrt_psd expects a symmetric matrix")
    lam, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    f = _floor_values(lam, epsilon)
    out = (vecs * f) @ vecs.T
    out = 0.5 * (out + out.T)
    if return_eig:
        return out, lam, vecs
    return out


def inv_sqrt_divided_differences(lam, epsilon):
    """Matrix of divided differences ``f[l_i, l_j]`` of ``f(l) = l^{-1/2}`` (floored)."""
    above = lam > epsilon
    safe = np.where(above, lam, 1.0)
    root = np.sqrt(safe)
    # f[a, b] = -1 / (sqrt(a) sqrt(b) (sqrt(a) + sqrt(b))); equals f'(a) on a == b
    both = -1.0 / (root[:, None] * root[None, :] * (root[:, None] + root[None, :]))
    f = _floor_values(lam, epsilon)
    diff = lam[:, None] - lam[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        mixed = np.where(diff != 0, (f[:, None] - f[None, :]) / diff, 0.0)
    mask = above[:, None] & above[None, :]
    return np.where(mask, both, np.where(above[:, None] | above[None, :], mixed, 0.0))


def inv_sqrt_backward(grad_out, lam, vecs, epsilon):
    """Adjoint of ``M -> M^{-1/2}`` at ``M = U diag(lam) U^T`` (Daleckii-Krein)."""
    inner = vecs.T @ grad_out @ vecs
    return vecs @ (inv_sqrt_divided_differences(lam, epsilon) * inner) @ vecs.T


# ------------------------------------------------------------------ anchors

class AnchorSet:
    """Learnable anchors plus the cached ``K_ZZ^{-1/2}``.

    ``epsilon`` is relative: eigenvalues below ``epsilon * max eigenvalue`` are
    dropped from the pseudo-inverse. Call :meth:`refresh` after modifying
    ``motifs`` or ``positions`` in place.
    """

    def __init__(self, motifs, positions, params, alphabet_size, epsilon=DEFAULT_EPSILON):
        self.motifs = np.array(motifs, dtype=float)
        self.positions = np.array(positions, dtype=float)
        self.params = params
        self.alphabet_size = int(alphabet_size)
        self.epsilon = float(epsilon)
        if self.motifs.ndim != 2 or self.motifs.shape[1] != self.alphabet_size * params.k:
            raise ValueError(f"anchor motifs must have shape (n, {self.alphabet_size * params.k})")
        if self.positions.shape != (self.motifs.shape[0], 2):
            raise ValueError("anchor positions must have shape (n, 2)")
        self.refresh()

    @property
    def n(self):
        return self.motifs.shape[0]

    def _fingerprint(self):
        h = hashlib.blake2b(digest_size=16)
        h.update(self.motifs.tobytes())
        h.update(self.positions.tobytes())
        return h.digest()

    def refresh(self):
        self.kzz = compute_kzz(self.motifs, self.positions, self.params)
        lam, vecs = np.linalg.eigh(self.kzz)
        self.floor = self.epsilon * max(float(lam[-1]), 0.0)
        self.eigvals, self.eigvecs = lam, vecs
        inv = (vecs * _floor_values(lam, self.floor)) @ vecs.T
        self.inv_sqrt = 0.5 * (inv + inv.T)
        self._stamp = self._fingerprint()

    def check_fresh(self):
        if self._fingerprint() != self._stamp:
            raise StaleCacheError("anchors changed since the inverse square root was cached; call refresh()")

    def project_(self):
        """Project motifs and positions onto their constraint sets in place, then refresh."""
        self.motifs[...], self.positions[...] = project_anchors(
            self.motifs, self.positions, self.alphabet_size)
        self.refresh()

    def copy(self):
        return AnchorSet(self.motifs, self.positions, self.params, self.alphabet_size, self.epsilon)

    def kzz_digest(self):
        return hashlib.sha256(np.round(self.kzz, 10).tobytes()).hexdigest()

    def to_dict(self):
        return {
            "motifs": self.motifs.tolist(),
            "positions": self.positions.tolist(),
            "epsilon": self.epsilon,
            "alphabet_size": self.alphabet_size,
            "kernel_params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, data, params=None):
        echoed = KernelParams.from_dict(data["kernel_params"])
        if params is not None and echoed != params:
            raise ValueError(f"anchor kernel params {echoed} disagree with model params {params}")
        return cls(data["motifs"], data["positions"], echoed, data["alphabet_size"], data["epsilon"])


def compute_kzz(motifs, positions, params):
    kzz = k0_matrix(motifs, positions, motifs, positions, params)
    return 0.5 * (kzz + kzz.T)


def init_anchors(ds, n, params, rng, m=None, min_ratio=10, max_iter=100, epsilon=DEFAULT_EPSILON):
    """Sample pairs, cluster them with k-means++, project the centers onto the constraints."""
    rng = make_rng(rng)
    m = max(min_ratio * n, 3000) if m is None else m
    if m < min_ratio * n:
        raise ValueError(f"m={m} samples is fewer than {min_ratio} x n={n} anchors")
    motifs, positions = sample_pairs(ds, m, params.k, rng)
    result = kmeans_pp(np.hstack([motifs, positions]), n, rng, max_iter=max_iter)
    d = motifs.shape[1]
    alphabet_size = d // params.k
    am, ap = project_anchors(result.centers[:, :d], result.centers[:, d:], alphabet_size)
    return AnchorSet(am, ap, params, alphabet_size, epsilon)


# -------------------------------------------------------------------- layer

class LayerCache(NamedTuple):
    windows: np.ndarray    # (B, P, D)
    positions: np.ndarray  # (B, P, 2) or (P, 2)
    kz: np.ndarray         # (B, n, P)


def _kz(windows, positions, anchors):
    b, p, d = windows.shape
    flat = windows.reshape(b * p, d)
    if positions.ndim == 2:
        pos = np.broadcast_to(positions, (b, p, 2)).reshape(b * p, 2)
    else:
        pos = positions.reshape(b * p, 2)
    kz = k0_matrix(anchors.motifs, anchors.positions, flat, pos, anchors.params)
    return kz.reshape(anchors.n, b, p).transpose(1, 0, 2)


def forward_batch(windows, positions, anchors):
    """Layer output for a batch of equally long inputs: ``(B, n, P)`` plus a cache."""
    anchors.check_fresh()
    windows = np.asarray(windows, dtype=float)
    positions = np.asarray(positions, dtype=float)
    kz = _kz(windows, positions, anchors)
    out = np.einsum("ij,bjp->bip", anchors.inv_sqrt, kz, optimize=True)
    return out, LayerCache(windows, positions, kz)


def layer_forward(x, anchors):
    """``psi`` for every valid window of one sequence: an ``(n, L-k+1)`` array."""
    k = anchors.params.k
    if x.length < k:
        raise ValueError(f"sequence {x.id!r} is shorter than k={k}")
    out, _ = forward_batch(x.windows(k)[None], x.window_positions(k), anchors)
    return out[0]


def layer_backward(cache, upstream, anchors, detach_inv_sqrt=False):
    """Gradients of a scalar loss with respect to anchor motifs and positions.

    ``upstream`` is the loss gradient with respect to the ``(B, n, P)`` layer
    output. Position gradients are unconstrained 2-vectors; projection back onto
    the half-circle happens in the optimizer.
    """
    params = anchors.params
    upstream = np.asarray(upstream, dtype=float)
    kz = cache.kz
    j = np.einsum("ij,bjp->bip", anchors.inv_sqrt, upstream, optimize=True)
    t = j * kz
    grad_m = params.alpha * np.einsum("bip,bpd->id", t, cache.windows, optimize=True)
    if cache.positions.ndim == 2:
        grad_p = params.pos_scale * (t.sum(axis=0) @ cache.positions)
    else:
        grad_p = params.pos_scale * np.einsum("bip,bpc->ic", t, cache.positions, optimize=True)
    if not detach_inv_sqrt:
        grad_r = np.einsum("bip,bjp->ij", upstream, kz, optimize=True)
        h = inv_sqrt_backward(grad_r, anchors.eigvals, anchors.eigvecs, anchors.floor)
        s = (h + h.T) * anchors.kzz
        grad_m += params.alpha * (s @ anchors.motifs)
        grad_p += params.pos_scale * (s @ anchors.positions)
    return grad_m, grad_p
