"""Position-aware motif (PAM) kernel: closed forms, Gram matrices, motif functions."""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import ConfigError
from .seqdata import CirclePoint


@dataclass(frozen=True)
class KernelParams:
    """Motif length ``k``, motif sharpness ``alpha``, position scale ``beta``,
    positional uncertainty ``sigma``."""

    k: int = 1
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"motif length k must be a positive integer, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        for name in ("alpha", "beta", "sigma"):
            value = float(getattr(self, name))
            if not value > 0 or not math.isfinite(value):
                raise ConfigError(f"{name} must be finite and > 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def pos_scale(self):
        """Coefficient ``beta / (2 sigma^2)`` of the position term."""
        return self.beta / (2.0 * self.sigma ** 2)

    def to_dict(self):
        return {"k": self.k, "alpha": self.alpha, "beta": self.beta, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in ("k", "alpha", "beta", "sigma")})


class MotifPositionPair(NamedTuple):
    motif: np.ndarray  # flattened nPFM, length |A|k
    position: CirclePoint


def default_beta(length):
    """Position scale that makes the circle kernel track the oligo Gaussian: ``L^2/10``."""
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    return length ** 2 / 10.0


def pam_constant(params):
    return math.sqrt(math.pi ** 2 * params.sigma ** 2 / (2.0 * params.alpha * params.beta))


def motif_function_constant(params, alphabet_size):
    """Exact value of the Gaussian integrals behind the motif-function inner product.

    Integrating over ``R^(|A|k) x R^2`` yields ``(pi/(2 alpha))^(|A|k/2) * pi sigma^2/beta``
    in front of the K0 double sum. This equals :func:`pam_constant` only when that
    constant is 1; for ``|A|k = 2`` it is exactly its square.
    """
    dim = alphabet_size * params.k
    return (math.pi / (2.0 * params.alpha)) ** (dim / 2.0) * (math.pi * params.sigma ** 2 / params.beta)


def k_position(pt, qt, params):
    return math.exp(params.pos_scale * (pt[0] * qt[0] + pt[1] * qt[1] - 1.0))


def k_npfm(w, v, params):
    return math.exp(params.alpha * (float(np.dot(w, v)) - params.k))


def k0(z, y, params):
    zm, zp = z
    ym, yp = y
    return math.exp(params.alpha * (float(np.dot(zm, ym)) - params.k)
                    + params.pos_scale * (zp[0] * yp[0] + zp[1] * yp[1] - 1.0))


def k0_matrix(motifs_a, positions_a, motifs_b, positions_b, params):
    """``K0`` between every row pair of two motif/position arrays."""
    return _kernels.k0_matrix(motifs_a, positions_a, motifs_b, positions_b,
                              params.alpha, params.k, params.pos_scale)


def _check_length(seq, k):
    if seq.length < k:
        raise ValueError(f"sequence {seq.id!r} of length {seq.length} is shorter than k={k}")


def k_pam(x, y, params):
    """PAM kernel value between two encoded sequences (valid windows only)."""
    k = params.k
    _check_length(x, k)
    _check_length(y, k)
    if x.matrix.shape[0] != y.matrix.shape[0]:
        raise ValueError("sequences were encoded over different alphabets")
    total = _kernels.pam_sum(x.windows(k), x.window_positions(k),
                             y.windows(k), y.window_positions(k),
                             params.alpha, k, params.pos_scale)
    return pam_constant(params) * total


def _stack_windows(sequences, k):
    for s in sequences:
        _check_length(s, k)
    windows = np.concatenate([s.windows(k) for s in sequences])
    positions = np.concatenate([s.window_positions(k) for s in sequences])
    offsets = np.concatenate([[0], np.cumsum([s.num_windows(k) for s in sequences])])
    return windows, positions, offsets


def gram(sequences, params, tile=32, threads=1):
    """Symmetric PAM Gram matrix. Upper-triangle tiles are computed and mirrored.

    Tiles write to disjoint blocks, so ``threads > 1`` gives identical results.
    """
    sequences = list(getattr(sequences, "sequences", sequences))
    n = len(sequences)
    windows, positions, offsets = _stack_windows(sequences, params.k)
    codes = _kernels.onehot_codes(windows, params.k)
    out = np.zeros((n, n))
    blocks = [(i0, min(i0 + tile, n), j0, min(j0 + tile, n))
              for i0 in range(0, n, tile) for j0 in range(i0, n, tile)]

    def work(block):
        i0, i1, j0, j1 = block
        return block, _kernels.gram_tile(windows, positions, offsets, i0, i1, j0, j1,
                                         params.alpha, params.k, params.pos_scale, codes)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]
    for (i0, i1, j0, j1), values in results:
        out[i0:i1, j0:j1] += values
    upper = np.triu(out)
    full = upper + np.triu(upper, 1).T
    return pam_constant(params) * full


def motif_function_eval(x, chi, t, params):
    """Motif function of ``x`` at motif ``chi`` and position vector ``t``.

    ``chi``/``t`` may be single vectors or stacked rows; the result has matching shape.
    """
    k = params.k
    _check_length(x, k)
    chi = np.asarray(chi, dtype=float)
    t = np.asarray(t, dtype=float)
    values = _kernels.motif_function(x.windows(k), x.window_positions(k),
                                     chi, t, params.alpha, params.pos_scale)
    return float(values[0]) if chi.ndim == 1 else values


def linearization_identity_check(a, b, k):
    """``(-||a-b||^2 / 2, a.b - k)``: equal for flattened nPFMs of length ``k``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a - b
    return -0.5 * float(diff @ diff), float(a @ b) - k


# ---------------------------------------------------------------- gram export

def format_gram_csv(matrix):
    """Row-major CSV with a leading ``n=<N>`` line."""
    out = io.StringIO()
    out.write(f"n={matrix.shape[0]}\n")
    for row in matrix:
        out.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return out.getvalue()


def parse_gram_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("n="):
        raise ValueError("gram CSV must start with an n=<N> line")
    n = int(lines[0][2:])
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    matrix = np.array(rows, dtype=float).reshape(n, n)
    return matrix


def format_gram_svm(matrix, labels=None):
    """Precomputed-kernel text format (``label 0:i 1:K_i1 ...``, 1-based indices)."""
    n = matrix.shape[0]
    labels = np.zeros(n, dtype=int) if labels is None else labels
    out = io.StringIO()
    for i in range(n):
        parts = [str(int(labels[i])), f"0:{i + 1}"]
        parts.extend(f"{j + 1}:{matrix[i, j]:.17g}" for j in range(n))
        out.write(" ".join(parts) + "\n")
    return out.getvalue()
