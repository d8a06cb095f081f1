import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import central_difference, rel_error
from scipy import stats

from cmkn.errors import StaleCacheError
from cmkn.kernel import KernelParams, k0_matrix
from cmkn.nystroem import (
    AnchorSet,
    compute_kzz,
    forward_batch,
    init_anchors,
    inv_sqrt_psd,
    kmeans_pp,
    layer_backward,
    layer_forward,
    project_anchors,
    project_to_anchor,
    sample_pairs,
)
from cmkn.seqdata import LabeledDataset, encode_sequence, map_position

PARAMS = KernelParams(k=2, alpha=1.0, beta=20.0, sigma=2.0)


def random_anchors(rng, n, a=4, k=2, params=PARAMS, epsilon=1e-6):
    motifs = rng.random((n, a * k))
    angles = rng.uniform(0, np.pi, size=n)
    m, p = project_anchors(motifs, np.c_[np.cos(angles), np.sin(angles)], a)
    return AnchorSet(m, p, params, a, epsilon)


def random_batch(rng, b, p, a=4, k=2):
    windows = rng.random((b, p, a * k))
    angles = np.arange(1, p + 1) * np.pi / (p + k - 1)
    return windows, np.c_[np.cos(angles), np.sin(angles)]


def dataset(seqs):
    return LabeledDataset([encode_sequence(s, id=str(i), label=i % 2) for i, s in enumerate(seqs)])


# ---------------------------------------------------------------- sampling

def test_sample_single_sequence_single_pair(rng):
    x = encode_sequence("ACGTTG")
    motifs, positions = sample_pairs(dataset(["ACGTTG"]), 1, 3, rng)
    windows = [x.windows(3)[i] for i in range(4)]
    hits = [i for i, w in enumerate(windows) if np.array_equal(w, motifs[0])]
    assert hits
    assert any(np.allclose(positions[0], map_position(i + 1, 6)) for i in hits)


def test_sample_pairs_uniform_over_windows():
    # windows from both sequences together should be hit uniformly
    ds = dataset(["AAAAAA", "CCCCCCCCCC"])
    motifs, positions = sample_pairs(ds, 14000, 2, np.random.default_rng(5))
    angles = np.round(np.arctan2(positions[:, 1], positions[:, 0]), 9)
    is_a = motifs[:, 0] > 0
    keys = [(bool(s), float(t)) for s, t in zip(is_a, angles)]
    _, counts = np.unique(np.array(keys, dtype=float), axis=0, return_counts=True)
    assert len(counts) == 5 + 9
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sample_pairs_rejects_short():
    with pytest.raises(ValueError):
        sample_pairs(dataset(["AC"]), 3, 5, 0)


# ----------------------------------------------------------------- k-means

def test_kmeans_n_equals_m(rng):
    pts = rng.normal(size=(6, 3))
    res = kmeans_pp(pts, 6, rng)
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, pts))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(2)
    sigma = 0.3
    a = rng.normal([0, 0], sigma, size=(200, 2))
    b = rng.normal([10, 5], sigma, size=(200, 2))
    centers = kmeans_pp(np.vstack([a, b]), 2, rng).centers
    centers = centers[np.argsort(centers[:, 0])]
    assert np.linalg.norm(centers[0] - [0, 0]) < 3 * sigma
    assert np.linalg.norm(centers[1] - [10, 5]) < 3 * sigma


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_kmeans_inertia_non_increasing(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 3))
    res = kmeans_pp(pts, n, rng)
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia, res.inertia[1:]))
    assert res.centers.shape == (n, 3)


def test_kmeans_duplicate_points(rng):
    pts = np.zeros((10, 2))
    pts[5:] = 1.0
    res = kmeans_pp(pts, 4, rng)
    assert np.isfinite(res.centers).all()
    assert res.inertia[-1] == 0.0


def test_kmeans_bad_n():
    with pytest.raises(ValueError):
        kmeans_pp(np.zeros((3, 2)), 4, 0)


# -------------------------------------------------------------- projection

def test_project_motif_column():
    m, _ = project_to_anchor(np.array([-1.0, 2.0, 0.0, 0.0, 0.6, 0.8]), 1, 4)
    assert np.array_equal(m, [0.0, 1.0, 0.0, 0.0])


def test_project_position_reflects():
    _, p = project_to_anchor(np.array([1.0, 0.0, 0.0, 0.0, 3.0, -4.0]), 1, 4)
    assert np.allclose(p, [0.6, 0.8], atol=1e-15)


def test_project_zero_parts():
    m, p = project_to_anchor(np.array([-1.0, -2.0, 0.0, 0.0, 0.0, 0.0]), 1, 4)
    assert np.allclose(m, 0.5)
    assert np.array_equal(p, [0.0, 1.0])


def test_project_wrong_length():
    with pytest.raises(ValueError):
        project_to_anchor(np.zeros(5), 1, 4)


@given(st.integers(0, 2 ** 31))
def test_projection_idempotent_and_valid(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=4 * 3 + 2)
    m, p = project_to_anchor(v, 3, 4)
    cols = m.reshape(3, 4)
    assert (cols >= 0).all()
    assert np.allclose(np.linalg.norm(cols, axis=1), 1.0, atol=1e-12)
    assert abs(np.linalg.norm(p) - 1.0) < 1e-12 and p[1] >= 0
    m2, p2 = project_to_anchor(np.concatenate([m, p]), 3, 4)
    assert np.allclose(m2, m, atol=1e-12) and np.allclose(p2, p, atol=1e-12)


# ---------------------------------------------------------------- kzz / R

def test_kzz_identical_anchors():
    m = np.tile(np.array([0.0, 1.0, 0.0, 0.0]), (2, 2))
    pos = np.tile(map_position(3, 10), (2, 1))
    assert np.allclose(compute_kzz(m, pos, PARAMS), 1.0, atol=1e-15)


@given(st.integers(0, 2 ** 31))
def test_kzz_psd(seed):
    a = random_anchors(np.random.default_rng(seed), 7)
    assert np.array_equal(a.kzz, a.kzz.T)
    assert np.linalg.eigvalsh(a.kzz).min() >= -1e-10


def test_inv_sqrt_identity():
    assert np.allclose(inv_sqrt_psd(np.eye(3)), np.eye(3), atol=1e-15)


def test_inv_sqrt_diag():
    assert np.allclose(inv_sqrt_psd(np.diag([4.0, 9.0])), np.diag([0.5, 1 / 3]), atol=1e-15)


@given(st.integers(0, 2 ** 31))
def test_inv_sqrt_reconstruction(seed):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(5, 5))
    m = b @ b.T + np.eye(5)
    r = inv_sqrt_psd(m, 0.0)
    assert np.allclose(r @ m @ r, np.eye(5), atol=1e-8)


def test_inv_sqrt_floor_gives_projector():
    m = np.diag([1.0, 1e-9, 4.0])
    r = inv_sqrt_psd(m, 1e-6)
    assert np.allclose(r @ m @ r, np.diag([1.0, 0.0, 1.0]), atol=1e-12)


def test_inv_sqrt_rejects_asymmetric():
    with pytest.raises(ValueError):
        inv_sqrt_psd(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_anchorset_invariants(rng):
    a = random_anchors(rng, 6)
    r = a.inv_sqrt
    assert np.array_equal(r, r.T)
    keep = a.eigvals > a.floor
    proj = (a.eigvecs[:, keep]) @ a.eigvecs[:, keep].T
    assert np.allclose(r @ a.kzz @ r, proj, atol=1e-8)
    assert a.floor == pytest.approx(1e-6 * a.eigvals[-1])


# ------------------------------------------------------------------- layer

def test_nystroem_reproduces_kernel_on_anchors(rng):
    a = random_anchors(rng, 6)
    out, _ = forward_batch(a.motifs[None], a.positions, a)
    psi = out[0]  # (n, n): column j is psi(z_j)
    assert np.allclose(psi.T @ psi, a.kzz, atol=1e-8)
    # anchor z_i against an arbitrary pair
    w, q = rng.random((1, 8)), np.array([map_position(4, 11)])
    other, _ = forward_batch(w[None], q, a)
    assert np.allclose(psi.T @ other[0], k0_matrix(a.motifs, a.positions, w, q, PARAMS), atol=1e-8)


@given(st.integers(0, 2 ** 31))
def test_nystroem_contracts(seed):
    rng = np.random.default_rng(seed)
    a = random_anchors(rng, 5)
    x = encode_sequence("".join(rng.choice(list("ACGT"), size=12)))
    psi = layer_forward(x, a)
    assert psi.shape == (5, 11)
    assert (np.sum(psi ** 2, axis=0) <= 1 + 1e-8).all()


def test_stale_cache(rng):
    a = random_anchors(rng, 3)
    a.motifs[0, 0] += 0.1
    with pytest.raises(StaleCacheError):
        layer_forward(encode_sequence("ACGTA"), a)
    a.refresh()
    layer_forward(encode_sequence("ACGTA"), a)


def test_layer_too_short(rng):
    with pytest.raises(ValueError):
        layer_forward(encode_sequence("A"), random_anchors(rng, 2))


def test_init_single_anchor():
    ds = dataset(["ACGTACGT", "TTGACAGG"])
    rng = np.random.default_rng(0)
    a = init_anchors(ds, 1, PARAMS, rng, m=50, min_ratio=10)
    rng = np.random.default_rng(0)
    m, p = sample_pairs(ds, 50, 2, rng)
    em, ep = project_anchors(m.mean(axis=0)[None], p.mean(axis=0)[None], 4)
    assert np.allclose(a.motifs, em, atol=1e-12)
    assert np.allclose(a.positions, ep, atol=1e-12)


def test_init_needs_enough_samples():
    with pytest.raises(ValueError):
        init_anchors(dataset(["ACGTACGT"]), 10, PARAMS, 0, m=20)


def test_anchorset_round_trip(rng):
    a = random_anchors(rng, 4)
    b = AnchorSet.from_dict(a.to_dict(), PARAMS)
    assert np.array_equal(a.motifs, b.motifs) and np.array_equal(a.inv_sqrt, b.inv_sqrt)
    assert a.kzz_digest() == b.kzz_digest()
    with pytest.raises(ValueError):
        AnchorSet.from_dict(a.to_dict(), KernelParams(k=2, sigma=3.0))


# --------------------------------------------------------------- gradients

def _check_gradient(seed, detach):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    k = int(rng.integers(1, 4))
    params = KernelParams(k=k, alpha=float(rng.uniform(0.3, 1.5)), beta=float(rng.uniform(2, 30)),
                          sigma=float(rng.uniform(1, 3)))
    a = random_anchors(rng, n, 4, k, params)
    windows, positions = random_batch(rng, 2, 5, 4, k)
    upstream = rng.normal(size=(2, n, 5))
    _, cache = forward_batch(windows, positions, a)
    gm, gp = layer_backward(cache, upstream, a, detach_inv_sqrt=detach)
    fixed_r = a.inv_sqrt.copy()
    motifs, pos = a.motifs.copy(), a.positions.copy()

    def loss():
        b = AnchorSet(motifs, pos, params, 4, a.epsilon)
        if detach:
            kz = np.einsum("ijp->jip", k0_matrix(motifs, pos, windows.reshape(-1, 4 * k),
                                                 np.tile(positions, (2, 1)), params).reshape(n, 2, 5))
            return float(np.sum(upstream * np.einsum("ij,bjp->bip", fixed_r, kz)))
        return float(np.sum(upstream * forward_batch(windows, positions, b)[0]))

    fm = central_difference(loss, motifs, 1e-5)
    fp = central_difference(loss, pos, 1e-5)
    return rel_error(gm, fm), rel_error(gp, fp)


@pytest.mark.parametrize("seed", range(12))
def test_layer_gradient_finite_difference(seed):
    em, ep = _check_gradient(seed, detach=False)
    assert em < 1e-5 and ep < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_layer_gradient_detached(seed):
    em, ep = _check_gradient(100 + seed, detach=True)
    assert em < 1e-5 and ep < 1e-5


def test_zero_upstream(rng):
    a = random_anchors(rng, 4)
    windows, positions = random_batch(rng, 3, 6)
    _, cache = forward_batch(windows, positions, a)
    gm, gp = layer_backward(cache, np.zeros((3, 4, 6)), a)
    assert not gm.any() and not gp.any()


def test_per_sample_positions_match_shared(rng):
    a = random_anchors(rng, 4)
    windows, positions = random_batch(rng, 3, 6)
    up = rng.normal(size=(3, 4, 6))
    out1, c1 = forward_batch(windows, positions, a)
    out2, c2 = forward_batch(windows, np.broadcast_to(positions, (3, 6, 2)).copy(), a)
    assert np.allclose(out1, out2, rtol=1e-14)
    for g1, g2 in zip(layer_backward(c1, up, a), layer_backward(c2, up, a)):
        assert np.allclose(g1, g2, rtol=1e-12)
