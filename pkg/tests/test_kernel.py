import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import k_npfm_ref, k_pam_ref, k_position_ref, mc_motif_inner_product

from cmkn import _accel, _kernels
from cmkn.errors import ConfigError
from cmkn.kernel import (
    KernelParams,
    default_beta,
    format_gram_csv,
    format_gram_svm,
    gram,
    k0,
    k0_matrix,
    k_npfm,
    k_pam,
    k_position,
    linearization_identity_check,
    motif_function_constant,
    motif_function_eval,
    pam_constant,
    parse_gram_csv,
)
from cmkn.seqdata import (
    Alphabet,
    build_npfm,
    encode_sequence,
    extract_window,
    map_position,
)

P = KernelParams(k=2, alpha=1.0, beta=30.0, sigma=2.0)


def rand_seq(rng, length, letters="ACGT"):
    return "".join(rng.choice(list(letters), size=length))


def rand_npfm(rng, a, k):
    m = rng.random((a, k)) * (rng.random((a, k)) > 0.3)
    m[rng.integers(a), :] += 0.1
    return (m / np.linalg.norm(m, axis=0)).T.reshape(-1)


# ---------------------------------------------------------------- params

@pytest.mark.parametrize("kw", [{"k": 0}, {"k": 1.5}, {"alpha": 0}, {"beta": -1}, {"sigma": float("nan")},
                                {"sigma": float("inf")}])
def test_params_validation(kw):
    with pytest.raises(ConfigError):
        KernelParams(**kw)


def test_params_round_trip():
    assert KernelParams.from_dict(P.to_dict()) == P


# --------------------------------------------------------- position kernel

def test_position_identical():
    pt = map_position(7, 30)
    assert k_position(pt, pt, P) == 1.0


def test_position_far_apart():
    length = 1000
    params = KernelParams(beta=50.0, sigma=3.0)
    value = k_position(map_position(1, length), map_position(length, length), params)
    expected = params.beta / (2 * params.sigma ** 2) * (math.cos(math.pi * (length - 1) / length) - 1)
    assert math.log(value) == pytest.approx(expected, rel=1e-12)
    assert math.log(value) == pytest.approx(-params.beta / params.sigma ** 2, rel=1e-4)


def test_position_monotone_decay():
    length = 60
    values = [k_position(map_position(1, length), map_position(1 + d, length), P) for d in range(length)]
    assert np.all(np.diff(values) < 0)


# ------------------------------------------------------------ motif kernel

def _flat(kmer):
    return encode_sequence(kmer).matrix.T.reshape(-1)


def test_npfm_identical():
    w = _flat("AC")
    assert k_npfm(w, w, P) == 1.0


def test_npfm_no_agreement():
    assert k_npfm(_flat("AC"), _flat("GT"), P) == pytest.approx(math.exp(-2), rel=1e-15)


def test_npfm_one_agreement():
    assert k_npfm(_flat("AC"), _flat("AG"), P) == pytest.approx(math.exp(-1), rel=1e-15)


# ----------------------------------------------------------------------- K0

def test_k0_self(rng):
    z = (rand_npfm(rng, 4, 2), map_position(3, 10))
    assert k0(z, z, P) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2 ** 31))
def test_k0_symmetric_and_factorises(seed):
    rng = np.random.default_rng(seed)
    params = KernelParams(k=3, alpha=float(rng.uniform(0.2, 3)), beta=float(rng.uniform(1, 500)),
                          sigma=float(rng.uniform(0.5, 8)))
    length = int(rng.integers(3, 200))
    z = (rand_npfm(rng, 4, 3), map_position(int(rng.integers(1, length + 1)), length))
    y = (rand_npfm(rng, 4, 3), map_position(int(rng.integers(1, length + 1)), length))
    a, b = k0(z, y, params), k0(y, z, params)
    assert a == pytest.approx(b, rel=1e-14)
    assert 0 < a <= 1
    assert a == pytest.approx(k_npfm(z[0], y[0], params) * k_position(z[1], y[1], params), rel=1e-14)


def test_k0_matrix_matches_scalar(rng):
    ma = np.array([rand_npfm(rng, 4, 2) for _ in range(3)])
    mb = np.array([rand_npfm(rng, 4, 2) for _ in range(4)])
    pa = np.array([map_position(p, 9) for p in (1, 4, 9)])
    pb = np.array([map_position(p, 9) for p in (2, 3, 5, 8)])
    mat = k0_matrix(ma, pa, mb, pb, P)
    for i in range(3):
        for j in range(4):
            assert mat[i, j] == pytest.approx(k0((ma[i], pa[i]), (mb[j], pb[j]), P), rel=1e-13)


# ---------------------------------------------------------------- constant

def test_pam_constant_cancels():
    assert pam_constant(KernelParams(alpha=1.0, beta=math.pi ** 2 / 2, sigma=1.0)) == pytest.approx(1.0, rel=1e-15)


def test_pam_constant_value():
    c = pam_constant(KernelParams(alpha=1.0, beta=1000.0, sigma=4.0))
    assert c == pytest.approx(math.sqrt(math.pi ** 2 * 16 / 2000), rel=1e-15)


def test_pam_constant_linear_in_sigma():
    base = pam_constant(KernelParams(alpha=2.0, beta=7.0, sigma=1.0))
    for s in (0.5, 3.0, 10.0):
        assert pam_constant(KernelParams(alpha=2.0, beta=7.0, sigma=s)) == pytest.approx(s * base, rel=1e-14)


def test_motif_function_constant_is_square_for_two_dims():
    params = KernelParams(k=1, alpha=0.7, beta=3.0, sigma=1.3)
    assert motif_function_constant(params, 2) == pytest.approx(pam_constant(params) ** 2, rel=1e-14)


# ------------------------------------------------------------------- k_pam

def test_k_pam_symmetric_positive(rng):
    x = encode_sequence(rand_seq(rng, 9))
    y = encode_sequence(rand_seq(rng, 11))
    assert k_pam(x, x, P) > 0
    assert k_pam(x, y, P) == pytest.approx(k_pam(y, x, P), rel=1e-13)


def test_k_pam_single_window():
    x, y = encode_sequence("AC"), encode_sequence("AG")
    expected = pam_constant(P) * k0((_flat("AC"), map_position(1, 2)), (_flat("AG"), map_position(1, 2)), P)
    assert k_pam(x, y, P) == pytest.approx(expected, rel=1e-14)


def test_k_pam_brute_force_length_eight(rng, backend):
    for _ in range(5):
        x = encode_sequence(rand_seq(rng, 8))
        y = encode_sequence(rand_seq(rng, 8))
        ref = k_pam_ref(x.matrix, y.matrix, 2, P.alpha, P.beta, P.sigma)
        assert k_pam(x, y, P) == pytest.approx(ref, rel=1e-12)


def test_k_pam_unequal_lengths_and_ambiguity(backend):
    x = encode_sequence("ANGTRA")
    y = encode_sequence("CCGTAGTN")
    params = KernelParams(k=3, alpha=0.5, beta=12.0, sigma=1.5)
    ref = k_pam_ref(x.matrix, y.matrix, 3, params.alpha, params.beta, params.sigma)
    assert k_pam(x, y, params) == pytest.approx(ref, rel=1e-12)


def test_k_pam_too_short():
    with pytest.raises(ValueError):
        k_pam(encode_sequence("A"), encode_sequence("ACG"), P)


# -------------------------------------------------------------------- gram

def test_gram_single():
    g = gram([encode_sequence("ACGTA")], P)
    assert g.shape == (1, 1) and g[0, 0] > 0


def test_gram_psd_symmetric_consistent(rng, backend):
    seqs = [encode_sequence(rand_seq(rng, int(rng.integers(4, 12)), "ACGTN")) for _ in range(10)]
    g = gram(seqs, P, tile=3)
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-8
    for i in range(10):
        for j in range(10):
            assert g[i, j] == pytest.approx(k_pam(seqs[i], seqs[j], P), rel=1e-12)


def test_gram_threads_and_tiles_identical(rng):
    seqs = [encode_sequence(rand_seq(rng, 15)) for _ in range(9)]
    base = gram(seqs, P, tile=4, threads=1)
    assert np.array_equal(base, gram(seqs, P, tile=4, threads=3))
    assert np.allclose(base, gram(seqs, P, tile=9), rtol=1e-14, atol=0)


def test_gram_csv_round_trip(rng):
    seqs = [encode_sequence(rand_seq(rng, 6)) for _ in range(3)]
    g = gram(seqs, P)
    text = format_gram_csv(g)
    assert text.startswith("n=3\n")
    assert np.array_equal(parse_gram_csv(text), g)


def test_gram_svm_indices_one_based():
    g = np.array([[1.0, 0.5], [0.5, 2.0]])
    lines = format_gram_svm(g, [1, 0]).splitlines()
    assert lines[0] == "1 0:1 1:1 2:0.5"
    assert lines[1] == "0 0:2 1:0.5 2:2"


# --------------------------------------------------------- motif functions

def test_motif_function_self_term():
    x = encode_sequence("ACG")
    params = KernelParams(k=3, alpha=1.0, beta=10.0, sigma=1.0)
    value = motif_function_eval(x, extract_window(x, 1, 3), map_position(1, 3), params)
    assert value == pytest.approx(1.0, rel=1e-14)
    y = encode_sequence("ACGTT")
    assert motif_function_eval(y, extract_window(y, 2, 3), map_position(2, 5), params) > 1.0


def test_motif_function_decays():
    x = encode_sequence("ACGT")
    params = KernelParams(k=2)
    assert motif_function_eval(x, np.full(8, 50.0), [0.0, 1.0], params) == 0.0


def test_motif_function_stacked_matches_single(rng, backend):
    x = encode_sequence(rand_seq(rng, 12))
    chis = rng.normal(size=(5, 8))
    ts = rng.normal(size=(5, 2))
    stacked = motif_function_eval(x, chis, ts, P)
    for i in range(5):
        assert stacked[i] == pytest.approx(motif_function_eval(x, chis[i], ts[i], P), rel=1e-12)
        direct = sum(math.exp(-P.alpha * np.sum((chis[i] - w) ** 2) - P.pos_scale * np.sum((ts[i] - q) ** 2))
                     for w, q in zip(x.windows(2), x.window_positions(2)))
        assert stacked[i] == pytest.approx(direct, rel=1e-12)


def test_integration_oracle_exact_constant():
    # importance-sampled integral agrees with the exact Gaussian-integral constant
    ab = Alphabet(("A", "B"), name="AB")
    rng = np.random.default_rng(3)
    params = KernelParams(k=1, alpha=0.8, beta=6.0, sigma=1.2)
    x = encode_sequence("ABBA", ab)
    y = encode_sequence("BBA", ab)
    est, se = mc_motif_inner_product(x, y, params, 400_000, rng)
    exact = motif_function_constant(params, 2) * k_pam(x, y, params) / pam_constant(params)
    assert abs(est - exact) <= 3 * se


# ----------------------------------------------------------- default beta

def test_default_beta_values():
    assert default_beta(99) == pytest.approx(980.1, rel=1e-15)
    assert default_beta(10) == 10.0


def test_default_beta_small_offset_exponent():
    length, sigma = 100, 4.0
    params = KernelParams(beta=default_beta(length), sigma=sigma)
    for d in range(1, 5):
        exponent = math.log(k_position(map_position(1, length), map_position(1 + d, length), params))
        taylor = -(math.pi ** 2 / 40) * d ** 2 / sigma ** 2
        # the quartic term of the cosine bounds the relative gap by (pi d / L)^2 / 12
        assert exponent == pytest.approx(taylor, rel=(math.pi * d / length) ** 2 / 12)


# ---------------------------------------------------------- linearization

def test_linearization_equal():
    a = _flat("ACG")
    assert linearization_identity_check(a, a, 3) == (0.0, 0.0)


def test_linearization_orthogonal():
    assert linearization_identity_check(_flat("AAA"), _flat("CCC"), 3) == (-3.0, -3.0)


@given(st.integers(0, 2 ** 31))
def test_linearization_random_protein(seed):
    rng = np.random.default_rng(seed)
    lhs, rhs = linearization_identity_check(rand_npfm(rng, 20, 4), rand_npfm(rng, 20, 4), 4)
    assert abs(lhs - rhs) <= 1e-10


def test_linearization_from_npfm_builder():
    a = build_npfm(["ACGT", "ACGA", "TCGA"]).flat
    b = build_npfm(["GGGT"]).flat
    lhs, rhs = linearization_identity_check(a, b, 4)
    assert lhs == pytest.approx(rhs, abs=1e-10)


# ---------------------------------------------------------- backend parity

@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree_on_kernels(rng):
    seqs = [encode_sequence(rand_seq(rng, int(rng.integers(5, 14)), "ACGTNR")) for _ in range(7)]
    windows = np.concatenate([s.windows(3) for s in seqs])
    positions = np.concatenate([s.window_positions(3) for s in seqs])
    offsets = np.concatenate([[0], np.cumsum([s.num_windows(3) for s in seqs])])
    anchors = np.array([rand_npfm(rng, 4, 3) for _ in range(6)])
    apos = np.array([map_position(int(p), 20) for p in rng.integers(1, 21, size=6)])
    chis = rng.normal(size=(40, 12))
    ts = rng.normal(size=(40, 2))
    pts = rng.random((300, 5))
    cen = rng.random((7, 5))
    results = {}
    for name in ("numpy", "numba"):
        prev = _accel.set_backend(name)
        try:
            results[name] = (
                _kernels.k0_matrix(anchors, apos, windows, positions, 0.7, 3, 4.0),
                _kernels.gram_tile(windows, positions, offsets, 0, 7, 0, 7, 0.7, 3, 4.0),
                _kernels.pam_sum(seqs[0].windows(3), seqs[0].window_positions(3),
                                 seqs[1].windows(3), seqs[1].window_positions(3), 0.7, 3, 4.0),
                _kernels.motif_function(windows, positions, chis, ts, 0.7, 4.0),
                _kernels.nearest_center(pts, cen),
            )
        finally:
            _accel.set_backend(prev)
    a, b = results["numpy"], results["numba"]
    for i in range(4):
        assert np.allclose(a[i], b[i], rtol=1e-12, atol=0)
    assert np.array_equal(a[4][0], b[4][0])
    assert np.array_equal(a[4][1], b[4][1])


def test_nearest_center_ties_lowest_index(backend):
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    cen = np.array([[0.5, 0.0], [0.5, 0.0], [-0.5, 0.0]])
    labels, d2 = _kernels.nearest_center(pts, cen)
    assert labels.tolist() == [0, 0]
    assert np.allclose(d2, 0.25)


@given(st.integers(1, 300), st.integers(1, 300), st.floats(0.5, 2000), st.floats(0.3, 20))
def test_position_matches_reference(p, q, beta, sigma):
    length = max(p, q)
    params = KernelParams(beta=beta, sigma=sigma)
    assert k_position(map_position(p, length), map_position(q, length), params) == pytest.approx(
        k_position_ref(p, q, length, beta, sigma), rel=1e-12, abs=1e-300)


@given(st.integers(0, 2 ** 31), st.floats(0.1, 5))
def test_npfm_matches_reference(seed, alpha):
    rng = np.random.default_rng(seed)
    w, v = rand_npfm(rng, 4, 3), rand_npfm(rng, 4, 3)
    params = KernelParams(k=3, alpha=alpha)
    assert k_npfm(w, v, params) == pytest.approx(k_npfm_ref(w, v, alpha, 3), rel=1e-12)
