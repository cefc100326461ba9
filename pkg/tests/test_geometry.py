import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bregman_lens import geometry as geo
from bregman_lens.errors import ContractError, DimensionError, ValidationError


def fd_hessian(f, x, h=1e-4):
    n = x.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            e_i = np.eye(n)[i] * h
            e_j = np.eye(n)[j] * h
            H[i, j] = (f(x + e_i + e_j) - f(x + e_i - e_j) - f(x - e_i + e_j) + f(x - e_i - e_j)) / (4 * h * h)
    return H


def fd_gradient(f, x, h=1e-6):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])


def random_family(rng, V=None, d=None, scale=1.0):
    V = V or int(rng.integers(2, 33))
    d = d or int(rng.integers(1, 9))
    return geo.SoftmaxFamily(rng.normal(size=(V, d)) * scale), rng.normal(size=d)


def test_log_normalizer_examples():
    fam = geo.SoftmaxFamily(np.zeros((5, 3)))
    assert math.isclose(geo.log_normalizer(fam, np.array([1.0, -2.0, 3.0])), math.log(5), abs_tol=1e-15)
    fam = geo.SoftmaxFamily(np.array([[1.0], [-1.0]]))
    assert math.isclose(geo.log_normalizer(fam, np.zeros(1)), math.log(2), abs_tol=1e-15)
    # direct evaluation of log(e + 1/e)
    assert math.isclose(geo.log_normalizer(fam, np.ones(1)), math.log(math.e + 1 / math.e), rel_tol=1e-14)
    assert abs(geo.log_normalizer(fam, np.ones(1)) - 1.12693) < 1e-5
    with pytest.raises(DimensionError):
        geo.log_normalizer(fam, np.zeros(2))


def test_family_validation():
    with pytest.raises(ValidationError):
        geo.SoftmaxFamily(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        geo.SoftmaxFamily(np.array([[np.nan], [0.0]]))


def test_dual_coords_examples():
    V = 6
    fam = geo.SoftmaxFamily(np.eye(V))
    assert np.allclose(geo.dual_coords(fam, np.zeros(V)), 1 / V, atol=1e-15)
    gamma = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    fam = geo.SoftmaxFamily(gamma)
    lam = np.array([50.0, 0.0])  # logit gap 50 for token 0
    assert np.abs(geo.dual_coords(fam, lam) - gamma[0]).max() < 1e-6
    rng = np.random.default_rng(0)
    fam, lam = random_family(rng, 8, 3)
    z = fam.embedding @ lam
    p = np.exp(z) / np.exp(z).sum()
    oracle = sum(p[y] * fam.embedding[y] for y in range(8))
    assert np.abs(geo.dual_coords(fam, lam) - oracle).max() < 1e-12


def test_hessian_closed_form_uniform():
    V = 5
    fam = geo.SoftmaxFamily(np.eye(V))
    h = geo.hessian(fam, np.zeros(V), top_k=V)
    expected = np.eye(V) / V - np.ones((V, V)) / V**2
    assert np.allclose(h.matrix, expected, atol=1e-15)
    assert math.isclose(np.trace(h.matrix), (V - 1) / V, abs_tol=1e-15)


def test_hessian_point_mass_is_zero():
    gamma = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    h = geo.hessian(geo.SoftmaxFamily(gamma), np.array([50.0, 0.0]), top_k=3)
    assert np.trace(h.matrix) < 1e-20


@pytest.mark.parametrize("seed", range(5))
def test_hessian_matches_fd_of_log_normalizer(seed):
    rng = np.random.default_rng(seed)
    fam, lam = random_family(rng, 16, 4)
    h = geo.hessian(fam, lam, top_k=16).matrix
    ref = fd_hessian(lambda x: geo.log_normalizer(fam, x), lam)
    assert np.linalg.norm(h - ref) / np.linalg.norm(ref) < 1e-4


def test_hessian_top_k_contract():
    fam = geo.SoftmaxFamily(np.eye(4))
    with pytest.raises(ContractError):
        geo.hessian(fam, np.zeros(4), top_k=1)
    with pytest.raises(ContractError):
        geo.hessian(fam, np.zeros(4), top_k=5)


def test_hessian_top_k_renormalizes_over_most_probable():
    rng = np.random.default_rng(1)
    fam, lam = random_family(rng, 12, 3)
    p = geo.probs(fam, lam)
    keep = np.sort(np.argsort(-p)[:5])
    q = p[keep] / p[keep].sum()
    g = fam.embedding[keep]
    eta = q @ g
    oracle = sum(q[i] * np.outer(g[i], g[i]) for i in range(5)) - np.outer(eta, eta)
    assert np.allclose(geo.hessian(fam, lam, top_k=5).matrix, oracle, atol=1e-13)


def test_aggregate_examples():
    a = geo.HessianEstimate(np.diag([1.0, 0.0]), layer=1, model_id="m")
    b = geo.HessianEstimate(np.diag([0.0, 1.0]), layer=1, model_id="m")
    assert np.array_equal(geo.aggregate_hessian([a]).matrix, a.matrix)
    assert np.array_equal(geo.aggregate_hessian([a, a]).matrix, a.matrix)
    agg = geo.aggregate_hessian([a, b])
    assert np.array_equal(agg.matrix, np.diag([0.5, 0.5]))
    assert agg.n_contexts == 2
    with pytest.raises(ContractError):
        geo.aggregate_hessian([])
    with pytest.raises(ValidationError):
        geo.aggregate_hessian([a, geo.HessianEstimate(np.eye(2), layer=2, model_id="m")])


def test_aggregate_order_insensitive():
    rng = np.random.default_rng(2)
    ests = [geo.HessianEstimate(np.cov(rng.normal(size=(4, 30)))) for _ in range(37)]
    a = geo.aggregate_hessian(ests).matrix
    b = geo.aggregate_hessian(ests[::-1]).matrix
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_effective_rank_examples():
    assert math.isclose(geo.effective_rank([1, 1, 1, 1]), 4.0, rel_tol=1e-14)
    assert geo.effective_rank([1, 0, 0, 0]) == 1.0
    # direct entropy: H = -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.5 ln 2
    assert math.isclose(geo.effective_rank([0.5, 0.25, 0.25]), math.exp(1.5 * math.log(2)), rel_tol=1e-14)
    assert abs(geo.effective_rank([0.5, 0.25, 0.25]) - 2.8284) < 1e-4
    assert geo.effective_rank([0.0, 0.0]) == 0.0


@given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_effective_rank_scale_invariant(spec, c):
    spec = np.array(spec)
    if spec.sum() <= 0:
        return
    assert abs(geo.effective_rank(c * spec) - geo.effective_rank(spec)) <= 1e-12 * geo.effective_rank(spec)


def test_condition_number_examples():
    assert geo.condition_number([5, 5, 5]) == 1.0
    assert geo.condition_number([10, 1e-20]) == 1.0
    assert geo.retained_rank([10, 1e-20]) == 1
    assert geo.condition_number([4, 2, 1]) == 4.0
    assert math.isnan(geo.condition_number([0.0, 0.0]))


def test_summarize_uniform_orthonormal():
    fam = geo.SoftmaxFamily(np.eye(4))
    s = geo.summarize(geo.hessian(fam, np.zeros(4), 4))
    assert abs(s.effective_rank - 3) < 1e-6
    assert abs(s.trace - 0.75) < 1e-12
    assert abs(s.condition_number - 1.0) < 1e-12
    assert s.retained_rank == 3 and s.rank_deficient


def test_summarize_zero_matrix():
    s = geo.summarize(np.zeros((3, 3)))
    assert s.trace_collapse and s.trace == 0.0 and s.effective_rank == 0.0
    assert not s.condition_defined


def test_mean_of_summaries_mode():
    rng = np.random.default_rng(3)
    fam, _ = random_family(rng, 10, 3)
    sums = [geo.summarize(geo.hessian(fam, rng.normal(size=3), 10)) for _ in range(4)]
    m = geo.mean_of_summaries(sums)
    assert math.isclose(m["trace"], np.mean([s.trace for s in sums]))


# ---- properties ------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gradient_of_log_normalizer_is_dual_coords(seed):
    rng = np.random.default_rng(seed)
    fam, lam = random_family(rng)
    g = fd_gradient(lambda x: geo.log_normalizer(fam, x), lam)
    assert np.abs(g - geo.dual_coords(fam, lam)).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_first_order_dual_map(seed):
    rng = np.random.default_rng(seed)
    fam, lam = random_family(rng, 16, 4)
    u = rng.normal(size=4)
    u /= np.linalg.norm(u)
    eta0 = geo.dual_coords(fam, lam)
    h = geo.hessian(fam, lam, 16).matrix
    ratios = []
    for eps in (1e-2, 1e-3, 1e-4):
        r = geo.dual_coords(fam, lam + eps * u) - eta0 - eps * h @ u
        ratios.append(np.linalg.norm(r) / eps**2)
    bound = 10 * max(ratios[0], 1e-6)
    assert all(r <= bound for r in ratios)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_hessian_psd_and_trace_identity(seed):
    rng = np.random.default_rng(seed)
    fam, lam = random_family(rng, scale=float(rng.uniform(0.1, 3)))
    h = geo.hessian(fam, lam, fam.vocab_size).matrix
    assert np.array_equal(h, h.T)
    tr = np.trace(h)
    assert np.linalg.eigvalsh(h).min() >= -1e-8 * max(tr, 1e-300)
    # identity evaluated in extended precision; in float64 it cancels badly
    g = fam.embedding.astype(np.longdouble)
    z = g @ lam.astype(np.longdouble)
    p = np.exp(z - z.max())
    p /= p.sum()
    eta = p @ g
    ident = float(p @ (g**2).sum(axis=1) - eta @ eta)
    assert abs(tr - ident) <= 1e-10 * max(abs(ident), 1e-300) + 1e-15
    assert tr <= (fam.embedding**2).sum(axis=1).max() * (1 + 1e-12)
