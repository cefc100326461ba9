import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bregman_lens import geometry as geo
from bregman_lens import model as m
from bregman_lens import steering as s
from bregman_lens.errors import ContractError, DegenerateConceptError, ValidationError


def cross_polytope(d):
    """gamma = +-e_i: H is diagonal everywhere along a coordinate axis."""
    return geo.SoftmaxFamily(np.vstack([np.eye(d), -np.eye(d)]))


# ---- concepts ----------------------------------------------------------------


def test_embedding_diff_single_pair():
    gamma = np.random.default_rng(0).normal(size=(6, 3))
    fam = geo.SoftmaxFamily(gamma)
    c = s.build_concept(fam, None, s.ConceptSpec((2,), (5,), mode="embedding_diff"), layer=0)
    diff = gamma[2] - gamma[5]
    assert np.allclose(c.v, diff / np.linalg.norm(diff), atol=1e-15)
    assert abs(np.linalg.norm(c.v) - 1) < 1e-12
    assert c.target == (2,)


def test_concept_spec_validation():
    with pytest.raises(ValidationError):
        s.ConceptSpec((), (1,), mode="embedding_diff").validate()
    with pytest.raises(ValidationError):
        s.ConceptSpec((1,), (2,), prompts=((np.arange(3), "a"),)).validate()


def test_identical_poles_are_degenerate():
    cfg = m.ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=256, context_length=32)
    state = m.init(cfg)
    fam = geo.SoftmaxFamily(state.embedding)
    toks = np.frombuffer(b"hello there", dtype=np.uint8).astype(int)
    spec = s.ConceptSpec((65,), (97,), prompts=((toks, "a"), (toks, "b")))
    with pytest.raises(DegenerateConceptError):
        s.build_concept(fam, state, spec, 1)
    fam2 = geo.SoftmaxFamily(np.ones((4, 2)))
    with pytest.raises(DegenerateConceptError):
        s.build_concept(fam2, None, s.ConceptSpec((0,), (1,), mode="embedding_diff"), 0)


def test_activation_diff_matches_brute_force_means():
    cfg = m.ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=256, context_length=64)
    state = m.init(cfg)
    fam = geo.SoftmaxFamily(state.embedding)
    spec = s.capitalization_concept(n_prompts=10)
    c = s.build_concept(fam, state, spec, 1)
    a = np.mean([m.forward(state, t[-64:]).lam[1, -1] for t, lab in spec.prompts if lab == "a"], axis=0)
    b = np.mean([m.forward(state, t[-64:]).lam[1, -1] for t, lab in spec.prompts if lab == "b"], axis=0)
    assert c.v @ (a - b) > 0
    assert np.allclose(c.v, (a - b) / np.linalg.norm(a - b), atol=1e-12)


@pytest.mark.parametrize("name", list(s.CONCEPTS))
def test_default_concepts_valid(name):
    spec = s.CONCEPTS[name]().validate()
    assert set(spec.pole_a).isdisjoint(spec.pole_b)
    labels = [lab for _, lab in spec.prompts]
    assert labels.count("a") == labels.count("b")


# ---- steps -------------------------------------------------------------------


def test_euclidean_step_examples():
    lam = np.array([0.3, -1.0, 2.0])
    v = np.array([0.0, 0.6, 0.8])
    assert np.array_equal(s.euclidean_step(lam, v, 0.0), lam)
    two = s.euclidean_step(s.euclidean_step(lam, v, 0.25), v, 0.25)
    assert np.allclose(two, s.euclidean_step(lam, v, 0.5), atol=1e-15)
    assert abs(np.linalg.norm(s.euclidean_step(lam, v, 0.7) - lam) - 0.7) < 1e-12


def test_dual_direction_isotropic_equals_v():
    v = np.array([0.6, 0.0, -0.8])
    for c in (1e-6, 0.3, 50.0):
        for delta in (1e-8, 1e-2, 10.0):
            u, _ = s.dual_direction(c * np.eye(3), v, delta)
            assert np.abs(u - v).max() < 1e-8


def test_dual_direction_diagonal_closed_form():
    h = np.diag([100.0, 0.01])
    v = np.array([1.0, 1.0]) / math.sqrt(2)
    delta = s.damping(h)
    u, _ = s.dual_direction(h, v, delta)
    # closed form: components proportional to 1/(100+delta) and 1/(0.01+delta)
    assert u[0] / u[1] == pytest.approx((0.01 + delta) / (100 + delta), rel=1e-10)
    assert u[1] > 0.999


def test_dual_step_eps_zero_and_length():
    fam = geo.SoftmaxFamily(np.random.default_rng(1).normal(size=(10, 3)))
    lam = np.array([0.1, 0.2, -0.3])
    v = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(s.dual_step(fam, lam, v, 0.0), lam)
    out = s.dual_step(fam, lam, v, 0.25)
    assert abs(np.linalg.norm(out - lam) - 0.25) < 1e-12


def test_damping_contract():
    with pytest.raises(ContractError):
        s.solve_damped(np.eye(2), np.ones(2), delta=0.0)
    assert s.damping(np.eye(4) * 2) == pytest.approx(2e-4)


# ---- off-target KL -----------------------------------------------------------


def _family_from_probs(p):
    """One-hot embeddings with lam = log p reproduce p exactly."""
    V = len(p)
    return geo.SoftmaxFamily(np.eye(V)), np.log(np.asarray(p, dtype=float))


def test_off_target_kl_two_atom_oracle():
    fam, base = _family_from_probs([0.1, 0.25 * 0.9, 0.75 * 0.9])
    _, steered = _family_from_probs([0.6, 0.2, 0.2])
    kl = s.off_target_kl(fam, base, steered, target=(0,))
    want = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert kl == pytest.approx(want, abs=1e-12)
    assert kl == pytest.approx(0.1438, abs=1e-4)


def test_off_target_kl_zero_cases():
    fam, base = _family_from_probs([0.2, 0.3, 0.1, 0.4])
    assert s.off_target_kl(fam, base, base, (0, 1)) == 0.0
    # moving mass only inside T leaves the restricted distribution unchanged
    _, moved = _family_from_probs([0.45, 0.05, 0.1, 0.4])
    assert s.off_target_kl(fam, base, moved, (0, 1)) < 1e-12


def test_off_target_kl_contract_and_flag():
    fam = geo.SoftmaxFamily(np.eye(3))
    with pytest.raises(ContractError):
        s.off_target_kl(fam, np.zeros(3), np.zeros(3), (0, 1, 2))
    assert math.isnan(s.off_target_kl(fam, np.array([80.0, 0, 0]), np.zeros(3), (0,)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_off_target_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(3, 20))
    fam = geo.SoftmaxFamily(rng.normal(size=(V, 4)))
    a, b = rng.normal(size=4), rng.normal(size=4)
    T = tuple(rng.choice(V, size=int(rng.integers(1, V)), replace=False).tolist())
    assert s.off_target_kl(fam, a, b, T) >= 0.0
    assert s.off_target_kl(fam, a, a, T) == 0.0


# ---- steering loop -----------------------------------------------------------


def test_already_at_target_stops_immediately():
    fam = geo.SoftmaxFamily(np.eye(4))
    lam = np.array([5.0, 0.0, 0.0, 0.0])
    c = s.ConceptDirection(np.array([1.0, 0, 0, 0]), (0,))
    for method in s.METHODS:
        tr = s.run_steering(fam, lam, c, method, 0.1, 50)
        assert tr.stop_step == 0 and tr.stop_kl == 0.0


@pytest.mark.parametrize("method", ["dual", "natural"])
def test_isotropic_traces_match_euclidean(method):
    fam = cross_polytope(4)
    c = s.ConceptDirection(np.array([1.0, 0, 0, 0]), (0,))
    lam0 = np.zeros(4)
    e = s.run_steering(fam, lam0, c, "euclidean", 0.1, 200, keep_lams=True)
    d = s.run_steering(fam, lam0, c, method, 0.1, 200, keep_lams=True)
    assert e.stop_step == d.stop_step is not None
    assert np.abs(np.array(e.lams) - np.array(d.lams)).max() < 1e-8
    assert np.abs(np.array(e.kl) - np.array(d.kl)).max() < 1e-8


def test_stop_step_is_first_crossing():
    fam, c = s.planted_concept_family(seed=3)
    tr = s.run_steering(fam, np.zeros(8), c, "euclidean", 0.05, 2000)
    assert not tr.failed
    assert tr.p_target[tr.stop_step] >= 0.8
    assert all(p < 0.8 for p in tr.p_target[: tr.stop_step])
    assert len(tr.kl) == tr.stop_step + 1


def test_failure_flag():
    fam, c = s.planted_concept_family(seed=3)
    tr = s.run_steering(fam, np.zeros(8), c, "euclidean", 1e-4, 3)
    assert tr.failed and math.isnan(tr.stop_kl) and len(tr.p_target) == 4


def test_unknown_method():
    fam, c = s.planted_concept_family()
    with pytest.raises(ValidationError):
        s.run_steering(fam, np.zeros(8), c, "riemann", 0.1, 2)


def test_natural_gradient_beats_euclidean_on_planted_family():
    fam, c = s.planted_concept_family()
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(5):
        lam0 = rng.normal(size=8) * 0.3
        pairs.append((s.run_steering(fam, lam0, c, "euclidean", 0.02, 3000),
                      s.run_steering(fam, lam0, c, "natural", 0.02, 3000)))
    adv = s.kl_advantage(pairs)
    assert adv.n_failed == 0 and adv.value > 0


def test_kl_advantage_bookkeeping():
    def trace(kl, stop):
        return s.SteeringTrace("x", 0.1, p_target=[0.0] * len(kl), kl=kl, stop_step=stop)

    same = [(trace([0, 0.3], 1), trace([0, 0.3], 1))]
    assert s.kl_advantage(same).value == 0.0
    mixed = [(trace([0, 0.5], 1), trace([0, 0.2], 1)), (trace([0, 1.0], None), trace([0, 0.1], 1))]
    adv = s.kl_advantage(mixed)
    assert adv.value == pytest.approx(0.3) and adv.n_used == 1 and adv.n_failed == 1
    assert math.isnan(s.kl_advantage([(trace([0], None), trace([0], None))]).value)


def test_traces_csv_columns():
    fam, c = s.planted_concept_family()
    tr = s.run_steering(fam, np.zeros(8), c, "dual", 0.5, 3)
    lines = s.traces_csv([tr]).splitlines()
    assert lines[0] == "method,layer,context_id,epsilon,step,p_target,off_target_kl,stopped"
    assert len(lines) == 1 + len(tr.p_target)


# ---- cosine diagnostic -------------------------------------------------------


def test_cosine_examples():
    assert s.cosine_from_hessian(3.0 * np.eye(4), np.array([1.0, 2, 3, 4])).value == pytest.approx(1.0, abs=1e-12)
    deg = s.cosine_from_hessian(np.diag([1.0, 0.0]), np.array([0.0, 1.0]))
    assert deg.degenerate and deg.value == 0.0
    c = s.cosine_from_hessian(np.diag([1.0, 0.0]), np.array([1.0, 1.0]) / math.sqrt(2))
    assert c.value == pytest.approx(0.5 / (1 / math.sqrt(2)), abs=1e-12)
    assert abs(c.value - 0.7071) < 1e-4


def test_cosine_family_isotropic():
    fam = cross_polytope(3)
    assert abs(s.cosine_diagnostic(fam, np.zeros(3), np.array([0.2, -0.4, 1.0])).value - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(1e-3, 1e3), b=st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 5))
    h = x @ x.T
    v = rng.normal(size=5)
    c0 = s.cosine_from_hessian(h, v).value
    assert abs(s.cosine_from_hessian(a * h, b * v).value - c0) < 1e-12
    assert -1.0 <= c0 <= 1.0


def test_verdict_bands():
    assert s.verdict(0.1) == "unreliable"
    assert s.verdict(0.3) == "caution"
    assert s.verdict(0.4) == "caution"
    assert s.verdict(0.41) == "sound"


def test_planted_family_is_anisotropic():
    fam, c = s.planted_concept_family()
    summ = geo.summarize(geo.hessian(fam, np.zeros(8), 64))
    assert summ.condition_number >= 100
    assert c.target == (0, 1, 2, 3)
