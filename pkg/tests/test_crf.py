import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncrf import crf
from ncrf import numerics as nx
from ncrf.numerics import ContractError, Tensor


@pytest.fixture(autouse=True)
def f64():
    with nx.precision("f64"):
        yield


def random_instance(rng, n, d_max=0.2, u_max=2.0):
    psi = rng.uniform(-u_max, u_max, size=(n, 2))
    upper = np.triu(rng.uniform(-d_max, d_max, size=(n, n)), 1)
    return psi, upper + upper.T


def softmax_rows(logits):
    z = np.exp(logits - logits.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


# -- potentials -------------------------------------------------------------


def test_pairwise_distance_orthogonal_example():
    emb = Tensor([[1.0, 0.0], [0.0, 1.0]])
    d = crf.pairwise_distances(emb, Tensor([2.0]))
    np.testing.assert_allclose(d.data, [[0.0, 2.0], [2.0, 0.0]])


def test_pairwise_distance_identical_embeddings_vanish():
    rng = np.random.default_rng(0)
    emb = np.tile(rng.normal(size=(1, 5)), (9, 1))
    d = crf.pairwise_distances(Tensor(emb), Tensor(rng.normal(size=36)))
    assert np.all(d.data == 0.0)


def test_pairwise_distance_zero_w_vanishes():
    rng = np.random.default_rng(1)
    d = crf.pairwise_distances(Tensor(rng.normal(size=(9, 4))), Tensor(np.zeros(36)))
    assert np.all(d.data == 0.0)


def test_pairwise_distance_symmetric_zero_diagonal():
    rng = np.random.default_rng(2)
    d = crf.pairwise_distances(Tensor(rng.normal(size=(9, 4))), Tensor(rng.normal(size=36))).data
    np.testing.assert_array_equal(d, d.T)
    assert np.all(np.diag(d) == 0.0)


def test_pairwise_distance_matches_cosine_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=6)
    d = crf.pairwise_distances(Tensor(x), Tensor(w)).data
    for k, (i, j) in enumerate(itertools.combinations(range(4), 2)):
        cos = x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
        assert d[i, j] == pytest.approx(w[k] * (1 - cos), abs=1e-12)


def test_pairwise_distance_dimension_mismatch():
    with pytest.raises(ContractError):
        crf.pairwise_distances(Tensor(np.ones((9, 4))), Tensor(np.ones(35)))


def test_energy_examples():
    psi = np.array([[0.3, 1.0], [-0.7, 2.0]])
    d = np.array([[0.0, 0.25], [0.25, 0.0]])
    assert crf.energy([0, 0], psi, d) == pytest.approx(0.3 - 0.7 + 0.25)
    assert crf.energy([0, 1], psi, d) == pytest.approx(0.3 + 2.0)
    assert crf.energy([1, 0], psi, np.zeros((2, 2))) == pytest.approx(1.0 - 0.7)


# -- exact oracle -------------------------------------------------------------


def test_exact_two_site_worked_example():
    # weights {(0,0): 1/2, (0,1): 1, (1,0): 1, (1,1): 1/2} -> Z = 3
    d = np.array([[0.0, math.log(2)], [math.log(2), 0.0]])
    q, log_z = crf.exact_marginals(np.zeros((2, 2)), d)
    assert abs(math.exp(log_z) - 3.0) <= 1e-12
    assert abs(q[0, 0] - 0.5) <= 1e-12
    np.testing.assert_allclose(q, 0.5, atol=1e-12)


def test_exact_two_site_closed_form_random():
    rng = np.random.default_rng(4)
    for _ in range(50):
        psi, d = random_instance(rng, 2, d_max=3.0, u_max=3.0)
        c = d[0, 1]
        wts = {(a, b): math.exp(-psi[0, a] - psi[1, b] - (c if a == b else 0.0)) for a in (0, 1) for b in (0, 1)}
        z = sum(wts.values())
        q, log_z = crf.exact_marginals(psi, d)
        assert abs(log_z - math.log(z)) <= 1e-12
        assert abs(q[0, 1] - (wts[1, 0] + wts[1, 1]) / z) <= 1e-12
        assert abs(q[1, 1] - (wts[0, 1] + wts[1, 1]) / z) <= 1e-12


def test_exact_independent_sites_is_softmax():
    rng = np.random.default_rng(5)
    psi = rng.normal(size=(5, 2))
    q, _ = crf.exact_marginals(psi, np.zeros((5, 5)))
    np.testing.assert_allclose(q, softmax_rows(-psi), atol=1e-12)
    q1, _ = crf.exact_marginals(psi[:1], np.zeros((1, 1)))
    np.testing.assert_allclose(q1, softmax_rows(-psi[:1]), atol=1e-12)


def test_exact_refuses_large_grids():
    with pytest.raises(ContractError):
        crf.exact_marginals(np.zeros((17, 2)), np.zeros((17, 17)))
    with pytest.raises(ContractError):
        crf.kl_to_exact(np.full((17, 2), 0.5), np.zeros((17, 2)), np.zeros((17, 17)))


def test_kl_zero_for_factorised_target():
    rng = np.random.default_rng(6)
    psi = rng.normal(size=(4, 2))
    q, _ = crf.exact_marginals(psi, np.zeros((4, 4)))
    assert abs(crf.kl_to_exact(q, psi, np.zeros((4, 4)))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kl_non_negative(seed, n):
    rng = np.random.default_rng(seed)
    psi, d = random_instance(rng, n, d_max=2.0)
    q = rng.dirichlet([1.0, 1.0], size=n)
    assert crf.kl_to_exact(q, psi, d) >= -1e-12


# -- mean field ----------------------------------------------------------------


@pytest.mark.parametrize("T", [0, 1, 10])
def test_mean_field_zero_coupling_is_softmax(T):
    rng = np.random.default_rng(T)
    psi = rng.normal(size=(9, 2))
    q = crf.mean_field(Tensor(psi), Tensor(np.zeros((9, 9))), T=T).data
    np.testing.assert_allclose(q, softmax_rows(-psi), atol=1e-12)


def test_mean_field_T0_ignores_coupling():
    rng = np.random.default_rng(7)
    psi, d = random_instance(rng, 9, d_max=5.0)
    q = crf.mean_field(Tensor(psi), Tensor(d), T=0).data
    np.testing.assert_allclose(q, softmax_rows(-psi), atol=1e-12)


def test_mean_field_rows_sum_to_one_every_update():
    rng = np.random.default_rng(8)
    psi, d = random_instance(rng, 9, d_max=3.0)
    seen = []
    crf.mean_field(Tensor(psi), Tensor(d), T=3, on_update=lambda s, i, q: seen.append(q.sum(-1)))
    assert len(seen) == 27
    np.testing.assert_allclose(np.array(seen), 1.0, atol=1e-6)


def test_mean_field_close_to_exact():
    rng = np.random.default_rng(9)
    worst, hits = 0.0, 0
    for _ in range(50):
        psi, d = random_instance(rng, 9)
        q = crf.mean_field(Tensor(psi), Tensor(d), T=10).data
        exact, _ = crf.exact_marginals(psi, d)
        worst = max(worst, np.abs(q - exact).max())
        hits += np.array_equal(q.argmax(-1), exact.argmax(-1))
    assert worst <= 0.05
    assert hits >= 48


def test_mean_field_two_site_fixed_point():
    # Q_0 = softmax(-psi_0 - Q_1 d): check the sequential update by hand for one sweep
    psi = np.array([[0.2, -0.1], [0.5, 0.3]])
    d01 = 0.7
    d = np.array([[0.0, d01], [d01, 0.0]])
    q0, q1 = softmax_rows(-psi)
    q0 = softmax_rows(-psi[0] - q1 * d01)
    q1 = softmax_rows(-psi[1] - q0 * d01)
    out = crf.mean_field(Tensor(psi), Tensor(d), T=1).data
    np.testing.assert_allclose(out, np.stack([q0, q1]), atol=1e-12)


def test_mean_field_batched_matches_single():
    rng = np.random.default_rng(10)
    insts = [random_instance(rng, 9, d_max=1.0) for _ in range(3)]
    psi = np.stack([p for p, _ in insts])
    d = np.stack([dd for _, dd in insts])
    batched = crf.mean_field(Tensor(psi), Tensor(d), T=4).data
    for b in range(3):
        single = crf.mean_field(Tensor(psi[b]), Tensor(d[b]), T=4).data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


def test_mean_field_monotone_kl():
    rng = np.random.default_rng(11)
    for _ in range(5):
        psi, d = random_instance(rng, 9, d_max=1.5)
        kls = [crf.kl_to_exact(softmax_rows(-psi), psi, d)]
        crf.mean_field(Tensor(psi), Tensor(d), T=10, on_update=lambda s, i, q: kls.append(crf.kl_to_exact(q, psi, d)))
        assert np.all(np.diff(kls) <= 1e-10)


def test_mean_field_differ_convention_monotone_and_accurate():
    rng = np.random.default_rng(12)
    psi, d = random_instance(rng, 9)
    kls = [crf.kl_to_exact(softmax_rows(-psi), psi, d, compat="differ")]
    q = crf.mean_field(Tensor(psi), Tensor(d), T=10, compat="differ",
                       on_update=lambda s, i, q: kls.append(crf.kl_to_exact(q, psi, d, compat="differ")))
    assert np.all(np.diff(kls) <= 1e-10)
    exact, _ = crf.exact_marginals(psi, d, compat="differ")
    assert np.abs(q.data - exact).max() <= 0.05


def test_mean_field_contract_violations():
    with pytest.raises(ContractError):
        crf.mean_field(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), T=-1)
    with pytest.raises(ContractError):
        crf.mean_field(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
    with pytest.raises(ContractError):
        crf.mean_field(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), compat="potts")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = 6
    psi = rng.normal(size=(n, 2))
    emb = rng.normal(size=(n, 3))
    w_full = np.triu(rng.normal(size=(n, n)), 1)
    w_full = w_full + w_full.T
    perm = rng.permutation(n)
    iu = np.triu_indices(n, 1)
    w = w_full[iu]
    w_perm = w_full[np.ix_(perm, perm)][iu]
    d = crf.pairwise_distances(Tensor(emb), Tensor(w)).data
    d_p = crf.pairwise_distances(Tensor(emb[perm]), Tensor(w_perm)).data
    np.testing.assert_allclose(d_p, d[np.ix_(perm, perm)], atol=1e-12)
    # sequential updates visit sites in a different order, so compare the exact fixed point
    exact, _ = crf.exact_marginals(psi, d)
    exact_p, _ = crf.exact_marginals(psi[perm], d_p)
    np.testing.assert_allclose(exact_p, exact[perm], atol=1e-10)
    q = crf.mean_field(Tensor(psi), Tensor(d), T=0).data
    q_p = crf.mean_field(Tensor(psi[perm]), Tensor(d_p), T=0).data
    np.testing.assert_allclose(q_p, q[perm], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_flip_symmetry(seed):
    rng = np.random.default_rng(seed)
    psi, d = random_instance(rng, 9, d_max=1.0)
    q = crf.mean_field(Tensor(psi), Tensor(d), T=10).data
    q_f = crf.mean_field(Tensor(psi[:, ::-1].copy()), Tensor(d), T=10).data
    np.testing.assert_allclose(q_f, q[:, ::-1], atol=1e-10)
    exact, _ = crf.exact_marginals(psi, d)
    exact_f, _ = crf.exact_marginals(psi[:, ::-1], d)
    np.testing.assert_allclose(exact_f, exact[:, ::-1], atol=1e-12)


# -- loss and gradients ----------------------------------------------------------


def test_crf_loss_examples():
    assert crf.crf_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == pytest.approx(0.0, abs=1e-12)
    assert crf.crf_loss(Tensor(np.full((4, 2), 0.5)), [0, 1, 1, 0]).item() == pytest.approx(math.log(2))
    got = crf.crf_loss(Tensor([[0.5, 0.5], [1.0, 0.0]]), [0, 0]).item()
    assert got == pytest.approx((math.log(2) + 0.0) / 2)


def test_crf_loss_clamps_zero_probability():
    got = crf.crf_loss(Tensor([[1.0, 0.0]]), [1]).item()
    assert got == pytest.approx(-math.log(1e-12))


def test_crf_loss_label_shape_mismatch():
    with pytest.raises(ContractError):
        crf.crf_loss(Tensor(np.full((3, 2), 0.5)), [0, 1])


@pytest.mark.parametrize("compat", crf.COMPATIBILITIES)
def test_gradients_through_mean_field(compat):
    rng = np.random.default_rng(13)
    logits = Tensor(rng.normal(size=(9, 2)), requires_grad=True)
    emb = Tensor(rng.normal(size=(9, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-0.5, 0.5, size=36), requires_grad=True)
    labels = rng.integers(0, 2, size=9)

    def loss():
        d = crf.pairwise_distances(emb, w)
        return crf.crf_loss(crf.mean_field(nx.neg(logits), d, T=10, compat=compat), labels)

    assert nx.finite_diff_check(loss, [logits, emb, w]) <= 1e-3


def test_w_gradient_exactly_zero_for_identical_embeddings():
    rng = np.random.default_rng(14)
    emb = Tensor(np.tile(rng.normal(size=(1, 4)), (9, 1)), requires_grad=True)
    w = Tensor(rng.normal(size=36), requires_grad=True)
    psi = Tensor(rng.normal(size=(9, 2)))
    with nx.GradientTape() as tape:
        loss = crf.crf_loss(crf.mean_field(psi, crf.pairwise_distances(emb, w), T=10), rng.integers(0, 2, 9))
    (gw,) = tape.gradient(loss, [w])
    assert np.all(gw == 0.0)
