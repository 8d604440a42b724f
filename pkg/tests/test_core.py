import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import Lasso

from dlfumi import core
from dlfumi.core import (DegenerateAtomWarning, Dictionary, Hyperparams, compute_penalty,
                         e_step, expected_objective, fit, init_codes, init_dictionary,
                         instance_costs, largest_eigenvalue, objective, soft_threshold,
                         step_size, update_background_atom, update_codes_neg,
                         update_codes_pos, update_target_atom)
from dlfumi.data import MILDataset, SynthSpec, synth_generate

from oracles import objective_loops, random_problem


def sklearn_lasso(x, D, lam):
    # sklearn scales the data term by 1 / n_samples
    m = Lasso(alpha=lam / D.shape[0], fit_intercept=False, tol=1e-14, max_iter=200000)
    return m.fit(D, x).coef_


# --------------------------------------------------------------------------
# numerical pieces


def test_largest_eigenvalue_matches_eigh(rng):
    for _ in range(20):
        A = rng.standard_normal((15, int(rng.integers(2, 9))))
        G = A.T @ A
        assert largest_eigenvalue(G) == pytest.approx(np.linalg.eigvalsh(G)[-1], rel=1e-5)
    assert largest_eigenvalue(np.array([[3.0]])) == 3.0
    assert largest_eigenvalue(np.zeros((3, 3))) == 0.0


def test_step_size_uses_right_gram(rng):
    D = Dictionary(rng.standard_normal((6, 2)), rng.standard_normal((6, 3)))
    full = np.linalg.eigvalsh(D.matrix.T @ D.matrix)[-1]
    bg = np.linalg.eigvalsh(D.background.T @ D.background)[-1]
    assert step_size(D, True) == pytest.approx(1 / full, rel=1e-5)
    assert step_size(D, False) == pytest.approx(1 / bg, rel=1e-5)
    with pytest.raises(core.NumericalError):
        step_size(Dictionary(np.zeros((3, 1)), np.zeros((3, 1))))


def test_soft_threshold_rejects_negative():
    with pytest.raises(ValueError):
        soft_threshold([1.0], -0.1)


@given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_soft_threshold_properties(v, tau):
    u = float(soft_threshold(v, tau))
    assert abs(u) <= abs(v)
    assert u == 0.0 or np.sign(u) == np.sign(v)
    assert abs(u) == pytest.approx(max(abs(v) - tau, 0.0), abs=1e-9 * max(1.0, abs(v)))


def test_compute_penalty_cosines(rng):
    D = Dictionary(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
    P = compute_penalty(D, 0.7)
    for k in range(3):
        for t in range(2):
            a, b = D.background[:, k], D.target[:, t]
            assert P.gamma[k, t] == pytest.approx(0.7 * a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert np.array_equal(P.target_old, D.target)
    D.target[:, 0] = 0
    with pytest.raises(ValueError, match="zero-norm"):
        compute_penalty(D, 0.1)


def test_penalty_value_is_frozen(rng):
    D = Dictionary(rng.standard_normal((4, 1)), rng.standard_normal((4, 2)))
    P = compute_penalty(D, 1.0)
    before = P.value(D.background)
    D.target[:] = 0.0  # later target updates must not move the penalty
    assert P.value(D.background) == before


# --------------------------------------------------------------------------
# objectives


def test_instance_costs_consistent_with_objective(rng):
    ds, D, codes, post, penalty, lam, psi = random_problem(rng, n_pos_bags=2, n_neg_bags=2)
    c1, c0 = instance_costs(ds, D, codes, lam)
    w = np.where(ds.positive, psi, 1.0)
    pen = penalty.value(D.background)
    ones = np.ones(ds.n_instances)
    assert objective(ds, D, codes, ones, penalty, lam, psi) == pytest.approx(
        np.sum(w * np.where(ds.positive, c1, c0)) + pen, rel=1e-12)
    assert objective(ds, D, codes, 0 * ones, penalty, lam, psi) == pytest.approx(
        np.sum(w * c0) + pen, rel=1e-12)


def test_objective_ignores_z_on_negatives(rng):
    ds, D, codes, post, penalty, lam, psi = random_problem(rng, n_pos_bags=1, n_neg_bags=2)
    z = np.ones(ds.n_instances)
    ref = objective_loops(ds, D, codes, np.where(ds.positive, 1, 0), penalty, lam, psi)
    assert objective(ds, D, codes, z, penalty, lam, psi) == pytest.approx(ref, rel=1e-12)


def test_expected_objective_at_binary_posterior_is_objective(rng):
    ds, D, codes, post, penalty, lam, psi = random_problem(rng)
    z = np.where(ds.positive, rng.integers(0, 2, ds.n_instances), 0).astype(float)
    assert expected_objective(ds, D, codes, z, penalty, lam, psi) == pytest.approx(
        objective(ds, D, codes, z, penalty, lam, psi), rel=1e-12)


# --------------------------------------------------------------------------
# E-step


def test_e_step_formula(rng):
    ds, D, codes, _, _, _, _ = random_problem(rng, n_pos_bags=2, n_neg_bags=1)
    beta = 0.3
    p1 = e_step(ds, D, codes, beta)
    T = D.n_target
    for i in np.flatnonzero(ds.positive):
        r = ds.X[i] - D.background @ codes[i, T:]
        assert p1[i] == pytest.approx(1 - np.exp(-beta * r @ r), rel=1e-13)


# --------------------------------------------------------------------------
# atom updates


def test_target_update_solves_normal_equation(rng):
    ds, D, codes, post, penalty, lam, psi = random_problem(rng, n_pos_bags=2, n_neg_bags=2)
    t = 0
    new = update_target_atom(t, ds, D, codes, post)
    # weighted least squares over positive rows: sum p1 a_t (r_i - a_t d) = 0
    pos = ds.positive
    others = D.matrix @ codes[pos].T - np.outer(D.target[:, t], codes[pos, t])
    R = ds.X[pos].T - others
    w = post[pos] * codes[pos, t]
    assert np.allclose(new, R @ w / np.sum(w * codes[pos, t]), atol=1e-12)


def test_degenerate_atoms_warn_and_keep(rng):
    ds, D, codes, post, penalty, lam, psi = random_problem(rng)
    codes[:, 0] = 0.0
    codes[:, D.n_target] = 0.0
    with pytest.warns(DegenerateAtomWarning):
        out = update_target_atom(0, ds, D, codes, post)
    assert np.array_equal(out, D.target[:, 0])
    with pytest.warns(DegenerateAtomWarning):
        out = update_background_atom(0, ds, D, codes, post, penalty, psi)
    assert np.array_equal(out, D.background[:, 0])


def test_background_update_penalty_shift(rng):
    ds, D, codes, post, _, lam, psi = random_problem(rng, n_pos_bags=2, n_neg_bags=2)
    k, T = 1 % D.n_background, D.n_target
    P0, P5 = compute_penalty(D, 0.0), compute_penalty(D, 5.0)
    lo = update_background_atom(k, ds, D, codes, post, P0, psi)
    hi = update_background_atom(k, ds, D, codes, post, P5, psi)
    a = codes[:, T + k]
    denom = psi * np.sum(a[ds.positive] ** 2) + np.sum(a[~ds.positive] ** 2)
    assert np.allclose(hi - lo, -D.target @ P5.gamma[k] / denom, atol=1e-12)


# --------------------------------------------------------------------------
# codes


def test_negative_codes_converge_to_lasso(rng):
    D = Dictionary(rng.standard_normal((8, 2)), rng.standard_normal((8, 4)))
    x = rng.standard_normal(8)
    lam = 0.2
    a = np.zeros(6)
    eta = step_size(D, False)
    for _ in range(20000):
        a = update_codes_neg(x, D, a, lam, eta)
    assert np.all(a[:2] == 0.0)
    assert np.allclose(a[2:], sklearn_lasso(x, D.background, lam), atol=1e-7)


def test_positive_codes_with_full_posterior_converge_to_lasso(rng):
    D = Dictionary(rng.standard_normal((8, 2)), rng.standard_normal((8, 3)))
    x = rng.standard_normal(8)
    lam = 0.15
    a = np.zeros(5)
    eta = step_size(D, True)
    for _ in range(20000):
        a = update_codes_pos(x, D, a, 1.0, lam, eta)
    assert np.allclose(a, sklearn_lasso(x, D.matrix, lam), atol=1e-7)


def test_positive_codes_zero_posterior_leave_target_block(rng):
    D = Dictionary(rng.standard_normal((6, 2)), rng.standard_normal((6, 3)))
    a = rng.standard_normal(5)
    out = update_codes_pos(rng.standard_normal(6), D, a, 0.0, 0.1, step_size(D))
    assert np.array_equal(out[:2], a[:2])


def test_row_stacked_codes_match_single(rng):
    D = Dictionary(rng.standard_normal((6, 2)), rng.standard_normal((6, 3)))
    X = rng.standard_normal((4, 6))
    A = rng.standard_normal((4, 5))
    p = rng.uniform(0, 1, 4)
    eta = step_size(D)
    stacked = update_codes_pos(X, D, A, p, 0.1, eta)
    for i in range(4):
        assert np.allclose(stacked[i], update_codes_pos(X[i], D, A[i], p[i], 0.1, eta))


# --------------------------------------------------------------------------
# initialization and EM


def small_synth(seed=0, **kw):
    return synth_generate(SynthSpec(seed=seed, **kw))


def test_init_dictionary_unit_norm_and_errors():
    prob = small_synth()
    D = init_dictionary(prob.dataset, Hyperparams(T=2, M=5))
    assert np.allclose(np.linalg.norm(D.matrix, axis=0), 1.0)
    with pytest.raises(ValueError, match="distinct negative"):
        init_dictionary(prob.dataset, Hyperparams(T=2, M=500))
    with pytest.raises(ValueError, match="positive instances"):
        init_dictionary(prob.dataset, Hyperparams(T=500, M=5))


def test_init_codes_pin_negative_target_block():
    prob = small_synth()
    D = init_dictionary(prob.dataset, Hyperparams(T=2, M=5))
    codes = init_codes(prob.dataset, D, 0.01, 20)
    assert np.all(codes[~prob.dataset.positive, :2] == 0.0)


def test_fit_trace_and_normalization():
    prob = small_synth(seed=2)
    seen = []
    res = fit(prob.dataset, Hyperparams(T=2, M=5, lam=0.03, beta=30.0, max_em_iters=15),
              callback=lambda it, s: seen.append((it, s["expected_objective"])))
    assert res.n_iter == len(seen) and [s[0] for s in seen] == list(range(1, res.n_iter + 1))
    assert [r.expected_objective for r in res.trace] == [s[1] for s in seen]
    assert np.allclose(np.linalg.norm(res.dictionary.matrix, axis=0), 1.0)
    assert np.all(res.codes[~prob.dataset.positive, :2] == 0.0)
    assert np.all(res.posterior[~prob.dataset.positive] == 0.0)


def test_fit_deterministic():
    prob = small_synth(seed=4)
    hp = Hyperparams(T=2, M=5, lam=0.03, beta=30.0, max_em_iters=10, seed=9)
    a, b = fit(prob.dataset, hp), fit(prob.dataset, hp)
    assert np.array_equal(a.dictionary.matrix, b.dictionary.matrix)
    assert [r.expected_objective for r in a.trace] == [r.expected_objective for r in b.trace]


def test_fit_converges_with_loose_tolerance():
    prob = small_synth(seed=1)
    res = fit(prob.dataset, Hyperparams(T=2, M=5, lam=0.03, beta=30.0, rel_tol=1e-2))
    assert res.converged and res.n_iter < 100


def test_fit_rejects_single_class_bags():
    ds = MILDataset(np.random.default_rng(0).standard_normal((6, 3)), [0, 0, 1, 1, 2, 2],
                    [1, 1, 1])
    with pytest.raises(ValueError, match="negative"):
        fit(ds, Hyperparams(T=1, M=1))


@pytest.mark.parametrize("bad", [dict(T=0), dict(lam=-1.0), dict(Gamma=-0.1), dict(beta=0.0),
                                 dict(psi=0.0), dict(inner_iters=0), dict(init_code_iters=-1)])
def test_hyperparams_validation(bad):
    with pytest.raises(ValueError):
        Hyperparams(**bad).validate()


def test_resolved_psi_balances_counts():
    ds = MILDataset(np.ones((5, 1)), [0, 0, 1, 1, 1], [1, 0])
    assert Hyperparams().resolved_psi(ds) == pytest.approx(1.5)
    assert Hyperparams(psi=2.0).resolved_psi(ds) == 2.0
