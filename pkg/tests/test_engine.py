import numpy as np
import pytest

from vbcomplete.core_linalg import symmetrize
from vbcomplete.distributions import GaussianVecPosterior
from vbcomplete.engine import (
    determine_rank,
    predict_batch,
    predict_entry,
    prune_ranks,
    reconstruct_mean,
    run,
    sweep,
    update_factor,
    update_lambda,
    update_tau,
)
from vbcomplete.matrix_reference import from_posterior, matrix_predict, matrix_sweep, to_posterior
from vbcomplete.model import (
    Hyperpriors,
    PosteriorState,
    RunOptions,
    ValidationError,
    init_posterior,
    new_problem,
)
from vbcomplete.synth import gen_instance, relative_test_rmse

from conftest import ik_kron, random_problem, random_state


def dense_factor_oracle(problem, state, l):
    """Covariance and mean of factor ``l`` from literal Kronecker sums."""
    k = state.current_k
    m = problem.m[l]
    B = np.zeros((m * k, m * k))
    r = np.zeros(m * k)
    for idx, y in zip(problem.indices, problem.values):
        H = np.ones((k, k))
        w = np.ones(k)
        for s, f in enumerate(state.factors):
            if s == l:
                continue
            Ig = ik_kron(k, problem.side_info[s][idx[s]])
            H = H * (Ig.T @ (np.outer(f.mean, f.mean) + f.cov) @ Ig)
            w = w * (Ig.T @ f.mean)
        g = problem.side_info[l][idx[l]]
        B += np.kron(H, np.outer(g, g))
        r += y * np.kron(w, g)
    tau = state.c0 / state.d0
    A = np.linalg.inv(np.kron(np.diag(state.c / state.d), np.eye(m)) + tau * B)
    return A, tau * A @ r


def draw_factors(rng, state, n_draws):
    """Posterior draws of each factor as ``(n_draws, m, k)`` arrays."""
    out = []
    for f in state.factors:
        v = rng.multivariate_normal(f.mean, f.cov, size=n_draws)
        out.append(v.reshape(n_draws, f.k, f.m).transpose(0, 2, 1))
    return out


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_empty_omega_gives_prior(rng):
    hyper = Hyperpriors(np.array([1.0, 2.0]), np.array([3.0, 0.5]), 1.5, 0.7)
    problem = new_problem([None, None, None], (np.zeros((0, 3), np.int64), np.zeros(0)), 2, hyper, shape=(3, 4, 2))
    state = random_state(rng, problem)
    for l, m in enumerate(problem.m):
        post = update_factor(problem, state, l)
        np.testing.assert_allclose(post.cov, np.kron(np.diag(state.d / state.c), np.eye(m)), atol=1e-14)
        np.testing.assert_array_equal(post.mean, 0.0)
    tau = update_tau(problem, state)
    assert tau.rate == hyper.b0 and tau.shape == hyper.a0


def test_identity_side_info_rows_independent(rng):
    problem = random_problem(rng, (5, 4), (5, 4), 3, 12, identity=True)
    state = random_state(rng, problem)
    k = 3
    for l, m in enumerate(problem.m):
        A = update_factor(problem, state, l).cov
        grid = A.reshape(k, m, k, m)
        off = grid * (1 - np.eye(m))[None, :, None, :]
        assert np.max(np.abs(off)) <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_factor_update_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    problem = random_problem(rng, (3, 3, 3), (2, 2, 2), 2, 5)
    state = random_state(rng, problem)
    for l in range(3):
        post = update_factor(problem, state, l)
        A, mu = dense_factor_oracle(problem, state, l)
        np.testing.assert_allclose(post.cov, A, rtol=1e-10, atol=1e-10 * np.abs(A).max())
        np.testing.assert_allclose(post.mean, mu, rtol=1e-10, atol=1e-10 * np.abs(mu).max())


def test_lambda_at_initial_state():
    g = np.random.default_rng(0).standard_normal((6, 3))
    problem = new_problem([g, g[:5], g], [((0, 0, 0), 1.0)], 4)
    state = init_posterior(problem, 0)
    for f in state.factors:
        f.mean[:] = 0.0
    lam = update_lambda(problem, state)
    for j, gp in enumerate(lam):
        assert gp.rate == pytest.approx(1e-6 + 0.5 * 9)
        assert gp.shape == pytest.approx(1e-6 + 0.5 * 9)
        assert gp.mean == pytest.approx(1.0, rel=1e-6)


def test_lambda_matches_monte_carlo(rng):
    problem = random_problem(rng, (4, 5, 3), (2, 3, 2), 2, 8)
    state = random_state(rng, problem)
    lam = update_lambda(problem, state)
    n = 10 ** 5
    draws = draw_factors(np.random.default_rng(1), state, n)
    sq = sum(np.sum(u * u, axis=1) for u in draws)  # (n, k)
    target = problem.hyper.b_j + 0.5 * sq.mean(axis=0)
    se = 0.5 * sq.std(axis=0) / np.sqrt(n)
    for j in range(2):
        assert abs(lam[j].rate - target[j]) <= 3 * se[j]


def test_tau_matches_monte_carlo(rng):
    problem = random_problem(rng, (3, 3, 3), (2, 2, 2), 2, 5)
    state = random_state(rng, problem, cov_scale=0.05)
    tau = update_tau(problem, state)
    assert tau.shape == problem.hyper.a0 + 2.5
    n = 10 ** 5
    draws = draw_factors(np.random.default_rng(2), state, n)
    pred = np.ones((n, problem.n_obs, 2))
    for l, u in enumerate(draws):
        rows = problem.rows(l)  # (O, m)
        pred = pred * np.einsum("om,nmk->nok", rows, u)
    resid = np.sum((problem.values - pred.sum(axis=2)) ** 2, axis=1)
    target = problem.hyper.b0 + 0.5 * resid.mean()
    se = 0.5 * resid.std() / np.sqrt(n)
    assert abs(tau.rate - target) <= 3 * se


def test_tau_zero_residual_at_truth():
    inst = gen_instance(3, 6, 2, m=3, omega_size=30, seed=4)
    problem = inst.problem
    factors = [GaussianVecPosterior(u.reshape(-1, order="F"), np.zeros((6, 6)), 3, 2) for u in inst.truth_factors]
    state = PosteriorState(factors, np.ones(2), np.ones(2), 1.0, 1.0)
    assert update_tau(problem, state).rate == pytest.approx(problem.hyper.b0, abs=1e-12)


def small_full_problem(seed, n=8, m=2, r=1, noise=0.0):
    inst = gen_instance(2, n, r, m=m, omega_size=0, seed=seed)
    grid = np.array([(i, j) for i in range(n) for j in range(n)], dtype=np.int64)
    vals = inst.truth_at(grid) + noise * np.random.default_rng(seed).standard_normal(n * n)
    return new_problem(inst.side_info, (grid, vals), r), vals


def test_fixed_point_after_convergence():
    # noise keeps the noise precision finite, so the iteration contracts quickly
    problem, _ = small_full_problem(0, noise=0.3)
    state, _ = run(problem, RunOptions(max_iterations=2000, tolerance=1e-12, seed=0))
    _, report = sweep(problem, state)
    assert report.max_relative_mean_change <= 1e-8


def test_sweep_deterministic_and_pure(rng):
    problem = random_problem(rng, (4, 5, 3), (2, 3, 2), 2, 10)
    state = random_state(rng, problem)
    before = state.factors[0].mean.copy()
    a, ra = sweep(problem, state)
    b, rb = sweep(problem, state)
    np.testing.assert_array_equal(state.factors[0].mean, before)
    for fa, fb in zip(a.factors, b.factors):
        np.testing.assert_array_equal(fa.mean, fb.mean)
        np.testing.assert_array_equal(fa.cov, fb.cov)
    assert a.d0 == b.d0 and ra.iteration == rb.iteration == 1


@pytest.mark.parametrize("seed", range(4))
def test_two_mode_sweep_matches_matrix_reference(seed):
    rng = np.random.default_rng(100 + seed)
    problem = random_problem(rng, (6, 5), (3, 2), 3, 14)
    state = random_state(rng, problem)
    ours, _ = sweep(problem, state)
    ref = to_posterior(matrix_sweep(problem, from_posterior(state)), state)
    for fa, fb in zip(ours.factors, ref.factors):
        assert rel(fa.mean, fb.mean) <= 1e-10
        assert rel(fa.cov, fb.cov) <= 1e-10
    assert rel(ours.d, ref.d) <= 1e-10
    np.testing.assert_array_equal(ours.c, ref.c)
    assert abs(ours.d0 - ref.d0) <= 1e-10 * ref.d0
    assert ours.c0 == ref.c0


def test_constant_shapes_across_iterations(rng):
    problem = random_problem(rng, (4, 5, 3), (2, 3, 2), 2, 10)
    seen = []
    run(problem, RunOptions(max_iterations=4), on_sweep=lambda s, r: seen.append((s.c.copy(), s.c0)))
    for c, c0 in seen:
        np.testing.assert_array_equal(c, seen[0][0])
        assert c0 == seen[0][1]


def test_permutation_invariance(rng):
    problem = random_problem(rng, (5, 4, 3), (3, 2, 2), 2, 30)
    state = random_state(rng, problem)
    perm = rng.permutation(problem.n_obs)
    shuffled = new_problem(
        list(problem.side_info), (problem.indices[perm], problem.values[perm]), 2, problem.hyper
    )
    a, _ = sweep(problem, state)
    b, _ = sweep(shuffled, state)
    for fa, fb in zip(a.factors, b.factors):
        assert rel(fb.mean, fa.mean) <= 1e-10
        assert rel(fb.cov, fa.cov) <= 1e-10
    assert abs(a.d0 - b.d0) <= 1e-10 * a.d0


def test_full_observation_recovery():
    problem, vals = small_full_problem(1)
    state, reports = run(problem, RunOptions(max_iterations=100, seed=3))
    X = reconstruct_mean(problem, state).ravel()
    assert np.linalg.norm(X - vals) / np.linalg.norm(vals) < 1e-6
    assert len(reports) <= 100


def test_reconstruction_independent_of_seed():
    problem, vals = small_full_problem(2, r=2, m=3)
    xs = []
    for seed in (0, 1):
        state, _ = run(problem, RunOptions(max_iterations=300, seed=seed))
        xs.append(reconstruct_mean(problem, state))
    assert np.linalg.norm(xs[0] - xs[1]) / np.linalg.norm(xs[1]) < 1e-5


def test_run_rejects_zero_iterations():
    with pytest.raises(ValidationError):
        RunOptions(max_iterations=0)


def _state_with_lambda(rng, problem, c, d):
    state = random_state(rng, problem)
    state.c, state.d = np.asarray(c, float), np.asarray(d, float)
    return state


def test_prune_examples(rng):
    problem = random_problem(rng, (4, 5), (2, 3), 3, 6)
    state = _state_with_lambda(rng, problem, [2.0, 2.0, 2.0], [2.0, 2.0, 2.0])
    assert prune_ranks(state, 1e3).current_k == 3
    state = _state_with_lambda(rng, problem, [1.0, 1.0, 1e6], [1.0, 1.0, 1.0])
    out = prune_ranks(state, 1e3)
    assert out.current_k == 2
    np.testing.assert_array_equal(out.components, [0, 1])
    for f, g in zip(out.factors, state.factors):
        np.testing.assert_array_equal(f.mean, g.mean[: 2 * g.m])
        np.testing.assert_array_equal(f.cov, g.cov[: 2 * g.m, : 2 * g.m])
    # the surviving state still sweeps, with hyperpriors of the kept columns
    sweep(problem, out)
    with pytest.raises(ValidationError):
        prune_ranks(state, 0)


def test_prune_never_empties(rng):
    problem = random_problem(rng, (4, 5), (2, 3), 2, 6)
    state = _state_with_lambda(rng, problem, [5.0, 5.0], [1.0, 1.0])
    assert prune_ranks(state, 1e-9).current_k >= 1


@pytest.mark.slow
def test_pruning_end_to_end():
    inst = gen_instance(3, 20, 2, m=4, k=5, omega_size=1500, snr_db=20, seed=0)
    opts = dict(max_iterations=300, seed=0)
    pruned, _ = run(inst.problem, RunOptions(prune=True, **opts))
    plain, _ = run(inst.problem, RunOptions(**opts))
    assert pruned.current_k == 2
    err = [
        relative_test_rmse(inst, lambda ix, s=s: predict_batch(inst.problem, s, ix)[0])
        for s in (pruned, plain)
    ]
    assert abs(err[0] - err[1]) < 1e-6


def test_determine_rank_examples(rng):
    problem = random_problem(rng, (4, 5), (2, 3), 3, 6)
    state = _state_with_lambda(rng, problem, [1.0, 1.0, 1.0], [1.0, 0.5, 0.001])
    assert determine_rank(state, 0.05) == 2
    state = _state_with_lambda(rng, problem, [2.0] * 3, [3.0] * 3)
    assert determine_rank(state, 1.0) == 3
    assert determine_rank(state, 0.3) == 3
    state = _state_with_lambda(rng, problem, [1.0] * 3, [1.0, 0.05, 0.01])
    assert determine_rank(state, 0.05) == 2  # inclusive at the threshold
    with pytest.raises(ValidationError):
        determine_rank(state, 0.0)


def test_predict_without_factor_uncertainty(rng):
    problem = random_problem(rng, (4, 5, 3), (2, 3, 2), 2, 6)
    state = random_state(rng, problem)
    for f in state.factors:
        f.cov[:] = 0.0
    t = predict_entry(problem, state, (1, 2, 0))
    assert t.precision == pytest.approx(state.c0 / state.d0, rel=1e-15)
    assert t.dof == 2 * state.c0
    if state.c0 > 1:
        assert t.variance == pytest.approx(state.d0 / (state.c0 - 1), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_predict_eta_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    problem = random_problem(rng, (3, 3, 3), (2, 2, 2), 2, 5)
    state = random_state(rng, problem)
    for index in [(0, 1, 2), (2, 2, 2), (1, 0, 1)]:
        ws = [ik_kron(2, G[i]).T @ f.mean for G, i, f in zip(problem.side_info, index, state.factors)]
        eta = 0.0
        for l, (G, i, f) in enumerate(zip(problem.side_info, index, state.factors)):
            rest = np.prod([w for s, w in enumerate(ws) if s != l], axis=0)
            z = np.kron(rest, G[i])
            eta += z @ f.cov @ z
        t = predict_entry(problem, state, index)
        assert 1 / t.precision - state.d0 / state.c0 == pytest.approx(eta, rel=1e-10)
        assert t.location == pytest.approx(np.sum(np.prod(ws, axis=0)), rel=1e-12)


def test_predict_two_mode_matches_reference(rng):
    problem = random_problem(rng, (6, 5), (3, 2), 3, 10)
    state = random_state(rng, problem)
    ms = from_posterior(state)
    for index in [(0, 0), (5, 4), (2, 3)]:
        ours = predict_entry(problem, state, index)
        ref = matrix_predict(problem, ms, index)
        assert ours.location == pytest.approx(ref.location, rel=1e-12)
        assert ours.precision == pytest.approx(ref.precision, rel=1e-12)
        assert ours.dof == ref.dof


def test_predict_batch_matches_entries(rng):
    problem = random_problem(rng, (4, 5, 3), (2, 3, 2), 2, 6)
    state = random_state(rng, problem)
    idx = np.array([(0, 0, 0), (3, 4, 2), (1, 2, 1)])
    loc, prec, dof = predict_batch(problem, state, idx)
    for i, ix in enumerate(idx):
        t = predict_entry(problem, state, ix)
        assert loc[i] == pytest.approx(t.location, rel=1e-13)
        assert prec[i] == pytest.approx(t.precision, rel=1e-12)
    with pytest.raises(IndexError):
        predict_entry(problem, state, (4, 0, 0))


def test_reconstruct_rank_one_outer_product(rng):
    problem = random_problem(rng, (4, 3), (4, 3), 1, 5, identity=True)
    state = random_state(rng, problem)
    u, v = state.means()
    np.testing.assert_allclose(reconstruct_mean(problem, state), np.outer(u[:, 0], v[:, 0]), rtol=1e-15)


def test_reconstruct_equals_predict_locations(rng):
    problem = random_problem(rng, (3, 4, 2), (2, 3, 2), 3, 6)
    state = random_state(rng, problem)
    X = reconstruct_mean(problem, state)
    for index in np.ndindex(*problem.shape):
        assert X[index] == predict_entry(problem, state, index).location
    with pytest.raises(MemoryError):
        reconstruct_mean(problem, state, cap=10)


def test_sweep_keeps_valid_distributions(rng):
    problem = random_problem(rng, (4, 5, 3), (2, 3, 2), 2, 10)
    state = random_state(rng, problem)
    for _ in range(3):
        state, report = sweep(problem, state)
        for f in state.factors:
            np.testing.assert_array_equal(f.cov, symmetrize(f.cov))
            f.check()
        assert np.all(state.c > 0) and np.all(state.d > 0) and state.d0 > 0
        assert report.residual_proxy >= 0
