import numpy as np
import pytest

from rpo.core import (
    BudgetSpec,
    Normalization,
    RegularizerSpec,
    ReturnSample,
    VarianceConvention,
    penalty,
    sample_returns,
    substream,
)
from rpo.dominance import max_dominance, verify_unbounded_ray
from rpo.optimizer import (
    PortfolioProblem,
    SolverStatus,
    check_kkt,
    objective_gradient,
    objective_value,
    recession_value,
    solve,
    solve_no_short,
)
from rpo.risk import ESConfig

UNIT_BUDGET = BudgetSpec(normalization=Normalization.SUM_TO_ONE)


def _sample_from(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return ReturnSample(
        n_assets=matrix.shape[0],
        n_obs=matrix.shape[1],
        returns=matrix,
        seed=0,
        variance_convention=VarianceConvention.UNIT,
    )


def _unit_problem(matrix, reg, es_beta=None, short_ban=False):
    sample = _sample_from(matrix)
    cfg = None if es_beta is None else ESConfig(es_beta)
    return PortfolioProblem(
        sample=sample, reg=reg, budget=UNIT_BUDGET, es_cfg=cfg, short_ban=short_ban
    )


def grid_oracle(problem, lo=-4.0, hi=5.0, steps=20001):
    """Dense scan over the budget slice (N = 2: w = (a, B - a))."""
    assert problem.sample.n_assets == 2
    b = problem.budget_total
    best_val, best_w = np.inf, None
    for a in np.linspace(lo, hi, steps):
        w = np.array([a, b - a])
        if problem.short_ban and (w < 0).any():
            continue
        v = objective_value(problem, w)
        if v < best_val:
            best_val, best_w = v, w
    return best_val, best_w


def grid_oracle_3(problem, lo=-2.0, hi=3.0, steps=161):
    """Coarse 2-D scan over the budget slice at N = 3, refined once."""
    b = problem.budget_total
    grid = np.linspace(lo, hi, steps)
    best = (np.inf, None)
    for a in grid:
        for c in grid:
            w = np.array([a, c, b - a - c])
            v = objective_value(problem, w)
            if v < best[0]:
                best = (v, w)
    # local refinement around the coarse winner
    a0, c0 = best[1][0], best[1][1]
    h = grid[1] - grid[0]
    fine = np.linspace(-h, h, 81)
    for da in fine:
        for dc in fine:
            w = np.array([a0 + da, c0 + dc, b - a0 - da - c0 - dc])
            v = objective_value(problem, w)
            if v < best[0]:
                best = (v, w)
    return best


def test_identical_columns_l2_gives_equal_weights():
    rng = np.random.default_rng(1)
    row = rng.standard_normal(12) / 4.0
    matrix = np.tile(row, (5, 1))
    sample = ReturnSample(5, 12, matrix, 0, VarianceConvention.ONE_OVER_N)
    problem = PortfolioProblem(
        sample=sample,
        reg=RegularizerSpec.pure_lp(2.0, 0.5),
        budget=BudgetSpec(normalization=Normalization.SUM_TO_N),
        es_cfg=ESConfig(0.5),
    )
    sol = solve(problem)
    assert sol.status is SolverStatus.OPTIMAL
    assert sol.weights == pytest.approx(np.ones(5), abs=1e-7)


def test_toy_dominance_l1_snaps_to_dominant_asset():
    # asset 1 dominates; eta above the instance threshold keeps the
    # problem bounded and puts all weight on the dominant asset
    matrix = np.array([[0.9, 1.1], [0.1, 0.2]])
    eta = 0.6  # threshold for this instance is max diff / 2 = 0.45
    problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, eta))
    sol = solve(problem)
    assert sol.status is SolverStatus.OPTIMAL
    assert sol.weights == pytest.approx([1.0, 0.0], abs=1e-8)


def test_toy_dominance_l1_unbounded_below_threshold():
    matrix = np.array([[0.9, 1.1], [0.1, 0.2]])  # diffs 0.8 and 0.9
    problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 0.3))
    sol = solve(problem)
    assert sol.status is SolverStatus.UNBOUNDED
    cert = sol.dominance_certificate
    assert cert is not None and cert.mu_star > 0.3
    assert verify_unbounded_ray(
        problem.sample,
        problem.reg,
        np.array([0.5, 0.5]),
        cert,
        np.array([1.0, 10.0, 100.0]),
    )


def test_l1_lp_matches_grid_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        matrix = rng.standard_normal((2, 6))
        problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 0.8), es_beta=0.5)
        sol = solve(problem)
        if sol.status is not SolverStatus.OPTIMAL:
            continue
        val, _ = grid_oracle(problem)
        assert sol.objective == pytest.approx(val, abs=2e-3)
        assert sol.objective <= val + 1e-9


def test_p32_matches_grid_oracle_n2():
    rng = np.random.default_rng(11)
    for _ in range(8):
        matrix = rng.standard_normal((2, 5))
        problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.5, 0.4), es_beta=0.4)
        sol = solve(problem)
        assert sol.status is SolverStatus.OPTIMAL, sol.diagnostics
        val, w = grid_oracle(problem)
        assert sol.objective <= val + 1e-9
        assert sol.weights == pytest.approx(w, abs=2e-3)


def test_p32_matches_grid_oracle_n3():
    rng = np.random.default_rng(13)
    matrix = rng.standard_normal((3, 7))
    problem = PortfolioProblem(
        sample=_sample_from(matrix),
        reg=RegularizerSpec.pure_lp(1.5, 0.3),
        budget=UNIT_BUDGET,
        es_cfg=ESConfig(0.5),
    )
    sol = solve(problem)
    assert sol.status is SolverStatus.OPTIMAL
    val, w = grid_oracle_3(problem)
    assert sol.objective <= val + 1e-9
    assert sol.weights == pytest.approx(w, abs=5e-2)


def test_elastic_net_matches_cvxpy():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(17)
    for trial in range(6):
        n, t = 5, 16
        matrix = rng.standard_normal((n, t)) / np.sqrt(n)
        sample = ReturnSample(n, t, matrix, 0, VarianceConvention.ONE_OVER_N)
        problem = PortfolioProblem(
            sample=sample,
            reg=RegularizerSpec.elastic_net(0.05, 0.1),
            budget=BudgetSpec(normalization=Normalization.SUM_TO_N),
            es_cfg=ESConfig(0.75),
        )
        sol = solve(problem)
        assert sol.status is SolverStatus.OPTIMAL, sol.diagnostics

        k = problem.tail_count
        w = cp.Variable(n)
        e = cp.Variable()
        u = cp.Variable(t, nonneg=True)
        cons = [u >= -matrix.T @ w - e, cp.sum(w) == problem.budget_total]
        obj = cp.Minimize(
            k * e + cp.sum(u) + 0.05 * cp.norm1(w) + 0.1 * cp.sum_squares(w)
        )
        cp.Problem(obj, cons).solve(solver=cp.CLARABEL)
        assert sol.objective == pytest.approx(obj.value, rel=1e-6, abs=1e-7)
        assert sol.weights == pytest.approx(w.value, abs=2e-5)


def test_p_large_pure_matches_cvxpy():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(19)
    n, t = 4, 12
    matrix = rng.standard_normal((n, t))
    problem = _unit_problem(matrix, RegularizerSpec.pure_lp(2.0, 0.7), es_beta=0.5)
    sol = solve(problem)
    assert sol.status is SolverStatus.OPTIMAL
    k = problem.tail_count
    w = cp.Variable(n)
    e = cp.Variable()
    u = cp.Variable(t, nonneg=True)
    cons = [u >= -matrix.T @ w - e, cp.sum(w) == 1.0]
    obj = cp.Minimize(k * e + cp.sum(u) + 0.7 * cp.sum_squares(w))
    cp.Problem(obj, cons).solve(solver=cp.CLARABEL)
    assert sol.objective == pytest.approx(obj.value, rel=1e-7, abs=1e-8)


def test_no_short_on_dominance_instance():
    matrix = np.array([[0.9, 1.1], [0.1, 0.2]])
    reg = RegularizerSpec.pure_lp(1.0, 0.0)
    unb = solve(_unit_problem(matrix, reg))
    assert unb.status is SolverStatus.UNBOUNDED
    sol = solve_no_short(_unit_problem(matrix, reg))
    assert sol.status is SolverStatus.OPTIMAL
    assert (sol.weights >= -1e-12).all()
    # 1-D line search over w in [0, 1] (budget + ban box the weights)
    grid_vals = [
        objective_value(_unit_problem(matrix, reg), np.array([a, 1 - a]))
        for a in np.linspace(0, 1, 20001)
    ]
    assert sol.objective == pytest.approx(min(grid_vals), abs=1e-6)
    assert sol.weights == pytest.approx([1.0, 0.0], abs=1e-8)


def test_no_short_identical_columns_equal_weights():
    row = np.random.default_rng(23).standard_normal(9)
    matrix = np.tile(row, (4, 1)) / 2.0
    sample = ReturnSample(4, 9, matrix, 0, VarianceConvention.ONE_OVER_N)
    problem = PortfolioProblem(
        sample=sample,
        reg=RegularizerSpec.pure_lp(2.0, 0.4),
        budget=BudgetSpec(normalization=Normalization.SUM_TO_N),
        es_cfg=ESConfig(0.5),
        short_ban=True,
    )
    sol = solve(problem)
    assert sol.weights == pytest.approx(np.ones(4), abs=1e-7)


def test_p_half_flags_divergence_on_dominant_instance():
    matrix = np.array([[0.9, 1.1], [0.1, 0.2]])
    problem = _unit_problem(matrix, RegularizerSpec.pure_lp(0.5, 0.1))
    sol = solve(problem)
    assert sol.status is SolverStatus.UNBOUNDED
    assert sol.dominance_certificate.mu_star > 0


def test_p_above_one_never_unbounded_on_dominant_instance():
    matrix = np.array([[0.9, 1.1], [0.1, 0.2]])
    for p in (1.5, 2.0):
        sol = solve(_unit_problem(matrix, RegularizerSpec.pure_lp(p, 0.1)))
        assert sol.status is SolverStatus.OPTIMAL, (p, sol.diagnostics)


def test_recession_value_matches_dominance_at_ml():
    rng = np.random.default_rng(29)
    for _ in range(20):
        matrix = rng.standard_normal((3, 4))
        problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 0.2))
        value, d, _ = recession_value(problem)
        mu = max_dominance(problem.sample).mu_star
        assert value == pytest.approx(0.2 - mu, abs=1e-8)
        assert abs(d.sum()) < 1e-9


def test_hard_l1_equals_short_ban():
    rng = np.random.default_rng(31)
    matched = 0
    for trial in range(30):
        matrix = rng.standard_normal((4, 10))
        hard = solve(
            _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 1e3), es_beta=0.7)
        )
        assert hard.status is SolverStatus.OPTIMAL
        assert np.max(np.maximum(-hard.weights, 0.0)) <= 1e-6
        banned = solve_no_short(
            _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 1e3), es_beta=0.7)
        )
        if np.allclose(hard.weights, banned.weights, atol=1e-4):
            matched += 1
    assert matched == 30


def test_kkt_clean_and_perturbed():
    rng = np.random.default_rng(37)
    matrix = rng.standard_normal((4, 14))
    problem = _unit_problem(matrix, RegularizerSpec.elastic_net(0.1, 0.3), es_beta=0.5)
    sol = solve(problem)
    assert sol.status is SolverStatus.OPTIMAL
    report = check_kkt(problem, sol)
    assert report.max_residual <= 1e-6
    bumped = sol
    bumped.weights = sol.weights + np.array([1e-2, -1e-2, 0, 0])
    report2 = check_kkt(problem, bumped)
    assert report2.stationarity_residual > 1e-6


def test_kkt_l1_zero_weights_carry_interval():
    matrix = np.array([[0.9, 1.1], [0.1, 0.2]])
    problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 0.6))
    sol = solve(problem)
    assert sol.weights == pytest.approx([1.0, 0.0], abs=1e-8)
    report = check_kkt(problem, sol)
    assert report.max_residual <= 1e-6  # zero weight admits the dual value


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(41)
    checked = 0
    for _ in range(200):
        n, t = 4, 11
        matrix = rng.standard_normal((n, t))
        problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.5, 0.3), es_beta=0.5)
        w = rng.standard_normal(n)
        losses = -(w @ matrix)
        srt = np.sort(losses)[::-1]
        m = int(np.ceil(problem.tail_count - 1e-12))
        # skip non-differentiable points: quantile ties or zero weights
        if np.min(np.abs(np.diff(srt))) < 1e-3 or np.min(np.abs(w)) < 1e-3:
            continue
        g = objective_gradient(problem, w)
        h = 1e-6
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd = (
                objective_value(problem, w + e) - objective_value(problem, w - e)
            ) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)
        checked += 1
        if checked >= 100:
            break
    assert checked >= 100


def test_objective_equivalence_lp_vs_iterative_l1():
    # the iterative engine approaches pure L1 through a vanishing ridge
    from rpo.optimizer import _solve_iterative
    import dataclasses

    rng = np.random.default_rng(43)
    agree = 0
    for _ in range(100):
        matrix = rng.standard_normal((3, 8))
        problem = _unit_problem(matrix, RegularizerSpec.pure_lp(1.0, 0.9), es_beta=0.5)
        lp = solve(problem)
        if lp.status is not SolverStatus.OPTIMAL:
            continue
        ridge = dataclasses.replace(
            problem, reg=RegularizerSpec.elastic_net(0.9, 1e-9)
        )
        it = _solve_iterative(ridge, tol=1e-10, max_iter=4000)
        obj_l1 = objective_value(problem, it.weights)
        assert abs(obj_l1 - lp.objective) <= 1e-6 * (1 + abs(lp.objective))
        agree += 1
    assert agree >= 60


def test_q0_monotone_in_eta2():
    rng = np.random.default_rng(47)
    n, t = 6, 18
    matrix = rng.standard_normal((n, t)) / np.sqrt(n)
    sample = ReturnSample(n, t, matrix, 0, VarianceConvention.ONE_OVER_N)
    q_prev = np.inf
    for eta2 in (0.01, 0.05, 0.1, 0.5, 1.0):
        problem = PortfolioProblem(
            sample=sample,
            reg=RegularizerSpec.elastic_net(0.05, eta2),
            budget=BudgetSpec(normalization=Normalization.SUM_TO_N),
            es_cfg=ESConfig(0.5),
        )
        sol = solve(problem)
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.q0_empirical <= q_prev + 1e-8
        q_prev = sol.q0_empirical


def test_convention_mismatch_rejected():
    sample = sample_returns(3, 5, 1, VarianceConvention.UNIT)
    with pytest.raises(Exception):
        PortfolioProblem(
            sample=sample,
            reg=RegularizerSpec.pure_lp(2.0, 0.1),
            budget=BudgetSpec(normalization=Normalization.SUM_TO_N),
        )
