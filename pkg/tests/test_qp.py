import numpy as np
import pytest
import scipy.sparse as sparse
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from services import qp
from services.errors import DimensionMismatch
from services.qp import QpProblem, QpSettings, QpStatus


def _random_case(seed: int, rank_deficient: bool = False) -> tuple[QpProblem, np.ndarray]:
    """Random bounded QP (n <= 20) and a feasible point of it."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 21))
    if rank_deficient:
        B = rng.normal(size=(n, int(rng.integers(1, n))))
        H = B @ B.T
        H = 0.5 * (H + H.T)
    else:
        M = rng.normal(size=(n, n))
        H = M.T @ M + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    z0 = rng.uniform(-0.5, 0.5, n)
    A_eq = rng.normal(size=(2, n))
    A_in = rng.normal(size=(5, n))
    problem = QpProblem(
        H=H,
        g=g,
        A_eq=A_eq,
        b_eq=A_eq @ z0,
        A_in=A_in,
        b_in=A_in @ z0 + rng.uniform(0.0, 0.5, 5),
        lb=-np.ones(n),
        ub=np.ones(n),
    )
    return problem, z0


def _random_problem(seed: int) -> QpProblem:
    return _random_case(seed)[0]


def _slsqp(problem: QpProblem, start: np.ndarray):
    H = problem.H.toarray()
    A_eq = problem.A_eq.toarray()
    A_in = problem.A_in.toarray()
    return minimize(
        lambda z: 0.5 * z @ H @ z + problem.g @ z,
        start,
        jac=lambda z: H @ z + problem.g,
        method="SLSQP",
        bounds=list(zip(problem.lb, problem.ub)),
        constraints=[
            {"type": "eq", "fun": lambda z: A_eq @ z - problem.b_eq, "jac": lambda z: A_eq},
            {"type": "ineq", "fun": lambda z: problem.b_in - A_in @ z, "jac": lambda z: -A_in},
        ],
        options={"ftol": 1e-14, "maxiter": 1000},
    )


def _reference_solution(problem: QpProblem) -> np.ndarray:
    result = _slsqp(problem, np.zeros(problem.n))
    assert result.success, result.message
    return result.x


def _feasible_reference(problem: QpProblem, z0: np.ndarray) -> np.ndarray:
    """SLSQP from a feasible start; the start itself if SLSQP ends infeasible."""
    result = _slsqp(problem, z0)
    feasible = qp.validate(problem, result.x, 1e-9)["feasible"]
    if feasible and qp.objective(problem, result.x) <= qp.objective(problem, z0):
        return result.x
    return z0


@pytest.mark.parametrize("seed", range(8))
def test_matches_dense_reference(seed):
    problem = _random_problem(seed)
    solution = qp.solve(problem)
    reference = _reference_solution(problem)

    assert solution.status == QpStatus.OPTIMAL
    assert solution.kkt_residual <= 1e-6
    assert qp.validate(problem, solution.z)["feasible"]
    f_ref = qp.objective(problem, reference)
    assert abs(solution.objective - f_ref) <= 1e-6 * max(1.0, abs(f_ref))
    assert_allclose(solution.z, reference, atol=1e-4)


@pytest.mark.parametrize("seed", range(200))
def test_never_worse_than_a_feasible_reference(seed):
    problem, z0 = _random_case(seed, rank_deficient=seed % 2 == 1)
    solution = qp.solve(problem)

    assert solution.status == QpStatus.OPTIMAL
    assert qp.validate(problem, solution.z)["feasible"]
    f_ref = qp.objective(problem, _feasible_reference(problem, z0))
    assert solution.objective <= f_ref + 1e-6 * max(1.0, abs(f_ref))


@pytest.mark.parametrize("seed", range(0, 200, 20))
def test_row_scaling_leaves_the_solution_unchanged(seed):
    problem, _ = _random_case(seed)
    rng = np.random.default_rng(1000 + seed)
    eq_factors = rng.uniform(0.01, 100.0, problem.A_eq.shape[0])
    in_factors = rng.uniform(0.01, 100.0, problem.A_in.shape[0])
    scaled = QpProblem(
        H=problem.H,
        g=problem.g,
        A_eq=sparse.diags(eq_factors) @ problem.A_eq,
        b_eq=eq_factors * problem.b_eq,
        A_in=sparse.diags(in_factors) @ problem.A_in,
        b_in=in_factors * problem.b_in,
        lb=problem.lb,
        ub=problem.ub,
    )
    base = qp.solve(problem)
    rescaled = qp.solve(scaled)
    assert rescaled.status == QpStatus.OPTIMAL
    assert_allclose(rescaled.z, base.z, atol=1e-6)
    assert rescaled.objective == pytest.approx(base.objective, rel=1e-7, abs=1e-7)


def test_warm_start_reaches_the_same_point():
    problem = _random_problem(42)
    cold = qp.solve(problem)
    warm = qp.solve(problem, warm_start=cold.z)
    assert warm.status == QpStatus.OPTIMAL
    assert_allclose(warm.z, cold.z, atol=1e-6)


def test_unconstrained_problem():
    problem = QpProblem(H=sparse.eye(2), g=np.array([1.0, -2.0]))
    solution = qp.solve(problem)
    assert solution.status == QpStatus.OPTIMAL
    assert_allclose(solution.z, [-1.0, 2.0], atol=1e-6)
    assert solution.objective == pytest.approx(-2.5, abs=1e-6)


def test_active_lower_bound_has_positive_multiplier():
    problem = QpProblem(H=np.eye(1), g=np.zeros(1), lb=np.ones(1))
    solution = qp.solve(problem)
    assert solution.status == QpStatus.OPTIMAL
    assert solution.z[0] == pytest.approx(1.0, abs=1e-6)
    assert solution.duals["lower"][0] == pytest.approx(1.0, abs=1e-5)
    assert solution.duals["upper"][0] == pytest.approx(0.0, abs=1e-8)


def test_infeasible_problem_is_reported():
    problem = QpProblem(
        H=np.eye(2),
        g=np.zeros(2),
        A_eq=np.array([[1.0, 0.0]]),
        b_eq=np.array([5.0]),
        lb=np.zeros(2),
        ub=np.ones(2),
    )
    solution = qp.solve(problem)
    assert solution.status == QpStatus.INFEASIBLE
    assert np.all(np.isnan(solution.z))
    assert solution.to_dict()["status"] == "Infeasible"


def test_iteration_cap_is_reported_not_raised():
    problem = _random_problem(3)
    solution = qp.solve(problem, settings=QpSettings(max_iter=1, polish=False))
    assert solution.status in (QpStatus.MAX_ITER, QpStatus.INACCURATE)


def test_dimension_problems_raise():
    with pytest.raises(DimensionMismatch):
        qp.solve(QpProblem(H=np.eye(3), g=np.zeros(2)))
    with pytest.raises(DimensionMismatch):
        qp.solve(QpProblem(H=np.eye(2), g=np.zeros(2)), warm_start=np.zeros(3))
    with pytest.raises(DimensionMismatch):
        qp.validate(QpProblem(H=np.eye(2), g=np.zeros(2)), np.zeros(4))


def test_check_flags_asymmetric_and_indefinite_hessians():
    asymmetric = QpProblem(H=np.array([[1.0, 1.0], [0.0, 1.0]]), g=np.zeros(2))
    assert any("symmetric" in e for e in asymmetric.check())
    indefinite = QpProblem(H=np.diag([1.0, -1.0]), g=np.zeros(2))
    assert any("semidefinite" in e for e in indefinite.check())
    crossed = QpProblem(H=np.eye(1), g=np.zeros(1), lb=np.ones(1), ub=np.zeros(1))
    assert "lower bounds exceed upper bounds" in crossed.check()


def test_validate_reports_the_worst_row_scaled_violation():
    problem = QpProblem(
        H=np.eye(2),
        g=np.zeros(2),
        A_in=np.array([[2.0, 0.0]]),
        b_in=np.array([2.0]),
        lb=np.zeros(2),
    )
    ok = qp.validate(problem, np.array([0.5, 0.5]))
    assert ok["feasible"]
    assert ok["worst_violation"] == pytest.approx(-0.5)

    bad = qp.validate(problem, np.array([2.0, -0.1]))
    assert not bad["feasible"]
    assert bad["worst_violation"] == pytest.approx(1.0)


def test_settings_validation():
    assert QpSettings().validate() == []
    assert len(QpSettings(max_iter=0, eps_abs=0.0).validate()) == 2


def test_dump_problem_writes_matrix_market_files(tmp_path):
    problem = _random_problem(5)
    target = qp.dump_problem(problem, tmp_path, tag="case")
    names = sorted(p.name for p in target.iterdir())
    assert names == sorted(f"{n}.mtx" for n in ("H", "A_eq", "A_in", "g", "b_eq", "b_in", "lb", "ub"))
