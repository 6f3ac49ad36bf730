"""
Convex quadratic programs and their certified solutions.

    minimize    1/2 z'Hz + g'z
    subject to  A_eq z = b_eq,  A_in z <= b_in,  lb <= z <= ub

The operator-splitting solver from the osqp package does the iterations.
Rows are scaled by their infinity norm before solving; every answer is
certified again in the original units.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import osqp
import scipy.io
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from services.errors import DimensionMismatch

logger = logging.getLogger(__name__)

OSQP_INFTY = 1e30
PSD_CHECK_MAX_N = 300


class QpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INACCURATE = "Inaccurate"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class QpSettings:
    """Solver limits and certification tolerances."""
    max_iter: int = 4000
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    polish: bool = True
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-7
    dump_dir: str = ""

    def validate(self) -> list[str]:
        errors = []
        if self.max_iter < 1:
            errors.append("solver max_iter must be at least 1")
        for name in ("eps_abs", "eps_rel", "kkt_tol", "feas_tol"):
            if getattr(self, name) <= 0:
                errors.append(f"solver {name} must be positive")
        return errors


def _as_sparse(matrix, n_cols: int) -> sparse.csr_matrix:
    if matrix is None:
        return sparse.csr_matrix((0, n_cols))
    return sparse.csr_matrix(matrix, dtype=float)


def _as_vector(values, size: int, fill: float) -> np.ndarray:
    if values is None:
        return np.full(size, fill)
    return np.asarray(values, dtype=float).ravel()


@dataclass
class QpProblem:
    """Sparse QP data. Missing blocks are empty; missing bounds are infinite."""
    H: sparse.csr_matrix
    g: np.ndarray
    A_eq: Optional[sparse.csr_matrix] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[sparse.csr_matrix] = None
    b_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        self.H = _as_sparse(self.H, n)
        self.A_eq = _as_sparse(self.A_eq, n)
        self.A_in = _as_sparse(self.A_in, n)
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], 0.0)
        self.b_in = _as_vector(self.b_in, self.A_in.shape[0], 0.0)
        self.lb = _as_vector(self.lb, n, -np.inf)
        self.ub = _as_vector(self.ub, n, np.inf)

    @property
    def n(self) -> int:
        return self.g.size

    def check(self) -> list[str]:
        """Dimension, symmetry and convexity problems (empty when valid)."""
        errors = []
        n = self.n
        if self.H.shape != (n, n):
            errors.append(f"H has shape {self.H.shape}, expected {(n, n)}")
        if self.A_eq.shape[1] != n or self.b_eq.size != self.A_eq.shape[0]:
            errors.append("equality block dimensions are inconsistent")
        if self.A_in.shape[1] != n or self.b_in.size != self.A_in.shape[0]:
            errors.append("inequality block dimensions are inconsistent")
        if self.lb.size != n or self.ub.size != n:
            errors.append("bound vectors must have length n")
        if errors:
            return errors

        if np.any(self.lb > self.ub):
            errors.append("lower bounds exceed upper bounds")
        scale = max(1.0, abs(self.H).max() if self.H.nnz else 0.0)
        asym = abs(self.H - self.H.T)
        if asym.nnz and asym.max() > 1e-12 * scale:
            errors.append("H is not symmetric")
        elif 0 < n <= PSD_CHECK_MAX_N and self.H.nnz:
            min_eig = np.linalg.eigvalsh(self.H.toarray()).min()
            if min_eig < -1e-9 * scale:
                errors.append(f"H is not positive semidefinite (min eigenvalue {min_eig:.3e})")
        return errors


@dataclass
class QpSolution:
    """Primal point, split multipliers and certificate."""
    z: np.ndarray
    duals: dict[str, np.ndarray]
    status: QpStatus
    kkt_residual: float
    primal_violation: float
    iterations: int
    objective: float
    polished: bool = False

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "kkt_residual": self.kkt_residual,
            "primal_violation": self.primal_violation,
            "iterations": self.iterations,
            "objective": self.objective,
            "polished": self.polished,
        }


def objective(problem: QpProblem, z) -> float:
    """1/2 z'Hz + g'z."""
    z = np.asarray(z, dtype=float)
    return float(0.5 * z @ (problem.H @ z) + problem.g @ z)


def _row_norms(matrix: sparse.csr_matrix) -> np.ndarray:
    if matrix.shape[0] == 0:
        return np.zeros(0)
    norms = np.asarray(abs(matrix).max(axis=1).todense()).ravel()
    return np.where(norms > 0, norms, 1.0)


def validate(problem: QpProblem, z, tol: float = 1e-7) -> dict:
    """
    Worst row-scaled constraint violation at z.

    Returns:
        {"feasible": bool, "worst_violation": float}; the violation is
        negative when every constraint holds with margin
    """
    z = np.asarray(z, dtype=float)
    if z.size != problem.n:
        raise DimensionMismatch(f"z has length {z.size}, problem has {problem.n} variables")

    candidates = []
    if problem.A_eq.shape[0]:
        candidates.append(np.abs(problem.A_eq @ z - problem.b_eq) / _row_norms(problem.A_eq))
    if problem.A_in.shape[0]:
        candidates.append((problem.A_in @ z - problem.b_in) / _row_norms(problem.A_in))
    finite_lb = np.isfinite(problem.lb)
    finite_ub = np.isfinite(problem.ub)
    if finite_lb.any():
        candidates.append(problem.lb[finite_lb] - z[finite_lb])
    if finite_ub.any():
        candidates.append(z[finite_ub] - problem.ub[finite_ub])

    worst = max((float(np.max(c)) for c in candidates if c.size), default=0.0)
    if not np.all(np.isfinite(z)):
        worst = np.inf
    return {"feasible": bool(worst <= tol), "worst_violation": worst}


# ============================================================================
# STACKED FORM
# ============================================================================

@dataclass
class _Stacked:
    A: sparse.csr_matrix
    lower: np.ndarray
    upper: np.ndarray
    n_eq: int
    n_in: int
    bound_index: np.ndarray


def _stack(problem: QpProblem) -> _Stacked:
    n = problem.n
    bounded = np.flatnonzero(np.isfinite(problem.lb) | np.isfinite(problem.ub))
    eye_rows = sparse.csr_matrix(
        (np.ones(bounded.size), (np.arange(bounded.size), bounded)), shape=(bounded.size, n)
    )
    blocks = [problem.A_eq, problem.A_in, eye_rows]
    lower = np.concatenate([problem.b_eq, np.full(problem.A_in.shape[0], -np.inf), problem.lb[bounded]])
    upper = np.concatenate([problem.b_eq, problem.b_in, problem.ub[bounded]])

    A = sparse.vstack(blocks, format="csr")
    if A.shape[0] == 0:
        # One free row keeps the backend happy for unconstrained problems
        A = sparse.csr_matrix((1, n))
        lower = np.array([-np.inf])
        upper = np.array([np.inf])
    return _Stacked(A, lower, upper, problem.A_eq.shape[0], problem.A_in.shape[0], bounded)


def _split_duals(problem: QpProblem, stacked: _Stacked, y: np.ndarray) -> dict[str, np.ndarray]:
    n = problem.n
    n_eq, n_in = stacked.n_eq, stacked.n_in
    y_bound = y[n_eq + n_in:n_eq + n_in + stacked.bound_index.size]
    lower = np.zeros(n)
    upper = np.zeros(n)
    lower[stacked.bound_index] = np.maximum(-y_bound, 0.0)
    upper[stacked.bound_index] = np.maximum(y_bound, 0.0)
    return {
        "eq": y[:n_eq].copy(),
        "ineq": y[n_eq:n_eq + n_in].copy(),
        "lower": lower,
        "upper": upper,
    }


def kkt_residual(problem: QpProblem, z: np.ndarray, duals: dict[str, np.ndarray]) -> float:
    """
    Largest of relative stationarity, dual-sign and complementarity errors.
    """
    Hz = problem.H @ z
    At_y = (
        problem.A_eq.T @ duals["eq"]
        + problem.A_in.T @ duals["ineq"]
        + duals["upper"] - duals["lower"]
    )
    stationarity = Hz + problem.g + At_y
    grad_scale = max(1.0, np.max(np.abs(Hz), initial=0.0), np.max(np.abs(problem.g), initial=0.0),
                     np.max(np.abs(At_y), initial=0.0))
    stat = float(np.max(np.abs(stationarity), initial=0.0)) / grad_scale

    y_all = np.concatenate([duals["eq"], duals["ineq"], duals["lower"], duals["upper"]])
    y_scale = max(1.0, float(np.max(np.abs(y_all), initial=0.0)))
    sign = float(np.max(-duals["ineq"], initial=0.0)) / y_scale

    compl_terms = [0.0]
    if problem.A_in.shape[0]:
        slack = np.maximum(problem.b_in - problem.A_in @ z, 0.0)
        compl_terms.append(float(np.max(np.abs(duals["ineq"] * slack))))
    finite_lb = np.isfinite(problem.lb)
    finite_ub = np.isfinite(problem.ub)
    if finite_lb.any():
        gap = np.maximum(z[finite_lb] - problem.lb[finite_lb], 0.0)
        compl_terms.append(float(np.max(duals["lower"][finite_lb] * gap)))
    if finite_ub.any():
        gap = np.maximum(problem.ub[finite_ub] - z[finite_ub], 0.0)
        compl_terms.append(float(np.max(duals["upper"][finite_ub] * gap)))
    compl = max(compl_terms) / grad_scale

    return max(stat, max(sign, 0.0), compl)


def _polish(problem: QpProblem, stacked: _Stacked, z: np.ndarray, y: np.ndarray,
            delta: float = 1e-7, refine_steps: int = 5) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """
    Reduced KKT solve on the active set guessed from (z, y).

    Returns:
        (z, y) in original row units, or None when the factorization fails
    """
    A = stacked.A
    Az = A @ z
    eq_rows = stacked.lower == stacked.upper
    low_rows = ~eq_rows & np.isfinite(stacked.lower) & (Az - stacked.lower < -y)
    up_rows = ~eq_rows & np.isfinite(stacked.upper) & (stacked.upper - Az < y)
    active = np.flatnonzero(eq_rows | low_rows | up_rows)
    rhs_b = np.where(low_rows, stacked.lower, stacked.upper)[active]

    n = problem.n
    A_act = A[active]
    m = active.size
    H = sparse.csc_matrix(problem.H)
    kkt = sparse.bmat([[H, A_act.T], [A_act, None]], format="csc")
    reg = sparse.block_diag([delta * sparse.eye(n), -delta * sparse.eye(m)], format="csc")
    rhs = np.concatenate([-problem.g, rhs_b])

    try:
        factor = spla.splu((kkt + reg).tocsc())
        sol = factor.solve(rhs)
        for _ in range(refine_steps):
            sol = sol + factor.solve(rhs - kkt @ sol)
    except (RuntimeError, ValueError) as e:
        logger.debug(f"Active-set polish failed: {e}")
        return None
    if not np.all(np.isfinite(sol)):
        return None

    y_new = np.zeros(A.shape[0])
    y_new[active] = sol[n:]
    return sol[:n], y_new


_STATUS_MAP = {
    "solved": QpStatus.OPTIMAL,
    "solved inaccurate": QpStatus.INACCURATE,
    "maximum iterations reached": QpStatus.MAX_ITER,
    "primal infeasible": QpStatus.INFEASIBLE,
    "primal infeasible inaccurate": QpStatus.INFEASIBLE,
    "dual infeasible": QpStatus.INFEASIBLE,
    "dual infeasible inaccurate": QpStatus.INFEASIBLE,
}


def solve(problem: QpProblem, warm_start: Optional[np.ndarray] = None,
          settings: Optional[QpSettings] = None) -> QpSolution:
    """
    Solve and certify a QP.

    Args:
        problem: The QP
        warm_start: Optional primal starting point
        settings: Iteration cap and tolerances

    Returns:
        QpSolution; infeasibility and iteration caps are reported in the
        status, never raised

    Raises:
        DimensionMismatch: inconsistent problem data or warm start length
    """
    settings = settings or QpSettings()
    errors = problem.check()
    if errors:
        raise DimensionMismatch("; ".join(errors))
    if warm_start is not None and np.asarray(warm_start).size != problem.n:
        raise DimensionMismatch(f"warm start has length {np.asarray(warm_start).size}, expected {problem.n}")

    if settings.dump_dir:
        dump_problem(problem, settings.dump_dir, tag="last")

    stacked = _stack(problem)
    row_scale = 1.0 / _row_norms(stacked.A)
    D = sparse.diags(row_scale)
    A_scaled = sparse.csc_matrix(D @ stacked.A)
    lower = np.clip(stacked.lower * row_scale, -OSQP_INFTY, OSQP_INFTY)
    upper = np.clip(stacked.upper * row_scale, -OSQP_INFTY, OSQP_INFTY)

    solver = osqp.OSQP()
    solver.setup(
        P=sparse.triu(problem.H, format="csc"),
        q=problem.g,
        A=A_scaled,
        l=lower,
        u=upper,
        max_iter=settings.max_iter,
        eps_abs=settings.eps_abs,
        eps_rel=settings.eps_rel,
        polish=settings.polish,
        adaptive_rho_interval=25,
        warm_start=True,
        verbose=False,
    )
    if warm_start is not None:
        solver.warm_start(x=np.asarray(warm_start, dtype=float))
    result = solver.solve()

    status = _STATUS_MAP.get(result.info.status, QpStatus.MAX_ITER)
    iterations = int(result.info.iter)
    n = problem.n

    if status == QpStatus.INFEASIBLE or result.x is None or not np.all(np.isfinite(result.x)):
        logger.debug(f"QP backend status: {result.info.status}")
        return QpSolution(
            z=np.full(n, np.nan),
            duals={"eq": np.zeros(stacked.n_eq), "ineq": np.zeros(stacked.n_in),
                   "lower": np.zeros(n), "upper": np.zeros(n)},
            status=QpStatus.INFEASIBLE if status == QpStatus.INFEASIBLE else QpStatus.MAX_ITER,
            kkt_residual=np.inf,
            primal_violation=np.inf,
            iterations=iterations,
            objective=np.nan,
        )

    z = np.asarray(result.x, dtype=float)
    y = np.asarray(result.y, dtype=float) * row_scale
    duals = _split_duals(problem, stacked, y)
    kkt = kkt_residual(problem, z, duals)
    violation = validate(problem, z, settings.feas_tol)["worst_violation"]
    polished = getattr(result.info, "status_polish", 0) == 1

    needs_polish = (
        settings.polish
        and status in (QpStatus.OPTIMAL, QpStatus.INACCURATE)
        and not polished
        and (kkt > settings.kkt_tol or violation > settings.feas_tol)
    )
    if needs_polish:
        candidate = _polish(problem, stacked, z, y)
        if candidate is not None:
            z_p, y_p = candidate
            duals_p = _split_duals(problem, stacked, y_p)
            kkt_p = kkt_residual(problem, z_p, duals_p)
            violation_p = validate(problem, z_p, settings.feas_tol)["worst_violation"]
            if max(kkt_p, violation_p) < max(kkt, violation):
                z, duals, kkt, violation, polished = z_p, duals_p, kkt_p, violation_p, True

    if status in (QpStatus.OPTIMAL, QpStatus.INACCURATE):
        certified = kkt <= settings.kkt_tol and violation <= settings.feas_tol
        status = QpStatus.OPTIMAL if certified else QpStatus.INACCURATE

    logger.debug(
        f"QP n={n} status={status.value} iter={iterations} kkt={kkt:.2e} "
        f"viol={violation:.2e} polished={polished}"
    )
    return QpSolution(
        z=z,
        duals=duals,
        status=status,
        kkt_residual=float(kkt),
        primal_violation=float(violation),
        iterations=iterations,
        objective=objective(problem, z),
        polished=polished,
    )


def dump_problem(problem: QpProblem, directory: str | Path, tag: str) -> Path:
    """Write the problem as Matrix Market files under directory/tag/."""
    target = Path(directory) / tag
    target.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(target / "H.mtx"), sparse.coo_matrix(problem.H))
    scipy.io.mmwrite(str(target / "A_eq.mtx"), sparse.coo_matrix(problem.A_eq))
    scipy.io.mmwrite(str(target / "A_in.mtx"), sparse.coo_matrix(problem.A_in))
    for name in ("g", "b_eq", "b_in", "lb", "ub"):
        vector = np.clip(getattr(problem, name), -OSQP_INFTY, OSQP_INFTY)
        scipy.io.mmwrite(str(target / f"{name}.mtx"), vector.reshape(-1, 1))
    return target
