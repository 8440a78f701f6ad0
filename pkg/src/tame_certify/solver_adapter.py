"""
Narrow interface between the convex programs and cvxpy's conic solvers.

The backing solver is chosen by the TAME_CERTIFY_SOLVER environment
variable; each retry attempt tightens the solver tolerances.
"""

import logging
import os
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Literal

import cvxpy as cp

from .errors import SolverFailure

logger = logging.getLogger(__name__)

DEFAULT_SOLVER = "CLARABEL"

Status = Literal["solved", "inaccurate", "failed"]

# tolerance settings per attempt; attempt 0 uses the first entry
_TOLERANCES: Dict[str, List[Dict[str, Any]]] = {
    "CLARABEL": [
        {"tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9, "tol_feas": 1e-9, "max_iter": 200},
        {"tol_gap_abs": 1e-11, "tol_gap_rel": 1e-11, "tol_feas": 1e-11, "max_iter": 400},
        {"tol_gap_abs": 1e-12, "tol_gap_rel": 1e-12, "tol_feas": 1e-12, "max_iter": 800},
    ],
    "SCS": [
        {"eps_abs": 1e-7, "eps_rel": 1e-7, "max_iters": 100000},
        {"eps_abs": 1e-9, "eps_rel": 1e-9, "max_iters": 400000},
        {"eps_abs": 1e-10, "eps_rel": 1e-10, "max_iters": 1000000},
    ],
    "MOSEK": [
        {"mosek_params": {"MSK_DPAR_INTPNT_CO_TOL_REL_GAP": 1e-10}},
        {"mosek_params": {"MSK_DPAR_INTPNT_CO_TOL_REL_GAP": 1e-12}},
        {"mosek_params": {"MSK_DPAR_INTPNT_CO_TOL_REL_GAP": 1e-14}},
    ],
}


def _get_solver_name() -> str:
    """
    Return the selected conic solver. Defaults to CLARABEL unless overridden
    via the TAME_CERTIFY_SOLVER environment variable.
    """
    name = os.environ.get("TAME_CERTIFY_SOLVER", DEFAULT_SOLVER).strip().upper()
    if name not in _TOLERANCES:
        logger.warning("Unknown solver %r, falling back to %s", name, DEFAULT_SOLVER)
        name = DEFAULT_SOLVER
    return name


@dataclass(frozen=True)
class AdapterResult:
    status: Status
    solver: str
    seconds: float
    raw_status: str


class ConicAdapter:
    """Solve a prepared cvxpy problem with the configured solver."""

    def __init__(self, solver: str = "") -> None:
        self.solver = solver.upper() if solver else _get_solver_name()
        if self.solver not in _TOLERANCES:
            raise ValueError(f"Unsupported solver {self.solver!r}")

    @property
    def max_attempts(self) -> int:
        return len(_TOLERANCES[self.solver])

    def solve(self, problem: cp.Problem, attempt: int = 0) -> AdapterResult:
        """
        Run one solve. Later attempts use tighter tolerances.

        Raises:
            SolverFailure: When the solver raises or the problem is infeasible
        """
        options = _TOLERANCES[self.solver][min(attempt, self.max_attempts - 1)]
        start = time.perf_counter()
        try:
            problem.solve(solver=self.solver, **options)
        except cp.error.SolverError as exc:
            raise SolverFailure(f"{self.solver} failed: {exc}") from exc
        seconds = time.perf_counter() - start

        raw = str(problem.status)
        if raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise SolverFailure(f"{self.solver} reports the program infeasible ({raw})")
        if raw == cp.OPTIMAL:
            status: Status = "solved"
        elif raw == cp.OPTIMAL_INACCURATE:
            status = "inaccurate"
        else:
            status = "failed"
        logger.debug("%s attempt %d: %s in %.2fs", self.solver, attempt, raw, seconds)
        return AdapterResult(status=status, solver=self.solver, seconds=seconds, raw_status=raw)
