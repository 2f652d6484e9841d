"""Self-contained dense LP and QP solvers."""
from .common import (INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED,
                     SolveStatus)
from .lp import LpProblem, solve_lp
from .qp import QpProblem, QpSettings, ruiz_scaling, solve_qp

__all__ = ["LpProblem", "QpProblem", "QpSettings", "SolveStatus", "solve_lp",
           "solve_qp", "ruiz_scaling", "OPTIMAL", "INFEASIBLE", "UNBOUNDED", "ITERATION_LIMIT"]
