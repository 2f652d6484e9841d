from dataclasses import dataclass, field
from typing import Optional

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"


@dataclass
class SolveStatus:
    """Outcome of an LP or QP solve.

    ``x`` is the primal point (the last iterate when not optimal), and the
    residuals are measured on the unscaled problem in the infinity norm.
    """

    status: str
    objective: float
    x: Optional[np.ndarray]
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    iterations: int = 0
    y: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == OPTIMAL


def as_matrix(M, n_cols, name):
    """Coerce an optional constraint block to a 2-D float array."""
    if M is None:
        return np.zeros((0, n_cols))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != n_cols:
        raise ValueError(f"{name} has {M.shape[1]} columns, expected {n_cols}")
    return M


def as_vector(v, n_rows, name):
    if v is None:
        v = np.zeros(0)
    v = np.asarray(v, dtype=float).ravel()
    if v.size != n_rows:
        raise ValueError(f"{name} has length {v.size}, expected {n_rows}")
    return v
