"""Parameter vectors theta <-> system matrices (A, B)."""
from dataclasses import dataclass

import numpy as np


def theta_dim(d_x, d_u):
    return d_x * (d_x + d_u)


def split_theta(theta, d_x, d_u):
    """Return ``(A, B)`` from a flat parameter vector.

    The layout is ``[A row-major | B row-major]``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != theta_dim(d_x, d_u):
        raise ValueError(
            f"theta has length {theta.shape[-1]}, expected {theta_dim(d_x, d_u)}")
    n_a = d_x * d_x
    A = theta[..., :n_a].reshape(theta.shape[:-1] + (d_x, d_x))
    B = theta[..., n_a:].reshape(theta.shape[:-1] + (d_x, d_u))
    return A, B


def join_theta(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise ValueError(f"incompatible shapes A{A.shape}, B{B.shape}")
    return np.concatenate([A.ravel(), B.ravel()])


def closed_loop(theta, K, d_x, d_u):
    """Phi(theta) = A(theta) + B(theta) K, vectorised over leading axes."""
    A, B = split_theta(theta, d_x, d_u)
    return A + B @ np.asarray(K, dtype=float)


def param_distance(theta1, theta2, d_x, d_u):
    """max(||A1 - A2||_F, ||B1 - B2||_F)."""
    dA, dB = split_theta(np.asarray(theta1) - np.asarray(theta2), d_x, d_u)
    return max(np.linalg.norm(dA), np.linalg.norm(dB))


@dataclass(frozen=True)
class ParamVector:
    """A model parameter together with the dimensions needed to unpack it."""

    theta: np.ndarray
    d_x: int
    d_u: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        if theta.size != theta_dim(self.d_x, self.d_u):
            raise ValueError(
                f"theta has length {theta.size}, expected "
                f"{theta_dim(self.d_x, self.d_u)}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_matrices(cls, A, B):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        return cls(join_theta(A, B), A.shape[0], B.shape[1])

    @property
    def A(self):
        return split_theta(self.theta, self.d_x, self.d_u)[0]

    @property
    def B(self):
        return split_theta(self.theta, self.d_x, self.d_u)[1]

    def phi(self, K):
        return self.A + self.B @ np.asarray(K, dtype=float)

    def distance(self, other):
        other = other.theta if isinstance(other, ParamVector) else other
        return param_distance(self.theta, other, self.d_x, self.d_u)
