import numpy as np
import pytest

from sttmpc.config import load_config, shipped_config_path
from sttmpc.geometry import Box, ContractiveTemplate
from sttmpc.params import ParamVector
from sttmpc.simulation import ClosedLoopConfig
from sttmpc.tube_mpc import MpcConfig

# Second-order benchmark values, typed in independently of the shipped file
SEC5_A = np.array([[0.6, 0.2], [-0.1, 0.4]])
SEC5_B = np.array([[1.0], [0.6]])
SEC5_THETA0 = np.array([0.57, 0.17, -0.12, 0.42, 0.95, 0.65])
SEC5_K = np.array([[-0.426, -0.290]])
SEC5_X0 = np.array([6.0, 3.0])


@pytest.fixture(scope="session")
def sec5():
    """The shipped benchmark configuration (template computed once)."""
    cfg = load_config(shipped_config_path())
    cfg.template()
    return cfg


@pytest.fixture(scope="session")
def sec5_mpc(sec5):
    return sec5.mpc_config()


def scalar_mpc(N=3, sigma=0.0, lam=0.9, **kw):
    """|x| <= 1, |u| <= 1 on a scalar plant with template T = (1; -1)."""
    T = np.array([[1.0], [-1.0]])
    F = np.array([[1.0], [-1.0], [0.0], [0.0]])
    G = np.array([[0.0], [0.0], [1.0], [-1.0]])
    return MpcConfig(N, np.eye(1), np.eye(1), np.zeros((1, 1)), F, G,
                     ContractiveTemplate(T, lam),
                     Box(np.zeros(1), np.full(1, 3.0 * sigma)), sigma, **kw)


def scalar_closed_loop(a=0.5, b=1.0, half_width=0.0, x0=0.5, sigma=0.0,
                       **kw):
    theta = ParamVector(np.array([a, b]), 1, 1)
    mpc = kw.pop("mpc", None) or scalar_mpc(sigma=sigma)
    return ClosedLoopConfig(mpc, theta, theta, Box(theta.theta, half_width),
                            np.array([x0]), **kw)


# one line per acceptance criterion, printed after the test run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
