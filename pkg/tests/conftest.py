import numpy as np
import pytest

from qarrow.operators import PAULI, DensityMatrix, basis_state, pauli_on_qubit
from qarrow.trajectory import ChannelConfig, TrajectoryConfig


def qubit_config(omega=0.0, dt=1e-3, T=1.0, tau=1.0, state="0", **kw):
    """Single qubit, H = (omega/2) X, sigma_z measured."""
    return TrajectoryConfig(
        hamiltonian=0.5 * omega * PAULI["X"],
        channels=[ChannelConfig(pauli_on_qubit("Z", 0, 1), tau)],
        initial_state=DensityMatrix.from_pure(basis_state(state)),
        dt=dt,
        total_time=T,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
