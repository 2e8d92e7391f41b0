"""Arrow-of-time statistics and score estimation for continuously monitored qubits."""

__version__ = "0.1.0"
