"""Self-tuning tube MPC: adaptive tube-based MPC with regret benchmarking."""

__version__ = "0.1.0"
