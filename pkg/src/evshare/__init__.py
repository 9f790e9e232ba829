"""Online energy sharing between EV charging stations.

Drift-plus-penalty control with virtual battery and shedding queues,
solved per slot by a truncated ADMM coordinator, plus greedy, MPC and
offline reference controllers and a simulation harness.
"""

__version__ = "0.1.0"
