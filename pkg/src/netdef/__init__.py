"""Entity-based reinforcement learning for autonomous network defence.

A graph-based attacker/defender game, an entity-oriented environment
interface, a Transformer policy that handles any node count, a PPO trainer,
and an experiment harness for cross-size generalisation studies.
"""


class NumericalFault(RuntimeError):
    """Raised when a forward/backward pass or loss produces non-finite values."""


class UnsupportedEvaluation(RuntimeError):
    """Raised when a checkpoint cannot be evaluated at the requested network size."""


__all__ = ["NumericalFault", "UnsupportedEvaluation"]
__version__ = "0.1.0"
