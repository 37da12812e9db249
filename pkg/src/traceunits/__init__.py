"""Online recurrent learning with recurrent trace units.

Forward-mode sensitivity traces make exact recurrent gradients available at
every step for a family of 2x2-block diagonal recurrences, at cost linear in
the parameter count. The package bundles the recurrent layers, hand-derived
readout layers, gradient oracles, small POMDP environments, an online TD
prediction agent, a trace-integrated PPO agent, and a CLI experiment runner.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
