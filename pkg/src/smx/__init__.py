"""SMC planning as a policy-improvement operator, with an expert-iteration trainer.

Modules: ``core`` (numerics and RNG), ``envs`` (toy environments), ``nets``
(MLPs with explicit gradients), ``smc`` (the particle planner), ``mcts``
(PUCT baseline), ``exit`` (expert iteration), ``oracle`` (exact ground
truth) and ``cli`` (the ``smx`` command).
"""

from .core import InvalidArgument, PolicyDistribution, RngStream
from .envs import make_env
from .mcts import PuctConfig
from .smc import SmcConfig, plan

__all__ = ["InvalidArgument", "PolicyDistribution", "RngStream", "make_env", "PuctConfig", "SmcConfig", "plan"]
__version__ = "0.1.0"
