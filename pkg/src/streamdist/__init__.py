"""streamdist: distributed stochastic approximation from fast data streams.

A simulator and capacity planner for mini-batched stochastic optimization
over networks of compute nodes fed by a common sample stream, covering
exact-averaging and consensus-based gradient methods, streaming top-
eigenvector estimation, their centralized/local baselines, and the
streaming/processing/communications rate model that ties them together.
"""

__version__ = "0.1.0"

from .losses import LossModel, SpectrumSpec
from .network import NetworkModel, build_topology
from .rates import BoundEvaluator, PlannerReport, SystemRates
from .records import RunRecord
from .streams import SplitPlan, make_stream

__all__ = [
    "BoundEvaluator",
    "LossModel",
    "NetworkModel",
    "PlannerReport",
    "RunRecord",
    "SpectrumSpec",
    "SplitPlan",
    "SystemRates",
    "__version__",
    "build_topology",
    "make_stream",
]
