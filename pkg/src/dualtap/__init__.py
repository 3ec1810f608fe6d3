"""Traffic equilibrium for mixed Beckmann / stable-dynamics networks.

The dual problem is solved by composite mirror descent with an exact
per-edge prox; primal flows are recovered from weighted averages and the
duality gap serves as the stopping certificate.
"""

__version__ = "0.1.0"

from .errors import DualTapError, InputError  # noqa: E402
from .network import (  # noqa: E402
    OD,
    Bpr,
    DemandMatrix,
    EdgeRecord,
    Network,
    StableDynamics,
    build_network,
    validate_reachability,
)
from .shortest_paths import SubgradientOracle, compute_subgradient, dijkstra, dual_value  # noqa: E402
from .solver import EquilibriumReport, RunConfig, solve  # noqa: E402
from .tntp import load_network  # noqa: E402

__all__ = [
    "Bpr", "DemandMatrix", "DualTapError", "EdgeRecord", "EquilibriumReport", "InputError",
    "Network", "OD", "RunConfig", "StableDynamics", "SubgradientOracle", "build_network",
    "compute_subgradient", "dijkstra", "dual_value", "load_network", "solve",
    "validate_reachability",
]
