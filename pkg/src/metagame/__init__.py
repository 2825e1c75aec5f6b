"""Population meta-games among advisor models.

Core layers:

* :mod:`metagame.games`: finite base games, mixed strategies, payoffs.
* :mod:`metagame.scenarios`: the example-game library and canonical setups.
* :mod:`metagame.model`: populations, meta-actions, advisor utilities.
* :mod:`metagame.oneshot`: best responses and equilibrium certification.
* :mod:`metagame.feasibility`: payoff vertices, target decomposition, minmax.
* :mod:`metagame.protocol`: the repeated-game review/punishment machine.
* :mod:`metagame.sim`: repeated and finite-population simulation harness.
* :mod:`metagame.cli`: command-line entry point.
"""

from .errors import (
    BudgetExceededError,
    InfeasibleTargetError,
    InvalidProfileError,
    MetagameError,
    NotIndividuallyRationalError,
    NotSingleRoleError,
    UndefinedAverageError,
    ValidationError,
)
from .games import BaseGame, MixedStrategy, StrategyProfile, expected_payoff
from .model import (
    AggregateTable,
    InstructionProfile,
    MetaAction,
    MetaProfile,
    Population,
    aggregate_mass,
    average_utility,
    llm_utility,
    reduce_role_homogeneous,
)
from .scenarios import make_scenario, scenario_population

__version__ = "0.1.0"

__all__ = [
    "AggregateTable",
    "BaseGame",
    "BudgetExceededError",
    "InfeasibleTargetError",
    "InstructionProfile",
    "InvalidProfileError",
    "MetaAction",
    "MetaProfile",
    "MetagameError",
    "MixedStrategy",
    "NotIndividuallyRationalError",
    "NotSingleRoleError",
    "Population",
    "StrategyProfile",
    "UndefinedAverageError",
    "ValidationError",
    "aggregate_mass",
    "average_utility",
    "expected_payoff",
    "llm_utility",
    "make_scenario",
    "reduce_role_homogeneous",
    "scenario_population",
    "__version__",
]
