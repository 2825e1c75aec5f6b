"""Scenario library: the example games, their canonical populations, and
the named profiles used throughout the tests and the CLI.

Scenarios:

* ``pd``: two-role prisoner's dilemma with payoffs X (mutual cooperation),
  Y (mutual defection), Z (sucker), ordered 0 > X > Y > Z.
* ``majority3``: three roles pick 0/1; 100 is split among the majority roles.
* ``bounded10``: ten symmetric roles over a common action set; roles whose
  action is chosen by exactly four roles split a prize of 100.
* ``heist``: planner / burglar / driver each name another role; a role named
  by both others is convicted (-2.1) and the namers get leniency (+1);
  otherwise everyone walks (0).
"""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from .errors import ValidationError
from .games import BaseGame, MixedStrategy, register_payoff_rule
from .model import InstructionProfile, MetaAction, MetaProfile, Population

HEIST_ROLES = ("planner", "burglar", "driver")
CONVICTION_PAYOFF = -2.1
LENIENCY_PAYOFF = 1.0


def _pd_game(X: float = -2.0, Y: float = -4.0, Z: float = -5.0) -> BaseGame:
    if not (0 > X > Y > Z):
        raise ValidationError(
            f"pd requires 0 > X > Y > Z, got X={X}, Y={Y}, Z={Z}"
        )
    actions = (("C", "D"), ("C", "D"))
    table = {
        ("C", "C"): (X, X),
        ("D", "D"): (Y, Y),
        ("C", "D"): (Z, 0.0),
        ("D", "C"): (0.0, Z),
    }
    return BaseGame(actions=actions, table=table)


def _majority3_game() -> BaseGame:
    actions = (("0", "1"), ("0", "1"), ("0", "1"))
    table = {}
    for profile in ((a, b, c) for a in "01" for b in "01" for c in "01"):
        counts = Counter(profile)
        majority = max(counts, key=lambda a: counts[a])
        winners = [i for i, a in enumerate(profile) if a == majority]
        prize = 100.0 / len(winners)
        table[profile] = tuple(
            prize if i in winners else 0.0 for i in range(3)
        )
    return BaseGame(actions=actions, table=table)


def _bounded_rule(n_roles: int = 10, group_size: int = 4, prize: float = 100.0):
    def payoff(profile):
        counts = Counter(profile)
        winners = [i for i, a in enumerate(profile) if counts[a] == group_size]
        if not winners:
            return (0.0,) * n_roles
        share = prize / len(winners)
        win = set(winners)
        return tuple(share if i in win else 0.0 for i in range(n_roles))

    return payoff


register_payoff_rule("bounded_group_prize", _bounded_rule)


def _bounded10_game(n_actions: int = 100) -> BaseGame:
    if n_actions < 5:
        raise ValidationError("bounded10 needs at least 5 actions")
    labels = tuple(str(i + 1) for i in range(n_actions))
    return BaseGame.from_rule(
        (labels,) * 10, "bounded_group_prize", n_roles=10, group_size=4, prize=100.0
    )


def _heist_game() -> BaseGame:
    # Each role names one of the other two, ordered by the named role's index.
    actions = tuple(
        tuple(HEIST_ROLES[r] for r in range(3) if r != i) for i in range(3)
    )
    table = {}
    for profile in (
        (a, b, c) for a in actions[0] for b in actions[1] for c in actions[2]
    ):
        named = Counter(profile)
        convicted = [r for r, name in enumerate(HEIST_ROLES) if named[name] == 2]
        if convicted:
            (culprit,) = convicted
            table[profile] = tuple(
                CONVICTION_PAYOFF if i == culprit else LENIENCY_PAYOFF
                for i in range(3)
            )
        else:
            table[profile] = (0.0, 0.0, 0.0)
    return BaseGame(actions=actions, table=table)


_SCENARIOS = {
    "pd": _pd_game,
    "majority3": _majority3_game,
    "bounded10": _bounded10_game,
    "heist": _heist_game,
}


def make_scenario(name: str, **params) -> BaseGame:
    """Build a library game by name (``pd``, ``majority3``, ``bounded10``, ``heist``)."""
    try:
        builder = _SCENARIOS[name]
    except KeyError:
        raise ValidationError(
            f"unknown scenario {name!r}; choose from {sorted(_SCENARIOS)}"
        ) from None
    return builder(**params)


def scenario_population(name: str, **params) -> Population:
    """Canonical population for a library game."""
    if name == "pd":
        p = params.get("p", 0.9)
        return Population(((p, 1.0 - p), (p, 1.0 - p)))
    if name == "majority3":
        p = params.get("p", 0.9)
        return Population(((p, 1.0 - p),) * 3)
    if name == "bounded10":
        # Advisor 0 governs roles 1..5, advisor 1 roles 6..9, advisor 2 role 10.
        rows = []
        for i in range(10):
            owner = 0 if i < 5 else (1 if i < 9 else 2)
            rows.append(tuple(1.0 if j == owner else 0.0 for j in range(3)))
        return Population(tuple(rows))
    if name == "heist":
        # Each advisor has a primary role (80%) plus 10% of each other role.
        rows = []
        for i in range(3):
            rows.append(tuple(0.8 if j == i else 0.1 for j in range(3)))
        return Population(tuple(rows))
    raise ValidationError(f"no canonical population for scenario {name!r}")


def blame_cycle() -> tuple[str, ...]:
    """Planner names burglar, burglar names driver, driver names planner."""
    return ("burglar", "driver", "planner")


def heist_blame_profile() -> MetaProfile:
    """All three advisors instruct the blame cycle."""
    return MetaProfile.from_pure([blame_cycle()] * 3)


def heist_punishment(punished: int) -> tuple[MetaAction | None, ...]:
    """Punishment against one heist advisor: the other two send every burglar
    and driver client they govern after the planner-primary target's role.

    All burglar and driver clients of the punishers name the punished
    advisor's primary role; their remaining clients keep the blame-cycle
    instruction.
    """
    target_role = HEIST_ROLES[punished]
    cycle = blame_cycle()
    out: list[MetaAction | None] = []
    for j in range(3):
        if j == punished:
            out.append(None)
            continue
        # Roles other than the target's own can name it; the punishers' clients
        # in the target role itself keep the blame-cycle instruction.
        labels = [
            target_role if i != punished else cycle[i] for i in range(3)
        ]
        out.append(MetaAction.from_pure(labels))
    return tuple(out)


def pd_profile(llm1: str, llm2: str) -> MetaProfile:
    """Role-homogeneous PD meta-profile from two-letter action strings like 'CC'."""
    return MetaProfile.from_pure([tuple(llm1), tuple(llm2)])


def bounded10_equilibrium_profile(game: BaseGame) -> MetaProfile:
    """The coordination profile of the ten-role scenario.

    The large advisor draws an action x uniformly, puts its first four roles
    on x and its fifth on the cyclically next action; the medium advisor puts
    all four of its roles on a uniform y; the small advisor plays a uniform z.
    Roles an advisor does not govern are padded with the drawn action.
    """
    labels = game.actions[0]
    n = len(labels)
    large = []
    medium = []
    small = []
    for idx, a in enumerate(labels):
        nxt = labels[(idx + 1) % n]
        large.append([a, a, a, a, nxt] + [a] * 5)
        medium.append([a] * 10)
        small.append([a] * 10)
    return MetaProfile(
        (
            MetaAction.uniform_over_pure(large),
            MetaAction.uniform_over_pure(medium),
            MetaAction.uniform_over_pure(small),
        )
    )


def uniform_coordination_action(game: BaseGame) -> MetaAction:
    """Mix uniformly between the all-0 and all-1 coordinated instructions."""
    m = game.role_count
    return MetaAction.uniform_over_pure([("0",) * m, ("1",) * m])


def split_instruction(
    game: BaseGame, splits: Sequence[dict[str, float]]
) -> InstructionProfile:
    """Instruction giving each role a within-role split over pure actions."""
    entries = []
    for i, split in enumerate(splits):
        entries.append(
            tuple(
                (MixedStrategy.point_mass(i, a), frac)
                for a, frac in split.items()
            )
        )
    return InstructionProfile(tuple(entries))
