"""Client populations, meta-actions, and advisor utilities.

The strategic actors are k advisors; advisor j governs a fraction
``shares[i][j]`` of the role-i client population.  A deterministic meta-action
(:class:`InstructionProfile`) tells each governed client what strategy to
play, possibly splitting a role's clients across several strategies.  A
:class:`MetaAction` is a finite-support mixture over instruction profiles.

Because clients are matched into game instances uniformly at random and
governance is independent across roles, an advisor's aggregate utility
factorizes: a role-i client of advisor j plays its own instructed strategy
against the population-average action mass of every other role.
:func:`llm_utility` evaluates that product form exactly;
``tests/oracles.py`` re-derives the same numbers by brute-force enumeration
of governance vectors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import (
    BudgetExceededError,
    InvalidProfileError,
    UndefinedAverageError,
    ValidationError,
)
from .games import BaseGame, MixedStrategy, PROB_TOL

DEFAULT_TERM_BUDGET = 10**7

AGGREGATE_TOL = 1e-9


@dataclass(frozen=True)
class Population:
    """Governance shares: ``shares[i][j]`` is the role-i fraction under advisor j."""

    shares: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(float(p) for p in row) for row in self.shares)
        object.__setattr__(self, "shares", rows)
        if not rows:
            raise ValidationError("population needs at least one role")
        k = len(rows[0])
        if k < 1:
            raise ValidationError("population needs at least one advisor")
        for i, row in enumerate(rows):
            if len(row) != k:
                raise ValidationError("share rows have inconsistent advisor counts")
            for p in row:
                if p < 0.0:
                    raise ValidationError(f"negative share {p} in role {i}")
            if abs(sum(row) - 1.0) > PROB_TOL:
                raise ValidationError(
                    f"role {i} shares sum to {sum(row)}, expected 1"
                )

    @property
    def role_count(self) -> int:
        return len(self.shares)

    @property
    def llm_count(self) -> int:
        return len(self.shares[0])

    def governed_mass(self, j: int) -> float:
        return sum(row[j] for row in self.shares)

    def governed_roles(self, j: int) -> tuple[int, ...]:
        return tuple(i for i, row in enumerate(self.shares) if row[j] > 0.0)

    def is_single_role(self, j: int) -> bool:
        return len(self.governed_roles(j)) <= 1

    def to_dict(self) -> dict:
        return {"shares": [list(row) for row in self.shares]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Population":
        return cls(tuple(tuple(row) for row in doc["shares"]))


@dataclass(frozen=True)
class InstructionProfile:
    """Deterministic meta-action: per role, a split of clients across strategies.

    ``assignments[i]`` lists ``(strategy, fraction)`` pairs; fractions are the
    shares of the advisor's role-i clients receiving each strategy and sum
    to 1.
    """

    assignments: tuple[tuple[tuple[MixedStrategy, float], ...], ...]

    def __post_init__(self):
        canon = []
        for i, entries in enumerate(self.assignments):
            merged: dict[MixedStrategy, float] = {}
            for strat, frac in entries:
                frac = float(frac)
                if strat.role != i:
                    raise ValidationError(
                        f"instruction for role {i} uses a role-{strat.role} strategy"
                    )
                if frac < -PROB_TOL:
                    raise ValidationError(f"negative fraction {frac} in role {i}")
                if frac > 0.0:
                    merged[strat] = merged.get(strat, 0.0) + frac
            total = sum(merged.values())
            if abs(total - 1.0) > PROB_TOL:
                raise ValidationError(
                    f"role-{i} instruction fractions sum to {total}, expected 1"
                )
            canon.append(tuple(sorted(merged.items(), key=lambda kv: kv[0].weights)))
        object.__setattr__(self, "assignments", tuple(canon))
        object.__setattr__(self, "_mass_cache", {})

    @property
    def role_count(self) -> int:
        return len(self.assignments)

    @classmethod
    def pure(cls, profile: Sequence[str]) -> "InstructionProfile":
        """Every role-i client plays the single action ``profile[i]``."""
        return cls(
            tuple(
                ((MixedStrategy.point_mass(i, a), 1.0),)
                for i, a in enumerate(profile)
            )
        )

    @classmethod
    def homogeneous(cls, strategies: Sequence[MixedStrategy]) -> "InstructionProfile":
        """All role-i clients receive the same (possibly mixed) strategy."""
        return cls(tuple(((s, 1.0),) for s in strategies))

    def action_mass(self, role: int) -> dict[str, float]:
        """Induced action distribution of a random role-``role`` client."""
        cache = self._mass_cache  # type: ignore[attr-defined]
        row = cache.get(role)
        if row is None:
            row = {}
            for strat, frac in self.assignments[role]:
                for a, w in strat.weights:
                    row[a] = row.get(a, 0.0) + frac * w
            cache[role] = row
        return row

    @property
    def pure_profile(self) -> tuple[str, ...] | None:
        """The pure action profile, if every role is a point mass on one action."""
        cache = self._mass_cache  # type: ignore[attr-defined]
        if "pure" not in cache:
            out = []
            for entries in self.assignments:
                if len(entries) != 1:
                    out = None
                    break
                a = entries[0][0].pure_action
                if a is None:
                    out = None
                    break
                out.append(a)
            cache["pure"] = tuple(out) if out is not None else None
        return cache["pure"]

    @property
    def sort_key(self):
        return tuple(
            tuple((s.weights, f) for s, f in entries) for entries in self.assignments
        )

    def to_dict(self) -> list:
        return [
            [{"weights": dict(s.weights), "fraction": f} for s, f in entries]
            for entries in self.assignments
        ]

    @classmethod
    def from_dict(cls, doc: Sequence) -> "InstructionProfile":
        return cls(
            tuple(
                tuple(
                    (MixedStrategy.from_weights(i, e["weights"]), e["fraction"])
                    for e in entries
                )
                for i, entries in enumerate(doc)
            )
        )


@dataclass(frozen=True)
class MetaAction:
    """Finite-support mixture over instruction profiles."""

    outcomes: tuple[tuple[InstructionProfile, float], ...]

    def __post_init__(self):
        merged: dict[InstructionProfile, float] = {}
        for prof, prob in self.outcomes:
            prob = float(prob)
            if prob < -PROB_TOL:
                raise ValidationError(f"negative outcome probability {prob}")
            if prob > 0.0:
                merged[prof] = merged.get(prof, 0.0) + prob
        total = sum(merged.values())
        if abs(total - 1.0) > PROB_TOL:
            raise ValidationError(f"outcome probabilities sum to {total}, expected 1")
        roles = {p.role_count for p in merged}
        if len(roles) > 1:
            raise ValidationError("outcomes disagree on role count")
        object.__setattr__(
            self,
            "outcomes",
            tuple(sorted(merged.items(), key=lambda kv: kv[0].sort_key)),
        )

    @property
    def role_count(self) -> int:
        return self.outcomes[0][0].role_count

    @classmethod
    def deterministic(cls, instruction: InstructionProfile) -> "MetaAction":
        return cls(((instruction, 1.0),))

    @classmethod
    def from_pure(cls, profile: Sequence[str]) -> "MetaAction":
        return cls.deterministic(InstructionProfile.pure(profile))

    @classmethod
    def uniform_over_pure(cls, profiles: Iterable[Sequence[str]]) -> "MetaAction":
        profs = [InstructionProfile.pure(p) for p in profiles]
        w = 1.0 / len(profs)
        return cls(tuple((p, w) for p in profs))

    def is_role_homogeneous(self) -> bool:
        return all(prof.pure_profile is not None for prof, _ in self.outcomes)

    def to_dict(self) -> list:
        return [
            {"probability": prob, "instruction": prof.to_dict()}
            for prof, prob in self.outcomes
        ]

    @classmethod
    def from_dict(cls, doc: Sequence) -> "MetaAction":
        return cls(
            tuple(
                (InstructionProfile.from_dict(e["instruction"]), e["probability"])
                for e in doc
            )
        )


@dataclass(frozen=True)
class MetaProfile:
    """One meta-action per advisor."""

    actions: tuple[MetaAction, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if not self.actions:
            raise ValidationError("meta-profile needs at least one advisor")
        roles = {a.role_count for a in self.actions}
        if len(roles) > 1:
            raise ValidationError("advisors disagree on role count")

    @property
    def llm_count(self) -> int:
        return len(self.actions)

    @classmethod
    def from_pure(cls, profiles: Sequence[Sequence[str]]) -> "MetaProfile":
        return cls(tuple(MetaAction.from_pure(p) for p in profiles))

    def replace(self, j: int, action: MetaAction) -> "MetaProfile":
        acts = list(self.actions)
        acts[j] = action
        return MetaProfile(tuple(acts))

    def to_dict(self) -> list:
        return [a.to_dict() for a in self.actions]

    @classmethod
    def from_dict(cls, doc: Sequence) -> "MetaProfile":
        return cls(tuple(MetaAction.from_dict(a) for a in doc))


@dataclass(frozen=True)
class AggregateTable:
    """Public per-(role, action) population masses, rows in game action order."""

    masses: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(float(v) for v in row) for row in self.masses)
        object.__setattr__(self, "masses", rows)
        for i, row in enumerate(rows):
            if abs(sum(row) - 1.0) > AGGREGATE_TOL:
                raise ValidationError(
                    f"role-{i} aggregate masses sum to {sum(row)}, expected 1"
                )

    def mass(self, role: int, action_index: int) -> float:
        return self.masses[role][action_index]

    def max_diff(self, other: "AggregateTable") -> float:
        if len(self.masses) != len(other.masses):
            raise ValidationError("aggregate tables have different role counts")
        worst = 0.0
        for row_a, row_b in zip(self.masses, other.masses):
            if len(row_a) != len(row_b):
                raise ValidationError("aggregate tables have different action counts")
            for a, b in zip(row_a, row_b):
                d = abs(a - b)
                if d > worst:
                    worst = d
        return worst

    def to_dict(self) -> list:
        return [list(row) for row in self.masses]


def _iter_realizations(
    pop: Population, profile: MetaProfile | Sequence[InstructionProfile]
):
    """Yield ``(weight, joint realization)`` pairs for a meta-profile."""
    if isinstance(profile, MetaProfile):
        if profile.llm_count != pop.llm_count:
            raise ValidationError(
                f"profile has {profile.llm_count} advisors, population has {pop.llm_count}"
            )
        for combo in itertools.product(*(a.outcomes for a in profile.actions)):
            w = 1.0
            for _, prob in combo:
                w *= prob
            yield w, tuple(prof for prof, _ in combo)
        return
    realization = tuple(profile)
    if len(realization) != pop.llm_count:
        raise ValidationError(
            f"realization has {len(realization)} advisors, population has {pop.llm_count}"
        )
    yield 1.0, realization


def aggregate_mass(
    game: BaseGame,
    pop: Population,
    realization: Sequence[InstructionProfile],
) -> AggregateTable:
    """Public aggregate action masses induced by one realized instruction per advisor."""
    if len(realization) != pop.llm_count:
        raise ValidationError("one realized instruction per advisor is required")
    if pop.role_count != game.role_count:
        raise ValidationError("population and game disagree on role count")
    rows = []
    for i in range(game.role_count):
        labels = game.actions[i]
        index = {a: idx for idx, a in enumerate(labels)}
        row = [0.0] * len(labels)
        for q in range(pop.llm_count):
            p = pop.shares[i][q]
            if p <= 0.0:
                continue
            for a, mass in realization[q].action_mass(i).items():
                try:
                    row[index[a]] += p * mass
                except KeyError:
                    raise InvalidProfileError(
                        f"advisor {q} instructs role {i} to play unknown "
                        f"action {a!r}"
                    ) from None
        rows.append(tuple(row))
    return AggregateTable(tuple(rows))


def _role_value(
    game: BaseGame,
    role: int,
    strategy: MixedStrategy,
    tots: Sequence[dict[str, float]],
    paycache: dict,
    counter: list,
    budget: float,
) -> float:
    """Expected payoff of a role-``role`` client playing ``strategy`` while every
    other role's action is drawn from the population aggregate."""
    per_role: list = []
    for r in range(game.role_count):
        if r == role:
            per_role.append(strategy.weights)
        else:
            per_role.append(tuple(tots[r].items()))
    terms = math.prod(len(x) for x in per_role)
    counter[0] += terms
    if counter[0] > budget:
        raise BudgetExceededError(counter[0], budget)
    total = 0.0
    for combo in itertools.product(*per_role):
        w = 1.0
        for _, wi in combo:
            w *= wi
        key = tuple(label for label, _ in combo)
        pay = paycache.get(key)
        if pay is None:
            pay = game.payoff(key)
            paycache[key] = pay
        total += w * pay[role]
    return total


def _realization_utilities(
    game: BaseGame,
    pop: Population,
    realization: Sequence[InstructionProfile],
    paycache: dict,
    counter: list,
    budget: float,
) -> list[float]:
    m = game.role_count
    k = pop.llm_count
    shares = pop.shares

    # Fast path: every instruction is pure and, per role, all governing
    # advisors prescribe the same action, so every instance plays one profile.
    pures = [inst.pure_profile for inst in realization]
    if None not in pures:
        joint: list[str] = []
        for i in range(m):
            row = shares[i]
            ai = None
            for q in range(k):
                if row[q] > 0.0:
                    cand = pures[q][i]
                    if ai is None:
                        ai = cand
                    elif cand != ai:
                        ai = None
                        break
            if ai is None:
                break
            joint.append(ai)
        else:
            key = tuple(joint)
            pay = paycache.get(key)
            if pay is None:
                pay = game.payoff(key)
                paycache[key] = pay
            counter[0] += 1
            if counter[0] > budget:
                raise BudgetExceededError(counter[0], budget)
            return [
                sum(shares[i][j] * pay[i] for i in range(m) if shares[i][j] > 0.0)
                for j in range(k)
            ]

    tots: list[dict[str, float]] = []
    for i in range(m):
        row_masses: dict[str, float] = {}
        for q in range(k):
            p = shares[i][q]
            if p <= 0.0:
                continue
            for a, mass in realization[q].action_mass(i).items():
                row_masses[a] = row_masses.get(a, 0.0) + p * mass
        tots.append(row_masses)
    out = [0.0] * k
    for j in range(k):
        inst = realization[j]
        if inst.role_count != m:
            raise ValidationError(
                f"advisor {j} instruction covers {inst.role_count} roles, game has {m}"
            )
        uj = 0.0
        for i in range(m):
            pij = shares[i][j]
            if pij <= 0.0:
                continue
            for strat, frac in inst.assignments[i]:
                uj += pij * frac * _role_value(
                    game, i, strat, tots, paycache, counter, budget
                )
        out[j] = uj
    return out


def llm_utility(
    game: BaseGame,
    pop: Population,
    profile: MetaProfile | Sequence[InstructionProfile],
    budget: float = DEFAULT_TERM_BUDGET,
) -> tuple[float, ...]:
    """Aggregate expected utility of each advisor's governed clients.

    Accepts a (possibly mixed) :class:`MetaProfile` or a single joint
    realization.  Exact at desk scale; raises :class:`BudgetExceededError`
    when the enumeration would exceed ``budget`` payoff terms.
    """
    if pop.role_count != game.role_count:
        raise ValidationError("population and game disagree on role count")
    if isinstance(profile, MetaProfile):
        combos = math.prod(len(a.outcomes) for a in profile.actions)
        if combos > budget:
            raise BudgetExceededError(combos, budget)
    k = pop.llm_count
    paycache: dict = {}
    counter = [0]
    # Inline Neumaier-compensated accumulation: joint supports can run to
    # millions of realizations and the golden comparisons sit at 1e-9.
    s = [0.0] * k
    c = [0.0] * k
    for weight, realization in _iter_realizations(pop, profile):
        vals = _realization_utilities(game, pop, realization, paycache, counter, budget)
        for j in range(k):
            x = weight * vals[j]
            t = s[j] + x
            if abs(s[j]) >= abs(x):
                c[j] += (s[j] - t) + x
            else:
                c[j] += (x - t) + s[j]
            s[j] = t
    return tuple(s[j] + c[j] for j in range(k))


def average_utility(
    game: BaseGame,
    pop: Population,
    profile: MetaProfile | Sequence[InstructionProfile],
    llm: int,
    budget: float = DEFAULT_TERM_BUDGET,
) -> float:
    """Per-client average utility of advisor ``llm``."""
    mass = pop.governed_mass(llm)
    if mass <= 0.0:
        raise UndefinedAverageError(f"advisor {llm} governs zero client mass")
    return llm_utility(game, pop, profile, budget)[llm] / mass


def reduce_role_homogeneous(action: MetaAction) -> MetaAction:
    """Collapse an arbitrary meta-action to its role-homogeneous equivalent.

    Client-level randomization and within-role splits both induce, per role,
    an action distribution for a randomly matched client; drawing one action
    per role from those distributions and instructing it uniformly yields the
    same distribution over realized pure profiles, hence the same payoffs for
    every advisor.
    """
    masses: dict[tuple[str, ...], float] = {}
    for prof, prob in action.outcomes:
        per_role = [tuple(prof.action_mass(i).items()) for i in range(prof.role_count)]
        for combo in itertools.product(*per_role):
            w = prob
            for _, wi in combo:
                w *= wi
            key = tuple(label for label, _ in combo)
            masses[key] = masses.get(key, 0.0) + w
    return MetaAction(
        tuple(
            (InstructionProfile.pure(profile), w)
            for profile, w in sorted(masses.items())
        )
    )
