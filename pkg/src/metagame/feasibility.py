"""Feasible payoff set, target decomposition, and punishment (minmax) bounds.

The feasible set is the convex hull of the payoff vectors generated by pure
role-homogeneous profile tuples (mixtures and splits add nothing, by the
role-homogeneous reduction).  A target inside the hull is decomposed into a
short implementation cycle by a feasibility LP followed by Caratheodory
support reduction.

Punishment values: with two advisors the minmax is the exact value of a
finite matrix game (one LP).  With three or more, the minimum over
independent punisher mixtures is nonconvex, so the certificate brackets it:
a lower bound from the correlated-punishers LP (a relaxation) and an upper
bound from the best punisher profile found by alternating minimization,
re-scored with an exact inner best response.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import (
    BudgetExceededError,
    InfeasibleTargetError,
    MetagameError,
    ValidationError,
)
from .games import BaseGame
from .model import (
    DEFAULT_TERM_BUDGET,
    InstructionProfile,
    MetaAction,
    MetaProfile,
    Population,
    _realization_utilities,
)
from .oneshot import best_response

RECOMBINE_TOL = 1e-9


@dataclass(frozen=True)
class Vertex:
    """Payoff vector of one pure role-homogeneous profile per advisor."""

    profiles: tuple[tuple[str, ...], ...]
    payoff: tuple[float, ...]

    def meta_profile(self) -> MetaProfile:
        return MetaProfile.from_pure(self.profiles)


@dataclass(frozen=True)
class PayoffVertexSet:
    vertices: tuple[Vertex, ...]

    @property
    def matrix(self) -> np.ndarray:
        return np.array([v.payoff for v in self.vertices])

    def __len__(self):
        return len(self.vertices)


@dataclass(frozen=True)
class CycleDecomposition:
    """Weighted profiles whose payoff average hits a target vector."""

    profiles: tuple[MetaProfile, ...]
    weights: tuple[float, ...]
    payoffs: tuple[tuple[float, ...], ...]
    target: tuple[float, ...]

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValidationError("cycle weights must sum to 1")
        if any(w < 0.0 for w in self.weights):
            raise ValidationError("cycle weights must be nonnegative")
        combo = np.array(self.payoffs).T @ np.array(self.weights)
        drift = float(np.max(np.abs(combo - np.array(self.target))))
        if drift > RECOMBINE_TOL:
            raise ValidationError(
                f"cycle recombination misses the target by {drift:.3g}"
            )

    @property
    def support_size(self) -> int:
        return len(self.profiles)


@dataclass(frozen=True)
class MinmaxCertificate:
    """Bracket on what advisor ``llm`` can guarantee against punishment.

    ``punishment`` holds one meta-action per punisher (``None`` in the
    punished slot); ``best_response`` is the punished advisor's exact best
    pure reply, whose value is ``upper_bound``.
    """

    llm: int
    lower_bound: float
    upper_bound: float
    punishment: tuple[MetaAction | None, ...]
    best_response: tuple[str, ...]

    def __post_init__(self):
        if self.lower_bound > self.upper_bound + 1e-12:
            raise ValidationError("certificate bounds are inverted")


@dataclass(frozen=True)
class StrictIrReport:
    strict: bool
    margins: tuple[float, ...]


def payoff_vertices(
    game: BaseGame, pop: Population, budget: float = DEFAULT_TERM_BUDGET
) -> PayoffVertexSet:
    """One payoff vertex per tuple of pure role-homogeneous profiles."""
    k = pop.llm_count
    n = game.num_profiles
    if n**k > budget:
        raise BudgetExceededError(n**k, budget)
    pure = [InstructionProfile.pure(p) for p in game.profiles()]
    labels = list(game.profiles())
    paycache: dict = {}
    counter = [0]
    vertices = []
    for combo in itertools.product(range(n), repeat=k):
        realization = tuple(pure[i] for i in combo)
        u = _realization_utilities(
            game, pop, realization, paycache, counter, budget
        )
        vertices.append(
            Vertex(
                profiles=tuple(labels[i] for i in combo),
                payoff=tuple(u),
            )
        )
    return PayoffVertexSet(tuple(vertices))


def _separating_direction(V: np.ndarray, target: np.ndarray):
    """Direction d, |d|_inf <= 1, maximizing d.target - max_h d.V_h."""
    N, k = V.shape
    # variables: d (k), s; minimize -d.target + s  s.t.  V d - s <= 0
    c = np.concatenate([-target, [1.0]])
    A_ub = np.hstack([V, -np.ones((N, 1))])
    b_ub = np.zeros(N)
    bounds = [(-1.0, 1.0)] * k + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        raise MetagameError(f"separating-direction LP failed: {res.message}")
    d = res.x[:k]
    gap = float(target @ d - res.x[k])
    return d, gap


def _caratheodory_reduce(V: np.ndarray, weights: np.ndarray, target: np.ndarray):
    """Prune the support of a convex combination to at most k+1 points."""
    k = V.shape[1]
    w = weights.copy()
    support = [int(i) for i in np.flatnonzero(w > 1e-13)]
    while len(support) > k + 1:
        M = np.vstack([V[support].T, np.ones(len(support))])
        # s > k+1 guarantees a nontrivial null vector of the affine system
        _, _, Vt = np.linalg.svd(M)
        null = Vt[-1]
        if null.max() <= 0.0:
            null = -null
        ratios = [
            (w[i] / null[idx], idx)
            for idx, i in enumerate(support)
            if null[idx] > 1e-13
        ]
        theta, drop_idx = min(ratios)
        for idx, i in enumerate(support):
            w[i] -= theta * null[idx]
        w[support[drop_idx]] = 0.0
        w = np.clip(w, 0.0, None)
        w /= w.sum()
        support = [int(i) for i in np.flatnonzero(w > 1e-13)]
        drift = float(np.max(np.abs(V[support].T @ w[support] - target)))
        if drift > RECOMBINE_TOL:
            raise MetagameError(
                f"support reduction drifted off target by {drift:.3g}"
            )
    return w, support


def decompose_target(
    vertices: PayoffVertexSet,
    target,
    tol: float = RECOMBINE_TOL,
) -> CycleDecomposition:
    """Express a feasible target as a short convex combination of vertices.

    Raises :class:`InfeasibleTargetError` with a separating direction when the
    target lies outside the hull (beyond ``tol``).
    """
    target = np.asarray(target, dtype=float)
    V = vertices.matrix
    if target.shape != (V.shape[1],):
        raise ValidationError(
            f"target has shape {target.shape}, vertices are {V.shape[1]}-dimensional"
        )
    # A target that is itself a vertex payoff decomposes as that single
    # profile; scan in enumeration order for determinism.
    for vtx in vertices.vertices:
        if max(abs(a - b) for a, b in zip(vtx.payoff, target)) <= tol:
            return CycleDecomposition(
                profiles=(vtx.meta_profile(),),
                weights=(1.0,),
                payoffs=(vtx.payoff,),
                target=tuple(target),
            )

    N, k = V.shape
    # Feasibility LP: minimize the sup-norm miss t of sum_h w_h V_h = target.
    c = np.zeros(N + 1)
    c[N] = 1.0
    A_ub = np.vstack(
        [
            np.hstack([V.T, -np.ones((k, 1))]),
            np.hstack([-V.T, -np.ones((k, 1))]),
        ]
    )
    b_ub = np.concatenate([target, -target])
    A_eq = np.zeros((1, N + 1))
    A_eq[0, :N] = 1.0
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=[1.0],
        bounds=[(0.0, None)] * N + [(0.0, None)],
        method="highs",
    )
    if not res.success or res.x[N] > tol:
        d, gap = _separating_direction(V, target)
        raise InfeasibleTargetError(target, d, gap)
    w = res.x[:N]
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    w, support = _caratheodory_reduce(V, w, target)
    chosen = [(i, w[i]) for i in support]
    return CycleDecomposition(
        profiles=tuple(vertices.vertices[i].meta_profile() for i, _ in chosen),
        weights=tuple(wi for _, wi in chosen),
        payoffs=tuple(vertices.vertices[i].payoff for i, _ in chosen),
        target=tuple(target),
    )


def _matrix_game_min_value(C: np.ndarray):
    """Minimize over row mixtures the best column reply: min_y max_a y.C[:,a]."""
    n_rows, n_cols = C.shape
    c = np.zeros(n_rows + 1)
    c[n_rows] = 1.0
    A_ub = np.hstack([C.T, -np.ones((n_cols, 1))])
    b_ub = np.zeros(n_cols)
    A_eq = np.zeros((1, n_rows + 1))
    A_eq[0, :n_rows] = 1.0
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=[1.0],
        bounds=[(0.0, None)] * n_rows + [(None, None)],
        method="highs",
    )
    if not res.success:
        raise MetagameError(f"matrix-game LP failed: {res.message}")
    y = np.clip(res.x[:n_rows], 0.0, None)
    y /= y.sum()
    return float(res.x[n_rows]), y


def _mixture_meta_action(profiles: list[tuple[str, ...]], weights) -> MetaAction:
    outcomes = [
        (InstructionProfile.pure(p), float(w))
        for p, w in zip(profiles, weights)
        if w > 1e-12
    ]
    total = sum(w for _, w in outcomes)
    return MetaAction(tuple((p, w / total) for p, w in outcomes))


def _uj_matrix(game, pop, j, row_llm, fixed_actions, budget):
    """C[b, a]: utility of advisor j playing pure profile a while ``row_llm``
    plays pure profile b and everyone else follows ``fixed_actions``."""
    profiles = list(game.profiles())
    n = len(profiles)
    pure = [InstructionProfile.pure(p) for p in profiles]
    others = [
        (q, list(fixed_actions[q].outcomes))
        for q in range(pop.llm_count)
        if q not in (j, row_llm)
    ]
    paycache: dict = {}
    counter = [0]
    C = np.empty((n, n))
    for bi in range(n):
        for ai in range(n):
            total = 0.0
            for combo in itertools.product(*(o for _, o in others)):
                w = 1.0
                for _, prob in combo:
                    w *= prob
                realization = [None] * pop.llm_count
                realization[j] = pure[ai]
                realization[row_llm] = pure[bi]
                for (q, _), (prof, _) in zip(others, combo):
                    realization[q] = prof
                total += w * _realization_utilities(
                    game, pop, tuple(realization), paycache, counter, budget
                )[j]
            C[bi, ai] = total
    return C, profiles


def certificate_from_punishment(
    game: BaseGame,
    pop: Population,
    j: int,
    punishment: tuple[MetaAction | None, ...],
    budget: float = DEFAULT_TERM_BUDGET,
    lower_bound: float | None = None,
) -> MinmaxCertificate:
    """Certificate induced by an explicit punisher profile.

    The upper bound is the punished advisor's exact best-response value; any
    punisher profile certifies one.  When no lower bound is supplied the
    correlated-punishers LP provides it.
    """
    if len(punishment) != pop.llm_count or punishment[j] is not None:
        raise ValidationError("punishment must leave exactly slot j empty")
    placeholder = MetaAction.from_pure(tuple(a[0] for a in game.actions))
    profile = MetaProfile(
        tuple(placeholder if q == j else punishment[q] for q in range(pop.llm_count))
    )
    br = best_response(game, pop, profile, j, budget=budget)
    if lower_bound is None:
        lower_bound = _correlated_lower_bound(game, pop, j, budget)
    return MinmaxCertificate(
        llm=j,
        lower_bound=min(lower_bound, br.value),
        upper_bound=br.value,
        punishment=tuple(punishment),
        best_response=br.profile,
    )


def _correlated_lower_bound(game, pop, j, budget) -> float:
    """Value when punishers may correlate: a relaxation, hence a lower bound."""
    profiles = list(game.profiles())
    n = len(profiles)
    k = pop.llm_count
    if k == 1:
        raise ValidationError("no punishers to correlate")
    if n**k > budget:
        raise BudgetExceededError(n**k, budget)
    pure = [InstructionProfile.pure(p) for p in profiles]
    punishers = [q for q in range(k) if q != j]
    paycache: dict = {}
    counter = [0]
    rows = []
    for combo in itertools.product(range(n), repeat=len(punishers)):
        row = []
        for ai in range(n):
            realization = [None] * k
            realization[j] = pure[ai]
            for q, bi in zip(punishers, combo):
                realization[q] = pure[bi]
            row.append(
                _realization_utilities(
                    game, pop, tuple(realization), paycache, counter, budget
                )[j]
            )
        rows.append(row)
    value, _ = _matrix_game_min_value(np.array(rows))
    return value


def minmax(
    game: BaseGame,
    pop: Population,
    j: int,
    starts: int = 32,
    max_rounds: int = 500,
    tol: float = 1e-9,
    seed: int = 0,
    budget: float = DEFAULT_TERM_BUDGET,
    hint: tuple[MetaAction | None, ...] | None = None,
) -> MinmaxCertificate:
    """Certified bracket on advisor ``j``'s guaranteed (minmax) payoff."""
    k = pop.llm_count
    profiles = list(game.profiles())
    n = len(profiles)

    if k == 1:
        dummy = MetaProfile.from_pure([tuple(a[0] for a in game.actions)])
        br = best_response(game, pop, dummy, j, budget=budget)
        return MinmaxCertificate(
            llm=j,
            lower_bound=br.value,
            upper_bound=br.value,
            punishment=(None,),
            best_response=br.profile,
        )

    if k == 2:
        opp = 1 - j
        fixed = {q: MetaAction.from_pure(profiles[0]) for q in range(k)}
        C, _ = _uj_matrix(game, pop, j, opp, fixed, budget)
        value, y = _matrix_game_min_value(C)
        punishment: list[MetaAction | None] = [None, None]
        punishment[opp] = _mixture_meta_action(profiles, y)
        return certificate_from_punishment(
            game, pop, j, tuple(punishment), budget=budget, lower_bound=value
        )

    lower = _correlated_lower_bound(game, pop, j, budget)
    punishers = [q for q in range(k) if q != j]
    rng = np.random.default_rng(seed)

    candidates: list[tuple[float, int, dict]] = []
    for s_idx in range(starts):
        mixtures: dict[int, np.ndarray] = {}
        if s_idx == 0 and hint is not None:
            for q in punishers:
                w = np.zeros(n)
                for prof, prob in hint[q].outcomes:
                    pp = prof.pure_profile
                    if pp is None:
                        w = None
                        break
                    w[profiles.index(pp)] += prob
                if w is None:
                    mixtures = {}
                    break
                mixtures[q] = w
        if not mixtures:
            for q in punishers:
                mixtures[q] = rng.dirichlet(np.ones(n))
        value_prev = math.inf
        value = math.inf
        for _ in range(max_rounds):
            for q in punishers:
                fixed = {
                    p: _mixture_meta_action(profiles, mixtures[p])
                    for p in punishers
                    if p != q
                }
                C, _ = _uj_matrix(game, pop, j, q, fixed, budget)
                value, y = _matrix_game_min_value(C)
                mixtures[q] = y
            if abs(value_prev - value) < tol:
                break
            value_prev = value
        candidates.append((value, s_idx, dict(mixtures)))

    best_value, _, best_mix = min(candidates, key=lambda t: (t[0], t[1]))
    punishment = [None] * k
    for q in punishers:
        punishment[q] = _mixture_meta_action(profiles, best_mix[q])
    return certificate_from_punishment(
        game, pop, j, tuple(punishment), budget=budget, lower_bound=lower
    )


def check_strict_ir(target, certificates) -> StrictIrReport:
    """Strict individual rationality of a target against certified bounds."""
    target = tuple(float(v) for v in target)
    if len(target) != len(certificates):
        raise ValidationError("one certificate per advisor is required")
    margins = []
    for j, cert in enumerate(certificates):
        if cert.llm != j:
            raise ValidationError(f"certificate {j} is for advisor {cert.llm}")
        margins.append(target[j] - cert.upper_bound)
    return StrictIrReport(strict=all(m > 0.0 for m in margins), margins=tuple(margins))
