import random

import pytest

from metagame.errors import InvalidProfileError, ValidationError
from metagame.games import BaseGame, MixedStrategy, StrategyProfile, expected_payoff
from metagame.scenarios import blame_cycle, make_scenario

from oracles import random_game


@pytest.fixture(scope="module")
def pd():
    return make_scenario("pd", X=-2, Y=-4, Z=-5)


@pytest.fixture(scope="module")
def heist():
    return make_scenario("heist")


def test_pd_golden_payoffs(pd):
    assert pd.payoff(("C", "D")) == (-5.0, 0.0)
    assert pd.payoff(("D", "D")) == (-4.0, -4.0)
    assert pd.payoff(("C", "C")) == (-2.0, -2.0)
    assert pd.payoff(("D", "C")) == (0.0, -5.0)


def test_heist_blame_cycle_is_clean(heist):
    assert heist.payoff(blame_cycle()) == (0.0, 0.0, 0.0)


def test_heist_full_table(heist):
    # Either every role is named exactly once (two cycles, payoff 0) or one
    # role is named twice: it is convicted at -2.1 and the others get +1.
    clean = 0
    for profile in heist.profiles():
        named = [sum(1 for a in profile if a == role) for role in
                 ("planner", "burglar", "driver")]
        pay = heist.payoff(profile)
        if named == [1, 1, 1]:
            clean += 1
            assert pay == (0.0, 0.0, 0.0)
        else:
            culprit = named.index(2)
            for i, v in enumerate(pay):
                assert v == (-2.1 if i == culprit else 1.0)
    assert clean == 2


def test_unknown_action_rejected(pd):
    with pytest.raises(InvalidProfileError):
        pd.payoff(("C", "X"))
    with pytest.raises(InvalidProfileError):
        pd.payoff(("C",))


def test_pd_requires_strict_ordering():
    with pytest.raises(ValidationError):
        make_scenario("pd", X=-4, Y=-2, Z=-5)
    with pytest.raises(ValidationError):
        make_scenario("pd", X=2, Y=1, Z=-1)


def test_unknown_scenario():
    with pytest.raises(ValidationError):
        make_scenario("chicken")


def test_expected_payoff_point_mass_matches_pure(pd, heist):
    for game in (pd, heist, make_scenario("majority3")):
        for profile in game.profiles():
            mixed = StrategyProfile.pure(profile)
            assert expected_payoff(game, mixed) == pytest.approx(
                game.payoff(profile), abs=0.0
            )


def test_expected_payoff_pd_mixture(pd):
    # role 1 mixes C/D evenly, role 2 defects: hand enumeration over the two
    # pure outcomes gives (0.5*(-5) + 0.5*(-4), 0.5*0 + 0.5*(-4)).
    profile = StrategyProfile(
        (
            MixedStrategy.from_weights(0, {"C": 0.5, "D": 0.5}),
            MixedStrategy.point_mass(1, "D"),
        )
    )
    assert expected_payoff(pd, profile) == pytest.approx((-4.5, -2.0), abs=1e-12)


def test_expected_payoff_majority_uniform():
    # Independent enumeration: 8 equally likely outcomes; a role earns 100/3
    # when all agree (2 outcomes) and 50 when it sits in a majority pair
    # (4 of the remaining 6 outcomes).
    game = make_scenario("majority3")
    want = []
    for i in range(3):
        total = 0.0
        for profile in game.profiles():
            total += game.payoff(profile)[i] / 8.0
        want.append(total)
    assert want == pytest.approx([100.0 / 3.0] * 3, abs=1e-12)
    uniform = StrategyProfile(
        tuple(MixedStrategy.from_weights(i, {"0": 0.5, "1": 0.5}) for i in range(3))
    )
    assert expected_payoff(game, uniform) == pytest.approx(want, abs=1e-12)


def test_expected_payoff_linear_in_one_role():
    rng = random.Random(7)
    for _ in range(50):
        game = random_game(rng, roles=2, n_actions=3)
        lam = rng.random()
        s0 = tuple(
            MixedStrategy(i, tuple((a, w) for a, w in zip(game.actions[i], _simplex(rng, 3))))
            for i in range(2)
        )
        alt = MixedStrategy(0, tuple((a, w) for a, w in zip(game.actions[0], _simplex(rng, 3))))
        blended = MixedStrategy(
            0,
            tuple(
                (a, lam * s0[0].weight(a) + (1 - lam) * alt.weight(a))
                for a in game.actions[0]
            ),
        )
        left = expected_payoff(game, StrategyProfile((blended, s0[1])))
        pa = expected_payoff(game, StrategyProfile((s0[0], s0[1])))
        pb = expected_payoff(game, StrategyProfile((alt, s0[1])))
        right = tuple(lam * a + (1 - lam) * b for a, b in zip(pa, pb))
        assert left == pytest.approx(right, abs=1e-12)


def _simplex(rng, n):
    raw = [rng.random() + 1e-3 for _ in range(n)]
    t = sum(raw)
    return [v / t for v in raw]


def test_bounded10_rule_spot_checks():
    game = make_scenario("bounded10", n_actions=6)
    assert game.role_count == 10
    # two exact groups of four split the prize
    pay = game.payoff(("1", "1", "1", "1", "2", "3", "3", "3", "3", "4"))
    assert pay == tuple(
        12.5 if i in {0, 1, 2, 3, 5, 6, 7, 8} else 0.0 for i in range(10)
    )
    # one exact group of four takes it all
    pay = game.payoff(("1", "1", "1", "1", "2", "3", "4", "5", "6", "2"))
    assert pay[:4] == (25.0,) * 4
    assert sum(pay) == pytest.approx(100.0)
    # no group of exactly four
    assert game.payoff(("1",) * 10) == (0.0,) * 10


def test_bounded10_default_action_count():
    game = make_scenario("bounded10")
    assert len(game.actions[0]) == 100
    assert game.num_profiles == 100**10


def test_scenario_serialization_round_trip(pd, heist):
    for game in (pd, heist, make_scenario("bounded10", n_actions=6)):
        doc = game.to_dict()
        back = BaseGame.from_dict(doc)
        assert back.actions == game.actions
        spot = next(iter(game.profiles()))
        assert back.payoff(spot) == game.payoff(spot)
        if game.table is not None:
            assert back.table == game.table


def test_mixed_strategy_validation():
    with pytest.raises(ValidationError):
        MixedStrategy(0, (("C", 0.5), ("D", 0.4)))
    with pytest.raises(ValidationError):
        MixedStrategy(0, (("C", -0.1), ("D", 1.1)))
    s = MixedStrategy(0, (("D", 0.25), ("C", 0.75)))
    assert s.support == ("C", "D")
    assert s.weight("D") == 0.25
