"""Command-line interface: scenario configs in, reports and run logs out.

Subcommands: ``eval``, ``equilibrium``, ``minmax``, ``feasible``,
``folk plan``, ``folk run``, ``sweep``, ``report``.  Exit codes: 0 success
(and, for ``equilibrium``, certified); 2 config/validation problems;
3 infeasible / not individually rational / not an equilibrium; 1 internal
errors.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import (
    InfeasibleTargetError,
    MetagameError,
    NotIndividuallyRationalError,
    ValidationError,
)
from .games import BaseGame
from .model import MetaProfile, Population, average_utility, llm_utility
from .oneshot import check_equilibrium
from .feasibility import decompose_target, minmax, payoff_vertices
from .protocol import derive_params, validate_params
from .scenarios import (
    bounded10_equilibrium_profile,
    heist_blame_profile,
    heist_punishment,
    make_scenario,
    scenario_population,
)
from .sim import (
    FixedProfileStrategy,
    HonestStrategy,
    estimate_deviation_gain,
    finite_population_run,
    run_repeated,
    write_summary_csv,
)

OUTPUT_ENV = "METAGAME_OUT"
SCHEMA = 1

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_CERTIFICATE = 3


class ConfigError(ValidationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"config field {path!r}: {message}")
        self.path = path


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def load_config(path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    return normalize_config(doc)


def normalize_config(doc: dict) -> dict:
    _require(isinstance(doc, dict), "$", "must be an object")
    out = {"schema": doc.get("schema", SCHEMA)}
    _require(out["schema"] == SCHEMA, "schema", f"unsupported schema {out['schema']}")
    _require("game" in doc, "game", "is required")
    game = doc["game"]
    if "name" in game:
        out["game"] = {"name": game["name"], "params": dict(game.get("params", {}))}
    elif "inline" in game:
        out["game"] = {"inline": game["inline"]}
    else:
        raise ConfigError("game", "needs 'name' or 'inline'")

    pop = doc.get("population", {})
    if "shares" in pop:
        out["population"] = {"shares": [list(r) for r in pop["shares"]]}
    elif "scenario" in pop:
        out["population"] = {
            "scenario": pop["scenario"],
            "params": dict(pop.get("params", {})),
        }
    elif "name" in out["game"]:
        out["population"] = {"scenario": out["game"]["name"], "params": {}}
    else:
        raise ConfigError("population", "is required for inline games")

    out["meta_profiles"] = {}
    for name, entry in doc.get("meta_profiles", {}).items():
        path = f"meta_profiles.{name}"
        _require(isinstance(entry, dict), path, "must be an object")
        if "pure" in entry:
            out["meta_profiles"][name] = {"pure": [list(p) for p in entry["pure"]]}
        elif "named" in entry:
            out["meta_profiles"][name] = {"named": entry["named"]}
        elif "llms" in entry:
            out["meta_profiles"][name] = {"llms": entry["llms"]}
        else:
            raise ConfigError(path, "needs 'pure', 'named', or 'llms'")

    folk = doc.get("folk")
    if folk is not None:
        norm = {
            "r": [float(v) for v in folk["r"]],
            "epsilon": float(folk.get("epsilon", 1.2)),
            "gamma": float(folk.get("gamma", 0.5)),
            "delta": float(folk.get("delta", 0.995)),
            "tail_tol": float(folk.get("tail_tol", 1e-6)),
        }
        _require(norm["epsilon"] > 0, "folk.epsilon", "must be positive")
        _require(norm["gamma"] > 0, "folk.gamma", "must be positive")
        _require(0 < norm["delta"] < 1, "folk.delta", "must lie in (0, 1)")
        if folk.get("overrides"):
            norm["overrides"] = dict(folk["overrides"])
        out["folk"] = norm

    adversary = doc.get("adversary")
    if adversary is not None:
        out["adversary"] = {
            "llm": int(adversary["llm"]),
            "kind": adversary.get("kind", "greedy_myopic"),
        }
        if adversary.get("budget") is not None:
            out["adversary"]["budget"] = int(adversary["budget"])

    finite = doc.get("finite")
    if finite is not None:
        out["finite"] = {
            "clients_per_role": int(finite["clients_per_role"]),
            "periods": int(finite.get("periods", 100)),
        }

    out["trials"] = int(doc.get("trials", 30))
    out["seed"] = int(doc.get("seed", 0))
    out["budget"] = float(doc.get("budget", 10**7))
    return out


def build_game(cfg) -> BaseGame:
    game = cfg["game"]
    if "name" in game:
        return make_scenario(game["name"], **game["params"])
    return BaseGame.from_dict(game["inline"])


def build_population(cfg) -> Population:
    pop = cfg["population"]
    if "shares" in pop:
        return Population(tuple(tuple(r) for r in pop["shares"]))
    return scenario_population(pop["scenario"], **pop.get("params", {}))


def build_profile(cfg, game, name) -> MetaProfile:
    profiles = cfg.get("meta_profiles", {})
    _require(name in profiles, f"meta_profiles.{name}", "is not defined")
    entry = profiles[name]
    if "pure" in entry:
        return MetaProfile.from_pure([tuple(p) for p in entry["pure"]])
    if "named" in entry:
        named = entry["named"]
        if named == "heist_blame":
            return heist_blame_profile()
        if named == "bounded10_equilibrium":
            return bounded10_equilibrium_profile(game)
        raise ConfigError(f"meta_profiles.{name}.named", f"unknown profile {named!r}")
    return MetaProfile.from_dict(entry["llms"])


def _config_digest(cfg) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:16]


def _bundle(cfg, command, results) -> dict:
    return {
        "schema": SCHEMA,
        "command": command,
        "inputs": cfg,
        "results": results,
        "provenance": {
            "artifact_version": __version__,
            "seed": cfg.get("seed", 0),
            "config_digest": _config_digest(cfg),
        },
    }


def _out_dir(args) -> Path:
    root = args.out or os.environ.get(OUTPUT_ENV) or "metagame_out"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(out_dir: Path, cfg, bundle, quiet: bool) -> None:
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    if not quiet:
        print(json.dumps(bundle["results"], indent=2, sort_keys=True))


def _punishment_hints(cfg, game, pop):
    if cfg["game"].get("name") == "heist":
        return {j: heist_punishment(j) for j in range(pop.llm_count)}
    return None


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    game = build_game(cfg)
    pop = build_population(cfg)
    profile = build_profile(cfg, game, args.profile)
    budget = args.budget or cfg["budget"]
    totals = llm_utility(game, pop, profile, budget=budget)
    averages = [
        average_utility(game, pop, profile, j, budget=budget)
        if pop.governed_mass(j) > 0
        else None
        for j in range(pop.llm_count)
    ]
    results = {"profile": args.profile, "totals": list(totals), "averages": averages}
    _emit(_out_dir(args), cfg, _bundle(cfg, "eval", results), args.quiet)
    return EXIT_OK


def cmd_equilibrium(args) -> int:
    cfg = load_config(args.config)
    game = build_game(cfg)
    pop = build_population(cfg)
    profile = build_profile(cfg, game, args.profile)
    budget = args.budget or cfg["budget"]
    report = check_equilibrium(
        game, pop, profile, epsilon=args.epsilon, budget=budget, symmetry=args.symmetry
    )
    averages = [
        u / pop.governed_mass(j) if pop.governed_mass(j) > 0 else None
        for j, u in enumerate(report.utilities)
    ]
    results = {"profile": args.profile, "averages": averages, **report.to_dict()}
    _emit(_out_dir(args), cfg, _bundle(cfg, "equilibrium", results), args.quiet)
    return EXIT_OK if report.is_epsilon_equilibrium else EXIT_CERTIFICATE


def cmd_minmax(args) -> int:
    cfg = load_config(args.config)
    game = build_game(cfg)
    pop = build_population(cfg)
    cert = minmax(
        game, pop, args.llm, seed=cfg["seed"], budget=args.budget or cfg["budget"]
    )
    results = {
        "llm": cert.llm,
        "lower_bound": cert.lower_bound,
        "upper_bound": cert.upper_bound,
        "best_response": list(cert.best_response),
        "punishment": [None if a is None else a.to_dict() for a in cert.punishment],
    }
    _emit(_out_dir(args), cfg, _bundle(cfg, "minmax", results), args.quiet)
    return EXIT_OK


def cmd_feasible(args) -> int:
    cfg = load_config(args.config)
    game = build_game(cfg)
    pop = build_population(cfg)
    _require("folk" in cfg, "folk", "is required for feasibility checks")
    budget = args.budget or cfg["budget"]
    vertices = payoff_vertices(game, pop, budget=budget)
    results = {"vertex_count": len(vertices)}
    if args.dump_vertices:
        results["vertices"] = [
            {"profiles": [list(p) for p in v.profiles], "payoff": list(v.payoff)}
            for v in vertices.vertices
        ]
    target = cfg["folk"]["r"]
    try:
        cycle = decompose_target(vertices, target)
    except InfeasibleTargetError as exc:
        results.update(
            {
                "feasible": False,
                "target": list(target),
                "separating_direction": list(exc.direction),
                "gap": exc.gap,
            }
        )
        _emit(_out_dir(args), cfg, _bundle(cfg, "feasible", results), args.quiet)
        return EXIT_CERTIFICATE
    results.update(
        {
            "feasible": True,
            "target": list(target),
            "weights": list(cycle.weights),
            "support_payoffs": [list(p) for p in cycle.payoffs],
        }
    )
    _emit(_out_dir(args), cfg, _bundle(cfg, "feasible", results), args.quiet)
    return EXIT_OK


def _params_doc(params) -> dict:
    return {
        "target": list(params.target),
        "adjusted_target": list(params.adjusted_target),
        "slack": params.slack,
        "blend": params.blend,
        "probe_rate": params.probe_rate,
        "freq_threshold": params.freq_threshold,
        "block_length": params.block_length,
        "punish_length": params.punish_length,
        "punish_ratio": params.punish_ratio,
        "payoff_spread": params.payoff_spread,
        "payoff_cap": params.payoff_cap,
        "cycle_weights": list(params.cycle.weights),
        "segment_lengths": list(params.segment_lengths),
        "degenerate": params.degenerate,
        "overridden": params.overridden,
        "punishment_bounds": [c.upper_bound for c in params.certificates],
        "intended_aggregates": [t.to_dict() for t in params.intended_aggregates],
        "mass_ceilings": [
            [[list(row) for row in per_role] for per_role in per_reviewed]
            for per_reviewed in params.mass_ceilings
        ],
    }


def _derive_from_config(cfg, game, pop, budget):
    folk = cfg["folk"]
    return derive_params(
        game,
        pop,
        folk["r"],
        folk["epsilon"],
        folk["gamma"],
        overrides=folk.get("overrides"),
        punishment_hints=_punishment_hints(cfg, game, pop),
        budget=budget,
    )


def cmd_folk_plan(args) -> int:
    cfg = load_config(args.config)
    game = build_game(cfg)
    pop = build_population(cfg)
    _require("folk" in cfg, "folk", "is required")
    out_dir = _out_dir(args)
    try:
        params = _derive_from_config(cfg, game, pop, args.budget or cfg["budget"])
    except (InfeasibleTargetError, NotIndividuallyRationalError) as exc:
        results = {"planned": False, "reason": str(exc)}
        if isinstance(exc, NotIndividuallyRationalError):
            results["margins"] = list(exc.margins)
        if isinstance(exc, InfeasibleTargetError):
            results["separating_direction"] = list(exc.direction)
        _emit(out_dir, cfg, _bundle(cfg, "folk plan", results), args.quiet)
        return EXIT_CERTIFICATE
    doc = _params_doc(params)
    violations = validate_params(game, pop, params)
    results = {"planned": True, "violations": violations, **doc}
    (out_dir / "params.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(out_dir, cfg, _bundle(cfg, "folk plan", results), args.quiet)
    return EXIT_OK


def cmd_folk_run(args) -> int:
    cfg = load_config(args.config)
    game = build_game(cfg)
    pop = build_population(cfg)
    _require("folk" in cfg, "folk", "is required")
    out_dir = _out_dir(args)
    budget = args.budget or cfg["budget"]
    try:
        params = _derive_from_config(cfg, game, pop, budget)
    except (InfeasibleTargetError, NotIndividuallyRationalError) as exc:
        _emit(out_dir, cfg, _bundle(cfg, "folk run", {"ran": False, "reason": str(exc)}), args.quiet)
        return EXIT_CERTIFICATE
    folk = cfg["folk"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    trials = args.trials or cfg["trials"]

    logs = []
    for trial in range(trials):
        strategies = [HonestStrategy() for _ in range(pop.llm_count)]
        logs.append(
            run_repeated(
                game,
                pop,
                params,
                strategies,
                delta=folk["delta"],
                tail_tol=folk["tail_tol"],
                seed=(seed, trial),
            )
        )
    honest_worst = [
        max(abs(log.discounted[j] - params.target[j]) for log in logs)
        for j in range(pop.llm_count)
    ]
    results = {
        "ran": True,
        "trials": trials,
        "horizon": logs[0].horizon,
        "honest_mean_discounted": [
            sum(log.discounted[j] for log in logs) / trials
            for j in range(pop.llm_count)
        ],
        "honest_worst_gap": honest_worst,
        "gamma": folk["gamma"],
        "honest_within_gamma": all(g <= folk["gamma"] for g in honest_worst),
    }
    adversary = cfg.get("adversary")
    if adversary is not None:
        mean, hw = estimate_deviation_gain(
            game,
            pop,
            params,
            adversary["llm"],
            adversary["kind"],
            trials=trials,
            seed=seed,
            delta=folk["delta"],
            tail_tol=folk["tail_tol"],
            budget=adversary.get("budget"),
        )
        results["adversary"] = {
            **adversary,
            "mean_gain": mean,
            "half_width_99": hw,
            "epsilon": folk["epsilon"],
            "within_epsilon": mean <= folk["epsilon"] + hw,
        }
    logs[0].save_jsonl(out_dir / "runlog.jsonl")
    write_summary_csv(out_dir / "summary.csv", logs)
    (out_dir / "params.json").write_text(
        json.dumps(_params_doc(params), indent=2, sort_keys=True) + "\n"
    )
    _emit(out_dir, cfg, _bundle(cfg, "folk run", results), args.quiet)
    return EXIT_OK


def _set_path(cfg, dotted, value):
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        _require(isinstance(node, dict) and part in node, dotted, "does not resolve")
        node = node[part]
    leaf = parts[-1]
    _require(isinstance(node, dict) and leaf in node, dotted, "does not resolve")
    old = node[leaf]
    _require(
        isinstance(old, (int, float)) and not isinstance(old, bool),
        dotted,
        "is not numeric",
    )
    if isinstance(old, int) and float(value).is_integer():
        node[leaf] = int(value)
    else:
        node[leaf] = float(value)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = [float(v) for v in args.values.split(",")]
    out_dir = _out_dir(args)
    rows = []
    for value in values:
        point = copy.deepcopy(cfg)
        _set_path(point, args.axis, value)
        game = build_game(point)
        pop = build_population(point)
        if args.run == "equilibrium":
            profile = build_profile(point, game, args.profile)
            rep = check_equilibrium(
                game, pop, profile, epsilon=args.epsilon, budget=point["budget"]
            )
            rows.append(
                {
                    "value": value,
                    "seed": point["seed"],
                    **{
                        f"average_{j}": u / pop.governed_mass(j)
                        for j, u in enumerate(rep.utilities)
                    },
                    "max_regret": rep.max_regret,
                    "is_equilibrium": rep.is_epsilon_equilibrium,
                }
            )
        elif args.run == "eval":
            profile = build_profile(point, game, args.profile)
            totals = llm_utility(game, pop, profile, budget=point["budget"])
            rows.append(
                {
                    "value": value,
                    "seed": point["seed"],
                    **{f"total_{j}": u for j, u in enumerate(totals)},
                }
            )
        elif args.run == "finite":
            _require("finite" in point, "finite", "section required for finite sweeps")
            profile = build_profile(point, game, args.profile)
            strategies = [
                FixedProfileStrategy(action) for action in profile.actions
            ]
            for trial in range(point["trials"]):
                _, rep = finite_population_run(
                    int(point["finite"]["clients_per_role"]),
                    game,
                    pop,
                    strategies,
                    periods=point["finite"]["periods"],
                    seed=(point["seed"], trial),
                )
                rows.append(
                    {
                        "value": value,
                        "seed": trial,
                        "mean_gap": rep.mean_gap,
                        "max_gap": rep.max_gap,
                    }
                )
        else:
            raise ConfigError("sweep.run", f"unknown sweep target {args.run!r}")
    import csv as _csv

    sweep_path = out_dir / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    results = {"axis": args.axis, "values": values, "rows": rows}
    _emit(out_dir, cfg, _bundle(cfg, "sweep", results), args.quiet)
    return EXIT_OK


def cmd_report(args) -> int:
    """Recompute the library's headline scenario numbers from scratch."""
    results = {}
    pd = make_scenario("pd", X=-2, Y=-4, Z=-5)
    ppop = scenario_population("pd")
    profile = MetaProfile.from_pure([("C", "C"), ("D", "D")])
    rep = check_equilibrium(pd, ppop, profile, epsilon=1e-9)
    results["pd"] = {
        "averages": [
            u / ppop.governed_mass(j) for j, u in enumerate(rep.utilities)
        ],
        "max_regret": rep.max_regret,
        "is_equilibrium": rep.is_epsilon_equilibrium,
    }
    heist = make_scenario("heist")
    hpop = scenario_population("heist")
    from .feasibility import certificate_from_punishment

    cert = certificate_from_punishment(heist, hpop, 0, heist_punishment(0))
    vertices = payoff_vertices(heist, hpop)
    cycle = decompose_target(vertices, (0.0, 0.0, 0.0))
    results["heist"] = {
        "punished_upper_bound": cert.upper_bound,
        "certifies_minus_0_5872": cert.upper_bound <= -0.5872 + 1e-9,
        "cycle_support": cycle.support_size,
        "cycle_weights": list(cycle.weights),
    }
    n_actions = 6 if args.quick else 100
    bgame = make_scenario("bounded10", n_actions=n_actions)
    bpop = scenario_population("bounded10")
    bprofile = bounded10_equilibrium_profile(bgame)
    totals = llm_utility(bgame, bpop, bprofile, budget=10**8)
    results["bounded10"] = {
        "n_actions": n_actions,
        "totals": list(totals),
        "averages": [
            totals[j] / bpop.governed_mass(j) for j in range(3)
        ],
    }
    cfg = {"schema": SCHEMA, "report": "builtin-scenarios", "seed": 0}
    bundle = _bundle(cfg, "report", results)
    out_dir = _out_dir(args)
    (out_dir / "report.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(json.dumps(results, indent=2, sort_keys=True))
    return EXIT_OK


def _add_common(parser, profile_default=None):
    parser.add_argument("--config", required=True, help="scenario config (JSON)")
    parser.add_argument("--out", default=None, help=f"output dir (default ${OUTPUT_ENV} or ./metagame_out)")
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("--budget", type=float, default=None, help="term budget override")
    if profile_default is not None:
        parser.add_argument("--profile", default=profile_default, help="meta-profile name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metagame")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate a meta-profile's utilities")
    _add_common(p, profile_default="main")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("equilibrium", help="certify a meta-profile")
    _add_common(p, profile_default="main")
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--symmetry", choices=["rotation"], default=None)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("minmax", help="punishment bracket for one advisor")
    _add_common(p)
    p.add_argument("--llm", type=int, required=True)
    p.set_defaults(func=cmd_minmax)

    p = sub.add_parser("feasible", help="vertex dump and target membership")
    _add_common(p)
    p.add_argument("--dump-vertices", action="store_true")
    p.set_defaults(func=cmd_feasible)

    folk = sub.add_parser("folk", help="repeated-game protocol").add_subparsers(
        dest="folk_command", required=True
    )
    p = folk.add_parser("plan", help="derive and audit protocol parameters")
    _add_common(p)
    p.set_defaults(func=cmd_folk_plan)
    p = folk.add_parser("run", help="simulate honest runs (and one adversary)")
    _add_common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.set_defaults(func=cmd_folk_run)

    p = sub.add_parser("sweep", help="re-run a command along one numeric axis")
    _add_common(p, profile_default="main")
    p.add_argument("--axis", required=True, help="dotted config path, e.g. population.params.p")
    p.add_argument("--values", required=True, help="comma-separated numbers")
    p.add_argument("--run", choices=["equilibrium", "eval", "finite"], default="equilibrium")
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute headline scenario numbers")
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--quick", action="store_true", help="use the 6-action variant")
    p.set_defaults(func=cmd_report)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleTargetError, NotIndividuallyRationalError) as exc:
        print(f"certificate: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except MetagameError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
