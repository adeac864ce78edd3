"""Command-line entry point.

Every subcommand writes its outputs atomically and echoes the resolved
configuration next to them.  Failures print one JSON line on stderr,
``{"error": <kind>, "message": <text>}``, and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, EstimationError, GcfnError, ParseError, TrainingError

EXIT_CODES = {
    "usage": 2,
    "ConfigError": 2,
    "DomainError": 2,
    "ParseError": 3,
    "DataError": 3,
    "TrainingError": 4,
    "EstimationError": 4,
    "AssertionFailed": 5,
    "IOError": 6,
}


class AssertionFailed(GcfnError):
    """A hard check requested by the command did not hold."""


@dataclass
class RunConfig:
    """Flat run configuration; every key is optional in the JSON file."""

    # VDE
    k_categories: int = 50
    kappa: float = 0.1
    decoder_structure: str = "additive"
    zeta: float = 0.5
    semi_supervised: bool = False
    epochs: int = 100
    batch_size: int = 500
    learning_rate: float = 1e-2
    seed: int = 0
    hidden: int = 100
    treatment_bins: dict = field(default_factory=lambda: {"lo": -3.5, "hi": 3.5, "n_inner": 48})
    # outcome stage
    outcome_epochs: int = 100
    outcome_batch_size: int = 500
    outcome_lr: float = 1e-2
    outcome_hidden: int = 50
    partially_linear: bool = False
    # scenario and sweeps
    scenario: str | None = None
    alpha: float = 1.0
    rho: float = 0.05
    n: int = 5000
    kappas: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    alphas: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    holdout: float = 0.2
    # outputs
    out: str | None = None

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_json(doc)

    def vde_config(self):
        from .vde import VdeConfig

        return VdeConfig(
            k_categories=self.k_categories, kappa=self.kappa, decoder_structure=self.decoder_structure,
            zeta=self.zeta, semi_supervised=self.semi_supervised, epochs=self.epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate, seed=self.seed,
            hidden=self.hidden, treatment_bins=dict(self.treatment_bins),
        )


# ------------------------------------------------------------------ helpers


def parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid must look like lo:hi:count, got {text!r}")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError(f"grid must look like lo:hi:count, got {text!r}") from None
    if count < 1 or not (hi > lo or count == 1) or not (math.isfinite(lo) and math.isfinite(hi)):
        raise ConfigError(f"grid needs finite lo < hi and count >= 1, got {text!r}")
    return np.linspace(lo, hi, count)


def parse_floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of numbers") from None
    if not vals:
        raise ConfigError(f"{name} is empty")
    return vals


def _write(path, text: str) -> None:
    from .simgen import atomic_write_text

    atomic_write_text(path, text)


def _echo(out, resolved: dict) -> None:
    """Write the resolved configuration beside ``out`` (or inside it for a directory)."""
    out = Path(out)
    target = out / "config.json" if out.suffix == "" else out.with_name(out.stem + ".config.json")
    _write(target, json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _load_vde(path):
    from .vde import VdeModel

    try:
        return VdeModel.loads(Path(path).read_text())
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: not a VDE checkpoint ({exc})") from None


def _load_outcome(path):
    from .outcome import OutcomeModel

    try:
        return OutcomeModel.from_json(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: not an outcome checkpoint ({exc})") from None


def _truth_for(data):
    from .simgen import ScenarioSpec, true_effect_fn

    meta = data.metadata or {}
    kind = meta.get("scenario")
    if kind in (None, "counterexample"):
        return None
    return true_effect_fn(ScenarioSpec(kind, alpha=float(meta.get("alpha", 1.0))))


# --------------------------------------------------------------- subcommands


def cmd_simulate(args) -> None:
    from .simgen import ScenarioSpec, generate, save_csv

    spec = ScenarioSpec(args.scenario, alpha=args.alpha, rho=args.rho, n=args.n, seed=args.seed)
    save_csv(generate(spec), args.out)
    _echo(args.out, {"command": "simulate", **asdict(spec), "out": args.out})


def cmd_train_vde(args) -> None:
    from .simgen import load_csv
    from .vde import train_vde

    run = RunConfig.load(args.config)
    cfg = run.vde_config()
    if args.seed is not None:
        cfg.seed = args.seed
    data = load_csv(args.data)
    model = train_vde(data, cfg)
    _write(args.out, model.dumps() + "\n")
    _echo(args.out, {"command": "train-vde", "data": args.data, "out": args.out, "vde": cfg.to_json()})


def cmd_fit_outcome(args) -> None:
    from .outcome import fit_outcome
    from .simgen import load_csv

    run = RunConfig.load(args.config)
    vde = _load_vde(args.model)
    data = load_csv(args.data)
    model = fit_outcome(
        data, vde, epochs=run.outcome_epochs, batch_size=min(run.outcome_batch_size, len(data)),
        lr=run.outcome_lr, seed=run.seed if args.seed is None else args.seed,
        hidden=run.outcome_hidden, partially_linear=run.partially_linear,
    )
    _write(args.out, model.dumps() + "\n")
    _echo(args.out, {"command": "fit-outcome", "data": args.data, "model": args.model, "out": args.out,
                     "outcome": {k: getattr(run, k) for k in (
                         "outcome_epochs", "outcome_batch_size", "outcome_lr", "outcome_hidden",
                         "partially_linear", "seed")}})


def cmd_estimate(args) -> None:
    from .outcome import EffectCurve, estimate_effect, marginal_control
    from .simgen import load_csv

    vde = _load_vde(args.model)
    outcome = _load_outcome(args.outcome)
    if outcome.k_categories != vde.k:
        raise ConfigError(f"outcome model has K={outcome.k_categories}, VDE has K={vde.k}")
    data = load_csv(args.data)
    grid = parse_grid(args.grid)
    curve = estimate_effect(outcome, marginal_control(data, vde), grid)
    truth = _truth_for(data)
    if truth is not None:
        curve = EffectCurve(curve.grid, curve.tau_hat, truth(curve.grid))
    curve.save(args.out)
    _echo(args.out, {"command": "estimate", "model": args.model, "outcome": args.outcome,
                     "data": args.data, "grid": args.grid, "out": args.out})


def cmd_baseline(args) -> None:
    from .baselines import baseline_effect, dumps_fit, fit_2sls, fit_cfn
    from .outcome import EffectCurve
    from .simgen import load_csv

    data = load_csv(args.data)
    grid = parse_grid(args.grid)
    if args.method == "2sls":
        fit = fit_2sls(data)
    else:
        fit = fit_cfn(data, epochs=args.epochs, seed=args.seed)
    curve = baseline_effect(fit, grid)
    truth = _truth_for(data)
    if truth is not None:
        curve = EffectCurve(curve.grid, curve.tau_hat, truth(curve.grid))
    curve.save(args.out)
    out = Path(args.out)
    _write(out.with_name(out.stem + ".fit.json"), dumps_fit(fit) + "\n")
    _echo(args.out, {"command": "baseline", "method": args.method, "data": args.data, "grid": args.grid,
                     "epochs": args.epochs, "seed": args.seed, "out": args.out})


def cmd_diagnose(args) -> None:
    from .evaluate import bound_check_additive, independence_diagnostic
    from .simgen import load_csv

    vde = _load_vde(args.model)
    data = load_csv(args.data)
    report = independence_diagnostic(vde, data, args.eps_bins, args.permutations, args.seed)
    doc = report.to_json()
    if args.outcome is not None:
        outcome = _load_outcome(args.outcome)
        alpha = float((data.metadata or {}).get("alpha", 1.0))
        L = args.lipschitz if args.lipschitz is not None else abs(alpha)
        Lg = args.lipschitz_g if args.lipschitz_g is not None else 1.0 / math.sqrt(2.0)
        doc["bound"] = bound_check_additive(vde, outcome, data, L, Lg, _truth_for(data)).to_json()
    _write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _echo(args.out, {"command": "diagnose", "model": args.model, "data": args.data,
                     "eps_bins": args.eps_bins, "permutations": args.permutations, "seed": args.seed,
                     "outcome": args.outcome, "out": args.out})


def cmd_select_kappa(args) -> None:
    from .evaluate import select_kappa
    from .simgen import load_csv

    run = RunConfig.load(args.config)
    kappas = parse_floats(args.kappas, "kappas") if args.kappas else run.kappas
    holdout = run.holdout if args.holdout is None else args.holdout
    data = load_csv(args.data)
    sel = select_kappa(
        data, kappas, run.vde_config(), holdout, outcome_epochs=run.outcome_epochs,
        outcome_batch_size=run.outcome_batch_size, outcome_lr=run.outcome_lr,
        outcome_hidden=run.outcome_hidden,
    )
    _write(args.out, sel.to_csv())
    _echo(args.out, {"command": "select-kappa", "data": args.data, "kappas": kappas, "holdout": holdout,
                     "best_kappa": sel.best_kappa, "vde": run.vde_config().to_json(), "out": args.out})


def cmd_benchmark(args) -> None:
    from .benchmark import BenchmarkConfig, rows_to_csv, run_benchmark, summarize

    cfg = BenchmarkConfig(
        args.scenario, alphas=parse_floats(args.alphas, "alphas"), kappas=parse_floats(args.kappas, "kappas"),
        seeds=list(range(args.seeds)), n=args.n, rho=args.rho, epochs=args.epochs,
        batch_size=args.batch_size, baselines=not args.no_baselines,
    )
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    rows = run_benchmark(cfg, args.workers)
    out = Path(args.out)
    _write(out / "results.csv", rows_to_csv(rows))
    _write(out / "summary.json", json.dumps(summarize(rows), indent=2, sort_keys=True) + "\n")
    _echo(out, {"command": "benchmark", **asdict(cfg)})


def cmd_oracle(args) -> None:
    from . import oracle

    if args.mode == "random":
        reports = oracle.random_trials(args.trials, args.n_states, args.seed)
        bad = [i for i, r in enumerate(reports) if not (r.premises_ok and r.effects_match)]
        doc = {
            "mode": "random", "trials": args.trials, "max_states": args.n_states, "seed": args.seed,
            "all_premises_ok": all(r.premises_ok for r in reports),
            "max_effect_gap": max(r.max_effect_gap for r in reports),
            "failures": bad,
        }
        ok = not bad
    elif args.mode == "counterexample":
        scm, cf = oracle.build_mod_counterexample(args.modN)
        report = oracle.verify_theorem1(scm, cf)
        doc = {"mode": "counterexample", "modN": args.modN, **report.to_json()}
        ok = (report.marginal_independence_ok and not report.joint_independence_ok
              and report.max_effect_gap > 0.1)
    else:
        if not args.problem:
            raise ConfigError("--mode file needs --problem")
        scm, cf = oracle.load_problem(args.problem)
        report = oracle.verify_theorem1(scm, cf)
        doc = {"mode": "file", "problem": args.problem, **report.to_json()}
        ok = (not report.premises_ok) or report.effects_match
    _write(args.out, json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    _echo(args.out, {"command": "oracle", **{k: v for k, v in vars(args).items() if k != "func"}})
    if not ok:
        raise AssertionFailed(f"oracle {args.mode} check failed; see {args.out}")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# -------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcfn", description="General control function estimation.")
    p.add_argument("--version", action="version", version=f"gcfn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a scenario dataset")
    s.add_argument("--scenario", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--rho", type=float, default=0.05)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-vde", help="train the first stage")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vde)

    s = sub.add_parser("fit-outcome", help="fit the outcome stage")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_outcome)

    s = sub.add_parser("estimate", help="effect curve from fitted stages")
    s.add_argument("--model", required=True)
    s.add_argument("--outcome", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default="-1:1:200")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("baseline", help="2SLS or CFN effect curve")
    s.add_argument("--method", required=True, choices=["2sls", "cfn"])
    s.add_argument("--data", required=True)
    s.add_argument("--grid", default="-1:1:200")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("diagnose", help="independence and reconstruction diagnostics")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--outcome", help="also run the additive bound audit")
    s.add_argument("--eps-bins", type=int, default=10)
    s.add_argument("--permutations", type=int, default=199)
    s.add_argument("--lipschitz", type=float)
    s.add_argument("--lipschitz-g", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("select-kappa", help="choose kappa by held-out outcome likelihood")
    s.add_argument("--data", required=True)
    s.add_argument("--kappas")
    s.add_argument("--holdout", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select_kappa)

    s = sub.add_parser("benchmark", help="simulation sweep with baselines")
    s.add_argument("--scenario", required=True)
    s.add_argument("--alphas", default="0.5,1,2")
    s.add_argument("--kappas", default="0.1,0.2,0.3")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--rho", type=float, default=0.05)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=500)
    s.add_argument("--workers", type=int, help="parallel cells (default: $GCFN_THREADS or 1)")
    s.add_argument("--no-baselines", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("oracle", help="finite-SCM identification checks")
    s.add_argument("--mode", required=True, choices=["random", "counterexample", "file"])
    s.add_argument("--n-states", type=int, default=5)
    s.add_argument("--modN", type=int, default=5)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--problem")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_oracle)
    return p


def _fail(kind: str, message: str, code: int | None = None) -> int:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return EXIT_CODES.get(kind, 1) if code is None else code


def _code_for(exc: BaseException) -> int:
    # subclasses such as PositivityError inherit their parent's code
    for cls in type(exc).__mro__:
        if cls.__name__ in EXIT_CODES:
            return EXIT_CODES[cls.__name__]
    return 1


def _join_negative_values(argv: list[str]) -> list[str]:
    # argparse takes "--grid -1:1:200" for two options; bind such values explicitly
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-") and argv[i + 1][1:2].isdigit():
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


_VALUE_FLAGS = {"--grid", "--alphas", "--kappas", "--alpha"}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_join_negative_values(argv))
    except _UsageError as exc:
        return _fail("usage", str(exc))
    try:
        args.func(args)
    except AssertionFailed as exc:
        return _fail("AssertionFailed", str(exc))
    except (ParseError, DataError, ConfigError, TrainingError, EstimationError, GcfnError) as exc:
        return _fail(type(exc).__name__, str(exc), _code_for(exc))
    except (OSError, json.JSONDecodeError) as exc:
        return _fail("IOError", str(exc))
    except ValueError as exc:
        return _fail("ConfigError", str(exc))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
