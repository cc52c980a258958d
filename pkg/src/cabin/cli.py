"""Command-line front end: discretize, learn, tune, train, simulate, compare.

Exit codes: 0 success, 2 configuration or I/O problem, 3 data or algorithm
failure, 4 semantic misuse (unknown node, evidence on a tunable node).
Settings come from built-in defaults, then an optional ``--config`` JSON
file, then command-line flags, later sources winning.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .bayesnet import BayesianNetworkModel, TraceDataset, learn_model
from .discretizer import (DEFAULT_EPSILON, DEFAULT_K_MAX, SEPARATION, build_scheme, discretize,
                          discretize_values)
from .errors import CabinError, ConfigInvalid, DataError, MissingColumn, NotAQosNode, TunableEvidence, UnknownNode
from .simulator.comparison import DEFAULT_REPS, DEFAULT_SCENARIOS, DEFAULT_SEED, run_comparison
from .simulator.session import STRATEGIES, ScenarioConfig, run_session
from .simulator.training import (TRAINING_SEPARATION, WARMUP_PARTICIPANTS, WARMUP_SEED_BASE, WARMUP_SESSIONS,
                                 default_warmup, train_cabin)
from .tuner import DEFAULT_P_MIN, preference_by_value, recommend, recommend_best

log = logging.getLogger("cabin")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISUSE = 0, 2, 3, 4
NON_FEATURE_COLUMNS = ("time_s", "participant_id", "strategy")

# flag name -> ScenarioConfig field
SCENARIO_FLAGS = {
    "participants": ("participants", int),
    "duration": ("duration_s", float),
    "tick": ("tick_s", float),
    "epoch": ("epoch_s", float),
    "capacity": ("base_capacity_kbps", float),
    "noise": ("bw_noise_frac", float),
    "rate_min": ("rate_min_kbps", float),
    "rate_max": ("rate_max_kbps", float),
    "fps": ("frame_rate_fps", float),
    "startup_delay": ("startup_delay_s", float),
    "initial_rate": ("initial_rate_kbps", float),
    "fixed_rate": ("fixed_rate_kbps", float),
    "p_min": ("p_min", float),
}

DEFAULTS = {
    "discretize": {"k_max": DEFAULT_K_MAX, "epsilon": DEFAULT_EPSILON, "separation": SEPARATION},
    "learn": {"k_max": DEFAULT_K_MAX, "epsilon": DEFAULT_EPSILON, "separation": SEPARATION, "max_parents": 3,
              "alpha": 1.0, "tunable": [], "columns": None, "discrete": False},
    "tune": {"target": "best", "evidence": [], "value": [], "p_min": DEFAULT_P_MIN, "qos": None},
    "train": {"warmup_participants": WARMUP_PARTICIPANTS, "sessions": WARMUP_SESSIONS, "seed": WARMUP_SEED_BASE,
              "k_max": DEFAULT_K_MAX, "epsilon": DEFAULT_EPSILON, "separation": TRAINING_SEPARATION,
              "max_parents": 3, "alpha": 1.0},
    "simulate": {"strategy": "ton", "seed": 0, "model": None, "trace": None, "summary": None, "background": True},
    "compare": {"scenarios": list(DEFAULT_SCENARIOS), "reps": DEFAULT_REPS, "strategies": list(STRATEGIES),
                "seed": DEFAULT_SEED, "jobs": 1, "model": None, "background": True},
}


class UsageProblem(CabinError):
    """Bad paths or settings detected by the front end (exit code 2)."""


# ---------------------------------------------------------------------------
# settings


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageProblem(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageProblem("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags."""
    settings = dict(DEFAULTS.get(args.command, {}))
    settings.update(_load_config(getattr(args, "config", None)))
    settings.update({k: v for k, v in vars(args).items() if k not in ("command", "config", "func")})
    return settings


def scenario_from(settings: dict, **overrides) -> ScenarioConfig:
    fields = {}
    for flag, (name, kind) in SCENARIO_FLAGS.items():
        if settings.get(flag) is not None:
            fields[name] = kind(settings[flag])
    if "background" in settings:
        fields["background"] = bool(settings["background"])
    fields.update(overrides)
    return ScenarioConfig(**fields)


# ---------------------------------------------------------------------------
# file helpers


def read_trace(path) -> dict[str, list[str]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise UsageProblem(f"{path}: empty trace file")
            cols = {name: [] for name in reader.fieldnames}
            for row in reader:
                for name in reader.fieldnames:
                    cols[name].append(row[name])
    except OSError as exc:
        raise UsageProblem(f"cannot read trace {path}: {exc}") from None
    return cols


def numeric_column(cols: dict[str, list[str]], name: str) -> np.ndarray:
    if name not in cols:
        raise MissingColumn(f"unknown variable {name!r}")
    try:
        return np.array([float(v) for v in cols[name]])
    except ValueError:
        raise DataError(f"variable {name!r} has non-numeric entries") from None


def feature_columns(cols: dict[str, list[str]]) -> list[str]:
    names = []
    for name, values in cols.items():
        if name in NON_FEATURE_COLUMNS:
            continue
        try:
            [float(v) for v in values]
        except ValueError:
            continue
        names.append(name)
    return names


def write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageProblem(f"cannot write {path}: {exc}") from None


def read_model(path) -> BayesianNetworkModel:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageProblem(f"cannot read model {path}: {exc}") from None
    try:
        return BayesianNetworkModel.from_json(text)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageProblem(f"{path} is not a valid model file: {exc}") from None


def _message(exc: Exception) -> str:
    return str(exc.args[0]) if exc.args else type(exc).__name__


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_discretize(s: dict) -> int:
    cols = read_trace(s["trace"])
    name = s["variable"]
    try:
        values = numeric_column(cols, name)
        scheme = build_scheme(values, k_max=int(s["k_max"]), epsilon=float(s["epsilon"]), variable_name=name,
                              unit=s.get("unit") or "", separation=float(s["separation"]))
    except MissingColumn:
        raise
    except DataError as exc:
        raise type(exc)(f"{name}: {_message(exc)}") from None
    if scheme.degenerate:
        log.warning("%s is constant; using a single-value scheme", name)
    print(f"{'label':>5} {'a':>14} {'b':>14} {'c':>14}")
    for label, t in enumerate(scheme.terms):
        print(f"{label:>5} {t.a:>14.6g} {t.b:>14.6g} {t.c:>14.6g}")
    write_text(s["out"], scheme.to_json() + "\n")
    return EXIT_OK


def cmd_learn(s: dict) -> int:
    cols = read_trace(s["trace"])
    qos = s["qos"]
    if qos not in cols:
        raise MissingColumn(f"unknown variable {qos!r}")
    names = list(s["columns"]) if s.get("columns") else feature_columns(cols)
    if qos not in names:
        names.append(qos)
    if len(names) < 2:
        raise DataError("need the QoS column and at least one context column")
    for t in s["tunable"]:
        if t not in names:
            raise UnknownNode(t)
    raw = {n: numeric_column(cols, n) for n in names}
    if s["discrete"]:
        data = TraceDataset.from_columns({n: raw[n].astype(np.int64) for n in names})
        schemes = {}
    else:
        schemes = {n: build_scheme(raw[n], k_max=int(s["k_max"]), epsilon=float(s["epsilon"]), variable_name=n,
                                   separation=float(s["separation"])) for n in names}
        data = TraceDataset.from_columns({n: discretize_values(schemes[n], raw[n]) for n in names},
                                         {n: schemes[n].n_values for n in names})
    model = learn_model(data, qos, tunable=s["tunable"], max_parents=int(s["max_parents"]), alpha=float(s["alpha"]),
                        schemes=schemes)
    print("ordering: " + " ".join(model.dag.ordering))
    for a, b in sorted(model.dag.edges):
        print(f"{a} -> {b}")
    print(f"parents of {qos}: " + (", ".join(model.dag.parents(qos)) or "(none)"))
    write_text(s["out"], model.to_json() + "\n")
    return EXIT_OK


def _parse_assignment(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise UsageProblem(f"expected name=value, got {item!r}")
    name, value = item.split("=", 1)
    return name.strip(), value.strip()


def cmd_tune(s: dict) -> int:
    model = read_model(s["model"])
    qos = s["qos"] or model.qos_node
    if qos is None:
        raise UsageProblem("model has no QoS node; pass --qos")
    evidence = {}
    for item in s["evidence"]:
        name, value = _parse_assignment(item)
        model.node(name)
        try:
            evidence[name] = int(value)
        except ValueError:
            raise UsageProblem(f"evidence label for {name} must be an integer") from None
    for item in s["value"]:
        name, value = _parse_assignment(item)
        model.node(name)
        if name not in model.schemes:
            raise UsageProblem(f"model has no scheme for {name}; pass a label with --evidence")
        evidence[name] = discretize(model.schemes[name], float(value))
    target = str(s["target"])
    if target == "best":
        rec = recommend_best(model, qos, preference_by_value(model, qos), evidence, float(s["p_min"]))
    else:
        try:
            label = int(target)
        except ValueError:
            raise UsageProblem(f"--target must be a label or 'best', got {target!r}") from None
        rec = recommend(model, qos, label, evidence)
    sys.stdout.write(_dump(rec.to_dict(model)))
    return EXIT_OK


def cmd_train(s: dict) -> int:
    base = scenario_from(s)
    cfgs = default_warmup(int(s["warmup_participants"]), int(s["sessions"]), int(s["seed"]), base)
    model = train_cabin(cfgs, max_parents=int(s["max_parents"]), alpha=float(s["alpha"]), k_max=int(s["k_max"]),
                        epsilon=float(s["epsilon"]), separation=float(s["separation"]))
    qos = model.qos_node
    print(f"trained on {len(cfgs)} warm-up sessions; parents of {qos}: "
          + (", ".join(model.dag.parents(qos)) or "(none)"))
    write_text(s["out"], model.to_json() + "\n")
    return EXIT_OK


def cmd_simulate(s: dict) -> int:
    cfg = scenario_from(s, strategy=s["strategy"], seed=int(s["seed"]))
    model = None
    if cfg.strategy == "cabin":
        if not s.get("model"):
            raise UsageProblem("strategy 'cabin' needs --model; create one with 'cabin train'")
        model = read_model(s["model"])
    report = run_session(cfg, model)
    if s.get("trace"):
        write_text(s["trace"], report.trace_csv())
    text = _dump(report.summary())
    if s.get("summary"):
        write_text(s["summary"], text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(s: dict) -> int:
    base = scenario_from(s)
    strategies = list(s["strategies"])
    model = None
    if "cabin" in strategies:
        if s.get("model"):
            model = read_model(s["model"])
        else:
            # warm-up seeds sit a fixed offset above the evaluation seeds: 1001.. for --seed 1
            warmup_seed = WARMUP_SEED_BASE - DEFAULT_SEED + int(s["seed"])
            log.info("no --model given; training one on warm-up seeds from %d", warmup_seed)
            model = train_cabin(default_warmup(seed=warmup_seed, base=base))
    reps = int(s["reps"])
    if reps < 1:
        raise UsageProblem("--reps must be at least 1")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_comparison(s["scenarios"], reps, strategies, model, base, int(s["seed"]), int(s["jobs"]))
    for w in caught:
        log.warning("%s", w.message)
    csv_text = report.to_csv()
    if s.get("out"):
        write_text(s["out"], csv_text)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _scenario_flags(p: argparse.ArgumentParser):
    sup = argparse.SUPPRESS
    g = p.add_argument_group("scenario")
    g.add_argument("--participants", type=int, default=sup)
    g.add_argument("--duration", type=float, default=sup, help="session length in seconds")
    g.add_argument("--tick", type=float, default=sup, help="clock tick in seconds")
    g.add_argument("--epoch", type=float, default=sup, help="adaptation epoch in seconds")
    g.add_argument("--capacity", type=float, default=sup, help="per-path capacity in kbps")
    g.add_argument("--noise", type=float, default=sup, help="bandwidth probe noise fraction")
    g.add_argument("--rate-min", type=float, default=sup)
    g.add_argument("--rate-max", type=float, default=sup)
    g.add_argument("--fps", type=float, default=sup)
    g.add_argument("--startup-delay", type=float, default=sup)
    g.add_argument("--initial-rate", type=float, default=sup)
    g.add_argument("--fixed-rate", type=float, default=sup)
    g.add_argument("--p-min", type=float, default=sup)
    g.add_argument("--no-background", dest="background", action="store_false", default=sup)


def build_parser() -> argparse.ArgumentParser:
    sup = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="cabin", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with default settings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discretize", help="fit a discretization scheme to one trace column")
    p.add_argument("--trace", required=True)
    p.add_argument("--variable", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unit", default=sup)
    p.add_argument("--k-max", type=int, default=sup)
    p.add_argument("--epsilon", type=float, default=sup)
    p.add_argument("--separation", type=float, default=sup)
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("learn", help="learn a Bayesian network from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--qos", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tunable", nargs="*", default=sup)
    p.add_argument("--columns", nargs="*", default=sup)
    p.add_argument("--discrete", action="store_true", default=sup, help="columns already hold integer labels")
    p.add_argument("--k-max", type=int, default=sup)
    p.add_argument("--epsilon", type=float, default=sup)
    p.add_argument("--separation", type=float, default=sup)
    p.add_argument("--max-parents", type=int, default=sup)
    p.add_argument("--alpha", type=float, default=sup)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("tune", help="recommend tunable context values")
    p.add_argument("--model", required=True)
    p.add_argument("--target", default=sup, help="QoS label or 'best'")
    p.add_argument("--qos", default=sup)
    p.add_argument("--evidence", nargs="*", default=sup, metavar="NAME=LABEL")
    p.add_argument("--value", nargs="*", default=sup, metavar="NAME=X", help="raw values to discretize")
    p.add_argument("--p-min", type=float, default=sup)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="train the CABIN controller model on rate-exploring sessions")
    p.add_argument("--out", required=True)
    p.add_argument("--warmup-participants", type=int, default=sup)
    p.add_argument("--sessions", type=int, default=sup)
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("--k-max", type=int, default=sup)
    p.add_argument("--epsilon", type=float, default=sup)
    p.add_argument("--separation", type=float, default=sup)
    p.add_argument("--max-parents", type=int, default=sup)
    p.add_argument("--alpha", type=float, default=sup)
    _scenario_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run one conferencing session")
    p.add_argument("--strategy", choices=STRATEGIES + ("fixed", "explore"), default=sup)
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("--model", default=sup)
    p.add_argument("--trace", default=sup, help="epoch trace CSV output")
    p.add_argument("--summary", default=sup, help="summary JSON output (default: stdout)")
    _scenario_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="compare strategies over scenarios and repetitions")
    p.add_argument("--scenarios", type=int, nargs="+", default=sup)
    p.add_argument("--reps", type=int, default=sup)
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=sup)
    p.add_argument("--seed", type=int, default=sup, help="seed of the first repetition")
    p.add_argument("--jobs", type=int, default=sup)
    p.add_argument("--model", default=sup)
    p.add_argument("--out", default=sup, help="report CSV output (default: stdout)")
    _scenario_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    func = args.func
    try:
        settings = resolve(args)
        return func(settings)
    except (UsageProblem, ConfigInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnknownNode as exc:
        print(f"error: unknown node {_message(exc)!r}", file=sys.stderr)
        return EXIT_MISUSE
    except (TunableEvidence, NotAQosNode) as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return EXIT_MISUSE
    except CabinError as exc:
        print(f"error: {_message(exc)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
