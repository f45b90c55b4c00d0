"""Experiment runner: ``arw <kind> --config run.yaml --seed N``.

A run config is a YAML (or JSON) mapping::

    kind: q-bounds              # optional when given on the command line
    seed: 7                     # mandatory here or via --seed
    trials: 1000
    parallel: 4
    graph: {family: tree, degree: 3, radius: 10}
    model: {mu: 0.5, lambda: 0.01, init: bernoulli}
    budget: {steps: 1000000000, tokens: 10000000}
    options: {x: 0, green_C: 2.0}   # kind-specific, see KIND_OPTIONS

Outputs go to ``--out`` (default ``out``): ``report.json`` holds the
normalized config, results, bound checks and per-trial records;
``summary.csv`` holds one row per estimate and per check with columns
``CSV_COLUMNS``. Exit status: 0 on success, 1 if a check is Violated,
2 on a config error, 3 if a step budget was exceeded.
"""
import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import _prf
from .core import Context, ModelParams, dump_tape
from .estimators import (NoSignChange, default_threshold, estimate_activity, estimate_mu_c,
                         estimate_Q_and_check_bounds, estimate_sufficient_condition,
                         simulate_branching)
from .graphs import (GraphSpec, GraphTooLarge, _run_chunked, build_graph, estimate_rw_stats,
                     hitting_prob)
from .stabilize import StepBudgetExceeded, stabilize, tree_pack_stabilize
from .stats import Estimate, Verdict, check_bound, mean_and_se

SCHEMA_VERSION = 1
CSV_COLUMNS = ["graph", "L", "mu", "lambda", "estimator", "point", "stderr", "trials", "seed",
               "verdict"]
KINDS = ("rw-stats", "stabilize", "q-bounds", "activity", "mu-c", "suffcond", "branching",
         "tree-pack")
KIND_OPTIONS = {
    "rw-stats": {"horizon", "exact_tree_ell", "hitting_ell"},
    "stabilize": {"order", "order_seed"},
    "q-bounds": {"x", "radius_K", "green_C"},
    "activity": {"theta"},
    "mu-c": {"lo", "hi", "tol", "theta", "cutoff"},
    "suffcond": {"alpha", "delta", "eps"},
    "branching": {"d", "alpha_b", "beta", "max_steps"},
    "tree-pack": set(),
}
TOP_KEYS = {"kind", "seed", "trials", "parallel", "graph", "model", "budget", "options",
            "output"}
EXIT_OK, EXIT_VIOLATED, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid run config; the message names the field and, when known, its line."""


class MismatchError(AssertionError):
    """A replayed report differs from the stored one; ``field`` is the first differing path."""

    def __init__(self, field, stored, fresh):
        super().__init__(f"replay mismatch at {field}: stored {stored!r}, replayed {fresh!r}")
        self.field = field


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _key_lines(text):
    """Map dotted key paths of a YAML mapping to 1-based line numbers."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


@dataclass
class RunConfig:
    kind: str
    seed: int
    trials: int = 1000
    parallel: int = 1
    graph: GraphSpec | None = None
    model: ModelParams | None = None
    step_budget: int = 10**9
    token_budget: int = 10**7
    options: dict = field(default_factory=dict)
    out_dir: str = "out"
    dump_tape: bool = False

    def to_dict(self):
        d = {"kind": self.kind, "seed": self.seed, "trials": self.trials,
             "budget": {"steps": self.step_budget, "tokens": self.token_budget},
             "options": dict(self.options)}
        if self.graph is not None:
            d["graph"] = self.graph.to_dict()
        if self.model is not None:
            d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, lines=None, **over):
        lines = lines or {}

        def fail(path, msg):
            where = f" (line {lines[path]})" if path in lines else ""
            raise ConfigError(f"{path}{where}: {msg}")

        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        for k in set(d) - TOP_KEYS:
            fail(k, "unknown key")
        kind = over.get("kind") or d.get("kind")
        if kind not in KINDS:
            fail("kind", f"must be one of {', '.join(KINDS)}, got {kind!r}")
        seed = over.get("seed") if over.get("seed") is not None else d.get("seed")
        if seed is None:
            fail("seed", "a seed is required (in the config or via --seed)")
        try:
            seed = int(seed)
        except (TypeError, ValueError):
            fail("seed", f"not an integer: {seed!r}")
        if seed < 0:
            fail("seed", "must be non-negative")

        def integer(path, v, lo=1):
            try:
                iv = int(float(v))
            except (TypeError, ValueError):
                fail(path, f"not an integer: {v!r}")
            if iv != float(v) or iv < lo:
                fail(path, f"must be an integer >= {lo}, got {v!r}")
            return iv

        trials = over.get("trials") or d.get("trials", 1000)
        trials = integer("trials", trials)
        parallel = integer("parallel", over.get("parallel") or d.get("parallel", 1))
        budget = d.get("budget") or {}
        if not isinstance(budget, dict):
            fail("budget", "must be a mapping")
        for k in set(budget) - {"steps", "tokens"}:
            fail(f"budget.{k}", "unknown key")
        steps = integer("budget.steps", budget.get("steps", 10**9))
        if os.environ.get("ARW_BUDGET"):
            try:
                steps = integer("ARW_BUDGET", os.environ["ARW_BUDGET"])
            except ConfigError as e:
                raise ConfigError(f"environment variable {e}") from None
        tokens = integer("budget.tokens", budget.get("tokens", 10**7))
        options = d.get("options") or {}
        if not isinstance(options, dict):
            fail("options", "must be a mapping")
        for k in set(options) - KIND_OPTIONS[kind]:
            fail(f"options.{k}", f"not an option of kind {kind}")

        graph = model = None
        if kind != "branching":
            for sect in ("graph", "model"):
                if not isinstance(d.get(sect), dict):
                    fail(sect, f"required mapping for kind {kind}")
            try:
                graph = GraphSpec.from_dict(d["graph"])
            except (TypeError, ValueError) as e:
                fail("graph", str(e))
            try:
                model = ModelParams.from_dict(d["model"])
            except KeyError as e:
                fail(f"model.{e.args[0]}", "missing")
            except (TypeError, ValueError) as e:
                fail("model", str(e))
        else:
            for k in ("d", "alpha_b", "beta", "max_steps"):
                if k not in options:
                    fail(f"options.{k}", "required for kind branching")
        out = d.get("output") or {}
        out_dir = over.get("out_dir") or (out.get("dir") if isinstance(out, dict) else None) \
            or "out"
        return cls(kind, seed, trials, parallel, graph, model, steps, tokens, options,
                   str(out_dir), bool(over.get("dump_tape", False)))


def load_config(path, **over):
    """Parse a YAML or JSON run config; ``over`` holds command-line overrides."""
    text = Path(path).read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}:{where} {getattr(e, 'problem', None) or e}") from None
    return RunConfig.from_dict(d if d is not None else {}, _key_lines(text), **over)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if hasattr(x, "value") and isinstance(getattr(x, "value"), str):
        return x.value
    return x


class _Result:
    def __init__(self):
        self.results = {}
        self.estimates = []
        self.checks = []
        self.trials = []

    def estimate(self, name, est):
        self.estimates.append((name, est))


def _run_rw(cfg, g, res):
    o = cfg.options
    rs = estimate_rw_stats(g, cfg.trials, int(o.get("horizon", 10**6)), cfg.seed, cfg.parallel)
    res.results["rw_stats"] = rs.to_dict()
    for name in ("green_C", "nonreturn_delta", "speed_alpha"):
        res.estimate(name, Estimate(getattr(rs, name), getattr(rs, name + "_se"), cfg.trials,
                                    cfg.seed))
    ells = o.get("hitting_ell") or []
    for ell in ells:
        ell = int(ell)
        src = int(g.sphere(ell)[0])
        mc = hitting_prob(g, src, trials=cfg.trials, seed=_prf.derive(cfg.seed, _prf.WALK, ell),
                          parallel=cfg.parallel)
        res.estimate(f"hitting_prob[ell={ell}]", mc)
        if g.spec.family.value == "tree":
            ex = hitting_prob(g, exact_tree_ell=ell).value
            res.checks.append(check_bound(f"hitting ell={ell} >= exact", mc.value, mc.stderr, ex))
            res.checks.append(check_bound(f"hitting ell={ell} <= exact", mc.value, mc.stderr, ex,
                                          "<="))
    if o.get("exact_tree_ell") is not None:
        res.results["exact_hitting"] = hitting_prob(g, exact_tree_ell=int(o["exact_tree_ell"])).value


def _run_stabilize(cfg, g, res):
    order = cfg.options.get("order", "fifo")
    order_seed = int(cfg.options.get("order_seed", 0))
    keys = _prf.trial_keys(cfg.seed, cfg.trials)
    out = [None] * cfg.trials

    def run(a, b):
        for i in range(a, b):
            ctx = Context.fresh(g, cfg.model, int(keys[i]), budget=cfg.step_budget)
            r = stabilize(ctx, order=order, order_seed=order_seed)
            out[i] = {"origin_topplings": r.origin_topplings, "absorbed": r.absorbed,
                      "sleeping": int(r.sleeping.sum()), "wall_steps": r.wall_steps}

    _run_chunked(run, cfg.trials, cfg.parallel)
    res.trials = out
    for name in ("origin_topplings", "absorbed", "sleeping", "wall_steps"):
        m, se = mean_and_se([t[name] for t in out])
        res.estimate(name, Estimate(m, se, cfg.trials, cfg.seed))


def _run_q(cfg, g, res):
    o = cfg.options
    x = int(o.get("x", 0))
    K = g.ball(int(o["radius_K"])) if "radius_K" in o else None
    q = estimate_Q_and_check_bounds(g, x, K, cfg.model, cfg.trials, cfg.seed,
                                    green_C=o.get("green_C"), budget=cfg.step_budget,
                                    parallel=cfg.parallel)
    res.results["q"] = q.to_dict()
    res.estimate("Q", q.Q)
    res.estimate("P(m>=1)", q.p_active)
    res.estimate("rounds", q.rounds)
    res.checks += q.checks
    pt = q.per_trial
    res.trials = [{"slept": bool(s), "origin_topplings": int(m), "rounds": int(t)}
                  for s, m, t in zip(pt["slept"], pt["origin_topplings"], pt["rounds"])]


def _run_activity(cfg, g, res):
    theta = cfg.options.get("theta")
    est, counts = estimate_activity(g, cfg.model, theta, cfg.trials, cfg.seed,
                                    budget=cfg.step_budget, parallel=cfg.parallel,
                                    return_counts=True)
    res.results["theta"] = int(theta) if theta is not None else default_threshold(g.radius)
    res.estimate("activity", est)
    res.trials = [{"origin_topplings": int(c)} for c in counts]


def _run_mu_c(cfg, g, res):
    o = cfg.options
    iv = estimate_mu_c(g, cfg.model.lam, float(o.get("lo", 0.0)), float(o.get("hi", 1.0)),
                       float(o.get("tol", 0.05)), cfg.trials, o.get("theta"),
                       float(o.get("cutoff", 0.5)), cfg.seed, init=cfg.model.init,
                       budget=cfg.step_budget, parallel=cfg.parallel)
    res.results["mu_c"] = iv.to_dict()
    res.estimate("mu_c_lo", Estimate(iv.lo, 0.0, cfg.trials, cfg.seed))
    res.estimate("mu_c_hi", Estimate(iv.hi, 0.0, cfg.trials, cfg.seed))
    res.trials = [{"mu": m, "activity": e.value} for m, e in iv.evaluations]


def _run_suffcond(cfg, g, res):
    o = cfg.options
    s = estimate_sufficient_condition(g, cfg.model, cfg.trials, cfg.seed, alpha=o.get("alpha"),
                                      delta=o.get("delta"), eps=float(o.get("eps", 0.05)),
                                      parallel=cfg.parallel)
    res.results["suffcond"] = s.to_dict()
    res.estimate("M", s.M)
    res.estimate("M_killed", s.M_killed)
    res.estimate("ratio", Estimate(s.ratio, s.ratio_stderr, cfg.trials, cfg.seed))
    res.checks += s.checks


def _run_branching(cfg, g, res):
    o = cfg.options
    b = simulate_branching(int(o["d"]), float(o["alpha_b"]), float(o["beta"]),
                           int(o["max_steps"]), cfg.trials, cfg.seed,
                           token_budget=cfg.token_budget, parallel=cfg.parallel)
    res.results["branching"] = b.to_dict()
    res.estimate("survival", b.survival)
    res.estimate("drift_factor", Estimate(b.factor, 0.0, 0, cfg.seed))
    res.estimate("psi_ratio_mean", Estimate(b.ratio_mean, b.ratio_stderr, b.ratio_samples,
                                            cfg.seed))
    res.checks += b.checks
    res.trials = [{"survived": t.survived, "censored": t.censored, "steps": t.steps,
                   "min_position": t.min_position} for t in b.trials_detail]


def _run_pack(cfg, g, res):
    keys = _prf.trial_keys(cfg.seed, cfg.trials)
    out = [None] * cfg.trials

    def run(a, b):
        for i in range(a, b):
            r = tree_pack_stabilize(g, cfg.model, int(keys[i]), budget=cfg.step_budget)
            out[i] = {"success": r.success,
                      "failure": r.failure.value if r.failure else None,
                      "final_corrupted": r.corrupted_sizes[-1],
                      "particles_moved": r.particles_moved,
                      "origin_untouched": r.origin_untouched}

    _run_chunked(run, cfg.trials, cfg.parallel)
    res.trials = out
    res.estimate("success", Estimate(*mean_and_se([t["success"] for t in out]), cfg.trials,
                                     cfg.seed))
    bad = sum(t["success"] and not t["origin_untouched"] for t in out)
    res.results["success_with_origin_touched"] = bad


_RUNNERS = {"rw-stats": _run_rw, "stabilize": _run_stabilize, "q-bounds": _run_q,
            "activity": _run_activity, "mu-c": _run_mu_c, "suffcond": _run_suffcond,
            "branching": _run_branching, "tree-pack": _run_pack}


def _summary_rows(cfg, res):
    g = cfg.graph.label() if cfg.graph else "branching"
    L = cfg.graph.radius if cfg.graph else ""
    mu = cfg.model.mu if cfg.model else ""
    lam = cfg.model.lam if cfg.model else ""
    rows = []
    for name, e in res.estimates:
        rows.append([g, L, mu, lam, name, e.value, e.stderr, e.trials, cfg.seed, ""])
    for c in res.checks:
        rows.append([g, L, mu, lam, c.name, c.estimate, c.stderr, cfg.trials, cfg.seed,
                     c.verdict.value])
    return [_jsonable(r) for r in rows]


def build_report(cfg):
    """Run the experiment described by ``cfg`` and return the report as a JSON-ready dict."""
    res = _Result()
    budget_exceeded = False
    error = None
    g = build_graph(cfg.graph) if cfg.graph is not None else None
    try:
        _RUNNERS[cfg.kind](cfg, g, res)
    except StepBudgetExceeded as e:
        budget_exceeded = True
        error = str(e)
    rep = {"schema_version": SCHEMA_VERSION, "kind": cfg.kind, "config": cfg.to_dict(),
           "results": res.results,
           "estimates": {n: e.to_dict() for n, e in res.estimates},
           "checks": [c.to_dict() for c in res.checks],
           "budget_exceeded": budget_exceeded, "error": error,
           "summary": _summary_rows(cfg, res), "trials": res.trials}
    return json.loads(json.dumps(_jsonable(rep)))


def exit_status(report):
    if report["budget_exceeded"]:
        return EXIT_BUDGET
    if any(c["verdict"] == Verdict.VIOLATED.value for c in report["checks"]):
        return EXIT_VIOLATED
    return EXIT_OK


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        w.writerows(report["summary"])
    return out


def _dump_first_tape(cfg, out_dir):
    """Stabilize trial 0 of the run and write the instructions it consumed."""
    g = build_graph(cfg.graph)
    ctx = Context.fresh(g, cfg.model, _prf.trial_key(cfg.seed, 0), budget=cfg.step_budget)
    stabilize(ctx)
    dump_tape(ctx.tape, ctx.odometer, Path(out_dir) / "tape.csv")


def run(cfg, echo=print):
    """Execute ``cfg``, write ``report.json`` and ``summary.csv``, return the exit status."""
    report = build_report(cfg)
    write_report(report, cfg.out_dir)
    if cfg.dump_tape and cfg.graph is not None:
        _dump_first_tape(cfg, cfg.out_dir)
    for c in report["checks"]:
        echo(f"[{c['verdict']}] {c['name']}: estimate {c['estimate']:.6g} {c['sense']} "
             f"bound {c['bound']:.6g}")
    if report["budget_exceeded"]:
        echo(f"budget exceeded: {report['error']}")
    return exit_status(report)


def _first_difference(a, b, path="report"):
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                return f"{path}.{k}", a.get(k), b.get(k)
            d = _first_difference(a[k], b[k], f"{path}.{k}")
            if d:
                return d
        return None
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return f"{path}.length", len(a), len(b)
        for i, (x, y) in enumerate(zip(a, b)):
            d = _first_difference(x, y, f"{path}[{i}]")
            if d:
                return d
        return None
    if a != b or type(a) is not type(b):
        return path, a, b
    return None


def replay(report_path, parallel=None):
    """Re-run a stored report and require a bit-identical result.

    ``parallel`` overrides the stored width; results must not depend on it.
    Raises :class:`MismatchError` naming the first differing field.
    """
    stored = json.loads(Path(report_path).read_text())
    c = dict(stored["config"])
    if parallel is not None:
        c["parallel"] = int(parallel)
    cfg = RunConfig.from_dict(c)
    fresh = build_report(cfg)
    diff = _first_difference(stored, fresh)
    if diff:
        raise MismatchError(*diff)
    return True


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="arw", description="Activated random walk experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run a {kind} experiment")
        s.add_argument("--config", required=True, help="YAML or JSON run config")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--trials", type=int, help="number of trials (overrides the config)")
        s.add_argument("--out", help="output directory (default: out)")
        s.add_argument("--parallel", type=int, help="number of worker threads")
        s.add_argument("--dump-tape", action="store_true",
                       help="write the instructions consumed by trial 0 to tape.csv")
    r = sub.add_parser("replay", help="re-run a report.json and check it is reproduced")
    r.add_argument("report")
    r.add_argument("--parallel", type=int)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "replay":
        try:
            replay(args.report, args.parallel)
        except MismatchError as e:
            print(e, file=sys.stderr)
            return EXIT_VIOLATED
        except (OSError, KeyError, ConfigError, json.JSONDecodeError) as e:
            print(f"cannot replay {args.report}: {e}", file=sys.stderr)
            return EXIT_CONFIG
        print("replay identical")
        return EXIT_OK
    try:
        cfg = load_config(args.config, kind=args.command, seed=args.seed, trials=args.trials,
                          parallel=args.parallel, out_dir=args.out, dump_tape=args.dump_tape)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(cfg)
    except (ValueError, GraphTooLarge, NoSignChange) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
