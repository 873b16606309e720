"""Command-line entry point.

Every command reads an optional flat JSON config (``--config``), lets flags
override it, validates the result and writes CSV/JSON documents into
``--out``. Each JSON document carries the resolved config and the seed, so a
rerun with the same config reproduces it bit for bit.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import limitlaw, mlmc
from .model import MODELS, PAYOFFS, EvaluationError, get_model, get_payoff, payoff_dim_ok
from .noise import Permutation, StreamKey
from .scheme import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# -- parsing helpers ---------------------------------------------------------


def parse_n_grid(text) -> list:
    """'8,16,32', '2^4..2^12' or a JSON list -> sorted list of ints."""
    if isinstance(text, (list, tuple)):
        return sorted(int(v) for v in text)
    text = str(text).replace(" ", "")
    rng = re.fullmatch(r"(\d+)\^(\d+)\.\.(\d+)\^(\d+)", text)
    if rng:
        b1, e1, b2, e2 = map(int, rng.groups())
        if b1 != b2 or e1 > e2:
            raise ConfigError(f"bad n-grid range {text!r}")
        return [b1 ** e for e in range(e1, e2 + 1)]
    out = []
    for part in filter(None, text.split(",")):
        if "^" in part:
            b, e = part.split("^")
            out.append(int(b) ** int(e))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError("empty n-grid")
    return sorted(out)


def parse_params(items) -> dict:
    """['a=0.3', 'x0=[1,0]'] -> {'a': 0.3, 'x0': [1, 0]} (values parsed as JSON)."""
    if isinstance(items, dict):
        return dict(items)
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"model parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            params[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            params[k.strip()] = v
    return params


def parse_permutations(text, m: int) -> list:
    """'3,2,1;2,1,3' or 'all' (every non-identity permutation of 1..m)."""
    if text in (None, "", "all"):
        perms = [Permutation(p) for p in itertools.permutations(range(1, m + 1))]
        return [p for p in perms if not p.is_identity]
    if isinstance(text, (list, tuple)):
        return [Permutation.parse(str(t)) for t in text]
    return [Permutation.parse(t) for t in str(text).split(";") if t.strip()]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, config: dict, result: dict) -> None:
    doc = {"config": config, "seed": config["seed"], "result": result}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- config ------------------------------------------------------------------

# flag name -> (type, default); the JSON config uses the same names with
# dashes replaced by underscores
_OPTIONS = {
    "model": (str, None),
    "param": (str, None),
    "payoff": (str, "x2"),
    "m": (int, 2),
    "n": (int, None),
    "n-grid": (str, None),
    "q": (int, 2),
    "R": (int, None),
    "alpha": (float, 1.0),
    "weights": (str, "unit"),
    "a0": (float, 1.0),
    "kappa": (float, None),
    "target-cost": (float, None),
    "sigma": (str, None),
    "permutations": (str, "all"),
    "sup": (bool, False),
}

_COMMAND_OPTIONS = {
    "rates": ["model", "param", "m", "n-grid", "R", "sigma", "sup"],
    "noise": ["m", "q", "n", "R"],
    "estimate": ["model", "param", "payoff", "m", "n", "alpha", "weights", "a0", "kappa", "target-cost"],
    "clt": ["model", "param", "payoff", "m", "n", "alpha", "weights", "a0", "kappa", "target-cost", "R"],
    "ablation": ["model", "param", "m", "n-grid", "R", "permutations"],
    "complexity": ["m", "n-grid", "weights", "alpha", "a0", "kappa"],
    "models": [],
}

_R_DEFAULTS = {"rates": 4000, "noise": 100000, "clt": 400, "ablation": 4000}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so that a global flag given before the command survives the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat JSON file of option values; flags override it")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int,
                        help=f"worker threads (default: ${mlmc.THREADS_ENV} or all cores)")

    parser = argparse.ArgumentParser(prog="sigma-mlmc", description=__doc__.split("\n\n")[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "rates": "strong error rates of U and V over an n grid",
        "noise": "empirical vs limit variances of the noise arrays",
        "estimate": "one multilevel estimate",
        "clt": "normality check of R independent estimates",
        "ablation": "compare permutations by n^2 Var(V)",
        "complexity": "planned cost over an n grid for several weight families",
        "models": "list built-in models and payoffs",
    }
    for name, opts in _COMMAND_OPTIONS.items():
        p = sub.add_parser(name, help=helps[name], parents=[common])
        for opt in opts:
            typ, _ = _OPTIONS[opt]
            dest = opt.replace("-", "_")
            if typ is bool:
                p.add_argument(f"--{opt}", dest=dest, action="store_true", default=None)
            elif opt == "param":
                p.add_argument("--param", dest="param", action="append", default=None,
                               metavar="KEY=VALUE", help="model parameter (repeatable)")
            else:
                p.add_argument(f"--{opt}", dest=dest, type=typ, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags; validate."""
    cmd = args.command
    cfg = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        cfg.update(loaded)
    known = {o.replace("-", "_") for o in _COMMAND_OPTIONS[cmd]} | {"seed", "command"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
    for opt in _COMMAND_OPTIONS[cmd]:
        dest = opt.replace("-", "_")
        flag = getattr(args, dest, None)
        if flag is not None:
            cfg[dest] = flag
        cfg.setdefault(dest, _OPTIONS[opt][1])
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    cfg["command"] = cmd
    if "R" in cfg and cfg["R"] is None:
        cfg["R"] = _R_DEFAULTS[cmd]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    cmd = cfg["command"]
    seed = cfg["seed"]
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cmd == "models":
        return
    m = cfg["m"]
    if not isinstance(m, int) or m < 2:
        raise ConfigError(f"m must be an integer >= 2, got {m!r}")
    if "model" in cfg:
        if cfg["model"] is None:
            raise ConfigError("--model is required")
        if cfg["model"] not in MODELS:
            raise ConfigError(f"unknown model {cfg['model']!r}; known: {sorted(MODELS)}")
        cfg["param"] = parse_params(cfg["param"])
        try:
            model = get_model(cfg["model"], **cfg["param"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model parameters: {exc}") from None
    if "payoff" in cfg:
        if cfg["payoff"] not in PAYOFFS:
            raise ConfigError(f"unknown payoff {cfg['payoff']!r}; known: {sorted(PAYOFFS)}")
        if not payoff_dim_ok(cfg["payoff"], model):
            raise ConfigError(f"payoff {cfg['payoff']} needs more state components than {cfg['model']} has")
    if "n" in cfg:
        if cfg["n"] is None:
            raise ConfigError("--n is required")
        if cmd == "noise":
            if cfg["n"] < 1:
                raise ConfigError("n must be >= 1")
        else:
            _check_power(cfg["n"], m)
    if "n_grid" in cfg:
        if cfg["n_grid"] is None:
            raise ConfigError("--n-grid is required")
        try:
            grid = parse_n_grid(cfg["n_grid"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for n in grid:
            _check_power(n, m)
        if len(set(grid)) != len(grid):
            raise ConfigError("n-grid has duplicates")
        cfg["n_grid"] = grid
        if cmd == "rates" and len(grid) < 4:
            raise ConfigError("rates needs at least 4 grid points")
    if "R" in cfg:
        r_min = {"rates": 100, "noise": 2, "clt": 200, "ablation": 2}[cmd]
        if not isinstance(cfg["R"], int) or cfg["R"] < r_min:
            raise ConfigError(f"R must be an integer >= {r_min} for {cmd}")
    if "alpha" in cfg and not 0.5 <= cfg["alpha"] <= 1.0:
        raise ConfigError("alpha must lie in [1/2, 1]")
    if "weights" in cfg:
        kinds = [w for w in str(cfg["weights"]).split(",") if w]
        bad = [w for w in kinds if w not in mlmc.WEIGHT_KINDS]
        if bad or not kinds:
            raise ConfigError(f"unknown weight family {bad}; known: {mlmc.WEIGHT_KINDS}")
        if cmd != "complexity" and len(kinds) != 1:
            raise ConfigError(f"{cmd} takes a single weight family")
        if cfg["a0"] <= 0:
            raise ConfigError("a0 must be positive")
    if "kappa" in cfg:
        if cfg.get("target_cost") is not None:
            if cfg["kappa"] is not None:
                raise ConfigError("give either kappa or target-cost, not both")
            if cfg["target_cost"] <= 0:
                raise ConfigError("target-cost must be positive")
        elif cfg["kappa"] is None:
            cfg["kappa"] = 1.0
        if cfg["kappa"] is not None and cfg["kappa"] <= 0:
            raise ConfigError("kappa must be positive")
    if cmd == "rates" and cfg.get("sigma"):
        try:
            sigma = Permutation.parse(cfg["sigma"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if sigma.m != m:
            raise ConfigError(f"sigma has order {sigma.m}, expected m={m}")
    if cmd == "ablation":
        if m < 3:
            raise ConfigError("ablation needs m >= 3")
        try:
            perms = parse_permutations(cfg["permutations"], m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if any(p.m != m or p.is_identity for p in perms) or not perms:
            raise ConfigError(f"permutations must be non-identity permutations of 1..{m}")


def _check_power(n, m) -> None:
    try:
        mlmc.level_count(int(n), m)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- commands ----------------------------------------------------------------


def _family(cfg, kind=None) -> mlmc.WeightFamily:
    return mlmc.WeightFamily(kind or cfg["weights"], cfg["a0"])


def _plan(cfg) -> mlmc.LevelPlan:
    family = _family(cfg)
    kappa = cfg["kappa"]
    if cfg.get("target_cost") is not None:
        kappa = mlmc.kappa_for_cost(cfg["n"], cfg["m"], cfg["alpha"], family, cfg["target_cost"])
    return mlmc.plan_levels(cfg["n"], cfg["m"], cfg["alpha"], family, kappa)


def cmd_rates(cfg, out: Path, threads) -> dict:
    model = get_model(cfg["model"], **cfg["param"])
    sigma = Permutation.parse(cfg["sigma"]) if cfg.get("sigma") else None
    rep = limitlaw.strong_rate_report(model, cfg["m"], cfg["n_grid"], cfg["R"], sigma,
                                      cfg["seed"], sup=bool(cfg["sup"]), threads=threads)
    header = ["n", "rms_u", "rms_v", "var_v"]
    cols = [rep.n_grid, rep.rms_u, rep.rms_v, rep.var_v]
    if rep.sup_rms_u is not None:
        header += ["sup_rms_u", "sup_rms_v"]
        cols += [rep.sup_rms_u, rep.sup_rms_v]
    write_csv(out / "rates.csv", header, zip(*cols))
    result = rep.to_dict()
    write_json(out / "rates.json", cfg, result)

    def show(s, e, zero):
        return "round-off (no slope)" if zero else f"{s:.4f} +/- {e:.4f}"

    print(f"U slope: {show(rep.u_slope, rep.u_stderr, rep.u_zero)}")
    print(f"V slope: {show(rep.v_slope, rep.v_stderr, rep.v_zero)}")
    return result


def cmd_noise(cfg, out: Path, threads) -> dict:
    key = StreamKey(cfg["seed"], "noise", cfg["n"])
    rep = limitlaw.noise_variance_report(key, cfg["n"], cfg["m"], cfg["q"], cfg["R"], threads)
    write_csv(out / "noise.csv", ["component", "empirical_mean", "empirical_var", "theoretical_var", "stderr"],
              ([r["component"], r["empirical_mean"], r["empirical_var"], r["theoretical_var"], r["stderr"]]
               for r in rep.rows))
    result = {
        "n": rep.n, "m": rep.m, "q": rep.q, "R": rep.R,
        "rows": rep.rows,
        "z0_mean": rep.z0_mean,
        "labels": rep.labels,
        "max_abs_cross_cov": rep.max_abs_cross_cov,
        "cov_bound": rep.cov_bound,
        "z3_max_abs": rep.z3_max_abs,
        "z2_antisymmetry_defect": rep.z2_antisymmetry_defect,
    }
    write_json(out / "noise.json", cfg, result)
    for r in rep.rows:
        if not r["component"].startswith("W"):
            print(f"{r['component']:>12}  var {r['empirical_var']:.5f}  limit {r['theoretical_var']:.5f}")
    print(f"max |cross cov| {rep.max_abs_cross_cov:.5f} (bound {rep.cov_bound:.5f})")
    return result


def cmd_estimate(cfg, out: Path, threads) -> dict:
    model = get_model(cfg["model"], **cfg["param"])
    plan = _plan(cfg)
    res = mlmc.estimate(model, get_payoff(cfg["payoff"]), plan, cfg["seed"], threads)
    result = res.to_dict()
    result["violates_condition_w"] = plan.family.violates_condition_w
    write_json(out / "mlmc.json", cfg, result)
    write_csv(out / "mlmc_levels.csv", ["level", "N", "mean", "variance", "cost_units"],
              ([s.ell, s.N, s.mean, s.variance, s.cost_units] for s in res.levels))
    print(f"estimate {res.estimate:.10g}  N={list(plan.sample_sizes)}  correction cost {res.correction_cost_units}")
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return result


def cmd_clt(cfg, out: Path, threads) -> dict:
    model = get_model(cfg["model"], **cfg["param"])
    plan = _plan(cfg)
    rep = limitlaw.clt_report(model, get_payoff(cfg["payoff"]), plan.n, plan.m, plan.alpha, plan.family,
                              plan.kappa, cfg["R"], cfg["seed"], threads)
    write_csv(out / "clt.csv", ["replicate", "qhat", "standardized"],
              zip(range(rep.R), rep.qhat, rep.standardized))
    result = {k: v for k, v in rep.__dict__.items() if k not in ("qhat", "standardized")}
    result["violates_condition_w"] = plan.family.violates_condition_w
    write_json(out / "clt.json", cfg, result)
    print(f"KS D={rep.ks_statistic:.4f} p={rep.p_value:.4f}  scaled variance {rep.scaled_variance:.6g}")
    return result


def cmd_ablation(cfg, out: Path, threads) -> dict:
    model = get_model(cfg["model"], **cfg["param"])
    perms = parse_permutations(cfg["permutations"], cfg["m"])
    rep = limitlaw.sigma_ablation(model, cfg["m"], perms, cfg["n_grid"], cfg["R"], cfg["seed"],
                                  threads=threads)
    write_csv(out / "ablation.csv", ["sigma", "n", "n2_var_v", "rms_v"],
              ([r["sigma"], r["n"], r["n2_var_v"], r["rms_v"]] for r in rep.rows))
    result = {"m": rep.m, "R": rep.R, "n_grid": rep.n_grid, "rows": rep.rows,
              "reversal_min_at_largest": rep.reversal_min_at_largest}
    write_json(out / "ablation.json", cfg, result)
    for r in rep.rows:
        if r["n"] == rep.n_grid[-1]:
            print(f"{r['sigma']:>10}  n^2 Var(V) = {r['n2_var_v']:.6g}")
    return result


def complexity_table(m: int, n_grid, kinds, alpha=1.0, a0=1.0, kappa=1.0) -> list:
    """Rows (family, n, paper_cost, cost_over_n2) for each family and n."""
    rows = []
    for kind in kinds:
        family = mlmc.WeightFamily(kind, a0)
        for n in n_grid:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                plan = mlmc.plan_levels(n, m, alpha, family, kappa)
            cost = mlmc.correction_cost(plan)
            rows.append({"family": kind, "n": n, "paper_cost": cost, "cost_over_n2": cost / n**2})
    return rows


def complexity_summary(rows) -> dict:
    """Per family: spread max/min of cost/n^2 and of (cost/n^2)/log n across the grid."""
    out = {}
    for kind in dict.fromkeys(r["family"] for r in rows):
        sub = [r for r in rows if r["family"] == kind]
        c = np.array([r["cost_over_n2"] for r in sub])
        per_log = c / np.log([r["n"] for r in sub])
        out[kind] = {
            "cost_over_n2_spread": float(c.max() / c.min()),
            "cost_over_n2_last_change": float(abs(c[-1] / c[-2] - 1.0)) if len(c) > 1 else 0.0,
            "per_log_n_spread": float(per_log.max() / per_log.min()),
        }
    return out


def cmd_complexity(cfg, out: Path, threads) -> dict:
    kinds = [w for w in cfg["weights"].split(",") if w]
    rows = complexity_table(cfg["m"], cfg["n_grid"], kinds, cfg["alpha"], cfg["a0"], cfg["kappa"])
    write_csv(out / "complexity.csv", ["family", "n", "paper_cost", "cost_over_n2"],
              ([r["family"], r["n"], r["paper_cost"], r["cost_over_n2"]] for r in rows))
    result = {"rows": rows, "summary": complexity_summary(rows)}
    write_json(out / "complexity.json", cfg, result)
    for kind, s in result["summary"].items():
        print(f"{kind:>12}  spread of cost/n^2 {s['cost_over_n2_spread']:.4f}  "
              f"of cost/(n^2 log n) {s['per_log_n_spread']:.4f}")
    return result


def cmd_models(cfg, out: Path, threads) -> dict:
    models = {}
    for mid in MODELS:
        mod = get_model(mid)
        models[mid] = {"dim_state": mod.dim_state, "dim_noise": mod.dim_noise,
                       "params": mod.params, "facts": mod.facts}
    payoffs = {pid: get_payoff(pid).description for pid in PAYOFFS}
    for mid, info in models.items():
        print(f"{mid:>14}  d={info['dim_state']} q={info['dim_noise']}  {info['facts']}")
    for pid, desc in payoffs.items():
        print(f"{pid:>14}  {desc}")
    return {"models": models, "payoffs": payoffs}


COMMANDS = {
    "rates": cmd_rates,
    "noise": cmd_noise,
    "estimate": cmd_estimate,
    "clt": cmd_clt,
    "ablation": cmd_ablation,
    "complexity": cmd_complexity,
    "models": cmd_models,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError, KeyError) as exc:
        parser.print_usage(sys.stderr)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = getattr(args, "threads", None) or mlmc.default_threads()
    out = Path(getattr(args, "out", None) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"configuration error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[cfg["command"]](cfg, out, threads)
    except limitlaw.DegenerateDistributionError as exc:
        print(f"error: degenerate distribution: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DivergenceError, EvaluationError) as exc:
        print(f"error: simulation diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything past validation is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
