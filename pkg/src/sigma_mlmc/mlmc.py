"""Level planning, the sigma-antithetic MLMC estimator and cost accounting."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .model import Payoff, SdeModel
from .noise import Permutation, StreamKey, sample_grids
from .scheme import DivergenceError, coarse_terminals, coupled_from_deltas

WEIGHT_KINDS = ("unit", "inv_ell", "inv_ell_log", "optimal")

# grid entries per work chunk; results do not depend on it
CHUNK_ENTRIES = 1 << 19
MAX_CHUNK_REPLICATES = 8192
THREADS_ENV = "SIGMA_MLMC_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class WeightFamily:
    kind: str = "unit"
    a0: float = 1.0

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight family {self.kind!r}; known: {WEIGHT_KINDS}")
        if not self.a0 > 0:
            raise ValueError("a0 must be positive")

    @property
    def violates_condition_w(self) -> bool:
        # a_l = m^{-l/2} is summable, so sum a_l stays bounded
        return self.kind == "optimal"


def weight(family: WeightFamily, ell: int, m: int = 2) -> float:
    if ell < 1:
        raise ValueError(f"weights are defined for ell >= 1, got {ell}")
    if family.kind == "unit":
        return 1.0
    if family.kind == "inv_ell":
        return 1.0 / ell
    if family.kind == "inv_ell_log":
        # 1/(1 log 1) is undefined; use 1/log 2 at ell = 1
        return 1.0 / (ell * math.log(ell if ell > 1 else 2))
    return float(m) ** (-ell / 2.0)


def level_count(n: int, m: int) -> int:
    """L with n == m**L exactly, else ValueError."""
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if n < m:
        raise ValueError(f"n={n} must be a power m**L of m={m} with L >= 1")
    L, k = 0, n
    while k % m == 0:
        k //= m
        L += 1
    if k != 1:
        raise ValueError(f"n={n} is not a power of m={m}")
    return L


def _ceil(x: float) -> int:
    # guard against 1024.0000000000002 style round-off
    return math.ceil(round(x, 9))


@dataclass(frozen=True)
class LevelPlan:
    n: int
    m: int
    alpha: float
    family: WeightFamily
    kappa: float
    L: int
    weights: tuple
    sample_sizes: tuple
    clamped: bool = False

    @property
    def a0(self) -> float:
        return self.family.a0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "alpha": self.alpha,
            "family": self.family.kind,
            "a0": self.family.a0,
            "kappa": self.kappa,
            "L": self.L,
            "weights": list(self.weights),
            "N": list(self.sample_sizes),
            "clamped": self.clamped,
        }


def plan_levels(n: int, m: int, alpha: float = 1.0, family: Optional[WeightFamily] = None,
                kappa: float = 1.0) -> LevelPlan:
    """Sample sizes N_l = kappa n^{2 alpha} (sum_l' a_l') / (m^{2(l-1)} a_l).

    N_0 uses a0 in place of m^{2(0-1)} a_0, i.e. kappa n^{2 alpha} (sum a) / a0.
    Values are rounded up and floored at 2.
    """
    family = family or WeightFamily()
    L = level_count(n, m)
    if not 0.5 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [1/2, 1], got {alpha}")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    a = tuple(weight(family, ell, m) for ell in range(1, L + 1))
    total = math.fsum(a)
    base = kappa * float(n) ** (2 * alpha) * total
    raw = [_ceil(base / family.a0)]
    raw += [_ceil(base / (float(m) ** (2 * (ell - 1)) * a[ell - 1])) for ell in range(1, L + 1)]
    sizes = tuple(max(2, v) for v in raw)
    clamped = sizes != tuple(raw)
    if clamped:
        warnings.warn("kappa is so small that some N_l fell below 2; clamped to 2", stacklevel=2)
    return LevelPlan(n, m, float(alpha), family, float(kappa), L, a, sizes, clamped)


def level_step_cost(ell: int, m: int) -> int:
    """Steps for one level-ell sample: two fine legs of m^ell steps plus m^{ell-1} coarse."""
    if ell == 0:
        return 1
    return 2 * m ** ell + m ** (ell - 1)


def correction_cost(plan: LevelPlan) -> int:
    """sum_{l=1..L} N_l (2 m^l + m^{l-1})."""
    return sum(plan.sample_sizes[ell] * level_step_cost(ell, plan.m) for ell in range(1, plan.L + 1))


def theoretical_cost(plan: LevelPlan) -> int:
    """Correction cost plus N_0 single-step coarse samples."""
    return correction_cost(plan) + plan.sample_sizes[0]


@dataclass
class WeightConditionReport:
    family: str
    p: float
    rows: list
    sums_diverging: bool
    ratio_vanishing: bool
    violates_condition_w: bool


def weight_condition_report(family: WeightFamily, p: float, L_grid, m: int = 2) -> WeightConditionReport:
    """Tabulate sum a_l and (sum a_l^{p/2}) / (sum a_l)^{p/2} over L_grid.

    Trends are judged on the grid only: the sum must increase strictly and the
    ratio must decrease strictly. ``optimal`` is always flagged as violating.
    """
    if not p > 2:
        raise ValueError("p must exceed 2")
    grid = sorted(int(L) for L in L_grid)
    if not grid or grid[0] < 2:
        raise ValueError("every L in the grid must be >= 2")
    rows = []
    for L in grid:
        a = np.array([weight(family, ell, m) for ell in range(1, L + 1)])
        s = math.fsum(a)
        ratio = math.fsum(a ** (p / 2)) / s ** (p / 2)
        rows.append({"L": L, "sum_a": s, "ratio": ratio})
    sums = [r["sum_a"] for r in rows]
    ratios = [r["ratio"] for r in rows]
    diverging = all(b > a for a, b in zip(sums, sums[1:]))
    vanishing = all(b < a for a, b in zip(ratios, ratios[1:]))
    return WeightConditionReport(family.kind, p, rows, diverging, vanishing, family.violates_condition_w)


# -- estimator ---------------------------------------------------------------


def _chunks(total: int, per_replicate: int):
    size = max(64, min(MAX_CHUNK_REPLICATES, CHUNK_ENTRIES // max(1, per_replicate)))
    return [(s, min(size, total - s)) for s in range(0, total, size)]


def _map_ordered(fn, items, threads: Optional[int]):
    threads = threads or default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def sample_level(model: SdeModel, payoff: Payoff, m: int, ell: int, count: int, master_seed: int,
                 threads: Optional[int] = None) -> np.ndarray:
    """Per-replicate level samples in replicate order.

    ell = 0: phi of a single coarse step (n = 1).
    ell >= 1: (phi(fine) + phi(antithetic))/2 - phi(coarse) on grids with
    n = m^{ell-1} coarse cells, reversal permutation.
    """
    key = StreamKey(master_seed, "mlmc-level", ell)
    q = model.dim_noise
    n = 1 if ell == 0 else m ** (ell - 1)
    sigma = Permutation.reversal(m)

    def run(chunk):
        start, cnt = chunk
        deltas = sample_grids(key.with_replicate(start), n, m, q, cnt)
        try:
            if ell == 0:
                return payoff(coarse_terminals(model, deltas))
            fine, anti, coarse = coupled_from_deltas(model, deltas, sigma)
        except DivergenceError as exc:
            raise DivergenceError(exc.step, exc.leg,
                                  f" (level {ell}, replicates {start}..{start + cnt - 1})") from exc
        return 0.5 * (payoff(fine) + payoff(anti)) - payoff(coarse)

    parts = _map_ordered(run, _chunks(count, n * m * q), threads)
    return np.concatenate(parts)


@dataclass
class LevelStats:
    ell: int
    N: int
    mean: float
    variance: float
    cost_units: int


@dataclass
class MlmcResult:
    estimate: float
    levels: list
    total_cost_units: int
    correction_cost_units: int
    seed: int
    plan: LevelPlan
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "levels": [asdict(s) for s in self.levels],
            "total_cost_units": self.total_cost_units,
            "correction_cost_units": self.correction_cost_units,
            "seed": self.seed,
            "plan": self.plan.to_dict(),
            "warnings": list(self.warnings),
        }


def estimate(model: SdeModel, payoff: Payoff, plan: LevelPlan, master_seed: int,
             threads: Optional[int] = None) -> MlmcResult:
    """Q = Q_0 + sum_l Q_l with independent, disjointly keyed levels."""
    stats = []
    for ell, N in enumerate(plan.sample_sizes):
        y = sample_level(model, payoff, plan.m, ell, N, master_seed, threads)
        stats.append(LevelStats(ell, N, float(np.mean(y)), float(np.var(y, ddof=1)),
                                N * level_step_cost(ell, plan.m)))
    notes = []
    if plan.family.violates_condition_w:
        notes.append("weight family 'optimal' violates condition W (its weights are summable); the CLT is not guaranteed")
    if plan.clamped:
        notes.append("some sample sizes were clamped to 2")
    return MlmcResult(
        estimate=math.fsum(s.mean for s in stats),
        levels=stats,
        total_cost_units=theoretical_cost(plan),
        correction_cost_units=correction_cost(plan),
        seed=master_seed,
        plan=plan,
        warnings=notes,
    )


def kappa_for_cost(n: int, m: int, alpha: float, family: WeightFamily, target_cost: float) -> float:
    """kappa whose plan has total cost closest to ``target_cost`` (ignoring rounding)."""
    base = plan_levels(n, m, alpha, family, 1.0)
    return target_cost / theoretical_cost(base)
