"""Empirical checks of the limit theory: noise arrays, strong rates, CLT shape
and the permutation ablation.

All array functionals are evaluated at t = 1 unless stated otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps
from scipy.special import kolmogorov, ndtr

from .mlmc import (
    WeightFamily,
    _chunks,
    _map_ordered,
    estimate,
    plan_levels,
)
from .model import Payoff, SdeModel
from .noise import FineIncrementGrid, Permutation, StreamKey, derive_seed, sample_grids
from .scheme import coupled_from_deltas, fine_terminals, coarse_terminals

CLT_TAG = 4

# an RMS error below this fraction of the RMS state is treated as round-off
ZERO_ERROR_REL = 1e-10


class DegenerateDistributionError(ValueError):
    """The sample has zero variance, so it cannot be standardised."""


# -- triangular arrays -------------------------------------------------------


@dataclass(frozen=True)
class NoiseArrays:
    """Terminal values of Z0..Z3 for one grid (indices 0-based: z1[j, j', j''])."""

    z0: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    n: int
    m: int
    q: int


def noise_arrays_batch(deltas) -> dict:
    """Vectorised Z0..Z3 at t = 1 for grids (B, n, m, q); plus terminal W.

    Uses the prefix-sum identities
        sum_{k != k'} A_k' x_k   = (sum A)(sum x) - sum_k A_k x_k
        sum_{k < k'} x_k x_k'^T  = sum_k' E_k' x_k'^T,  E_k = sum_{k'' < k} x_k''
    and likewise a second prefix level for the triple sum.
    """
    x = np.asarray(deltas, dtype=float)
    b, n, m, q = x.shape
    dt = 1.0 / (n * m)
    eye = np.eye(q)

    z0 = np.einsum("bikj,bikl->bjl", x, x)

    a = np.einsum("bikj,bikl->bikjl", x, x) - dt * eye
    cell_sum = x.sum(axis=2)
    z1 = n * (np.einsum("bijl,bip->bjlp", a.sum(axis=2), cell_sum)
              - np.einsum("bikjl,bikp->bjlp", a, x))

    prefix = np.zeros_like(x)
    prefix[:, :, 1:] = np.cumsum(x[:, :, :-1], axis=2)
    c = np.einsum("bikj,bikl->bjl", prefix, x)
    z2 = math.sqrt(n) * (c - np.swapaxes(c, 1, 2))

    # d[k][j'', j'] = sum_{k'' < k' < k} x_{k''}^{j''} x_{k'}^{j'}
    outer = np.einsum("bikp,bikl->bikpl", prefix, x)
    d = np.zeros_like(outer)
    d[:, :, 1:] = np.cumsum(outer[:, :, :-1], axis=2)
    t = np.einsum("bikj,bikpl->bjlp", x, d)  # t[j, j', j'']
    z3 = n * (t + np.transpose(t, (0, 3, 2, 1)))

    return {"z0": z0, "z1": z1, "z2": z2, "z3": z3, "w": cell_sum.sum(axis=1)}


def noise_arrays(grid: FineIncrementGrid) -> NoiseArrays:
    out = noise_arrays_batch(grid.delta[None])
    return NoiseArrays(out["z0"][0], out["z1"][0], out["z2"][0], out["z3"][0],
                       grid.n, grid.m, grid.q)


def theoretical_variance(component: str, idx: tuple, m: int) -> float:
    """Limit variance at t = 1 of one component (0-based indices)."""
    if component == "z1":
        j, jp, _ = idx
        return (2.0 if j == jp else 1.0) * (m - 1) / m**2
    if component == "z2":
        j, jp = idx
        return 0.0 if j == jp else (m - 1) / m
    if component == "z3":
        j, _, jpp = idx
        return (2.0 if j == jpp else 1.0) * (m - 1) * (m - 2) / (3.0 * m**2)
    if component == "w":
        return 1.0
    raise ValueError(f"unknown component {component!r}")


def independent_components(q: int) -> list:
    """(name, index) pairs whose limits are distinct independent Brownian motions."""
    comps = []
    for j in range(q):
        for jp in range(j + 1):
            for jpp in range(q):
                comps.append(("z1", (j, jp, jpp)))
    for j in range(q):
        for jp in range(j):
            comps.append(("z2", (j, jp)))
    for j in range(q):
        for jp in range(q):
            for jpp in range(j + 1):
                comps.append(("z3", (j, jp, jpp)))
    for j in range(q):
        comps.append(("w", (j,)))
    return comps


def component_label(name: str, idx: tuple) -> str:
    return f"{name.upper()}[{','.join(str(i + 1) for i in idx)}]"


@dataclass
class NoiseReport:
    n: int
    m: int
    q: int
    R: int
    seed: int
    rows: list
    z0_mean: np.ndarray
    covariance: np.ndarray
    labels: list
    max_abs_cross_cov: float
    cov_bound: float
    z3_max_abs: float
    z2_antisymmetry_defect: float

    def row(self, label: str) -> dict:
        for r in self.rows:
            if r["component"] == label:
                return r
        raise KeyError(label)


def noise_variance_report(key: StreamKey, n: int, m: int, q: int, R: int,
                          threads: Optional[int] = None) -> NoiseReport:
    """Empirical vs limit variances of Z1..Z3, mean of Z0, and cross-covariances."""
    if R < 2:
        raise ValueError(f"need at least 2 replicates, got R={R}")
    comps = independent_components(q)

    def run(chunk):
        start, cnt = chunk
        arr = noise_arrays_batch(sample_grids(key.with_replicate(start), n, m, q, cnt))
        cols = np.stack([arr[name][(slice(None),) + idx] for name, idx in comps], axis=1)
        z2 = arr["z2"]
        return (cols, arr["z0"].sum(axis=0), float(np.max(np.abs(arr["z3"]), initial=0.0)),
                float(np.max(np.abs(z2 + np.swapaxes(z2, 1, 2)), initial=0.0)))

    parts = _map_ordered(run, _chunks(R, n * m * q * q * q), threads)
    cols = np.concatenate([p[0] for p in parts])
    z0_mean = sum(p[1] for p in parts) / R
    z3_max = max(p[2] for p in parts)
    anti = max(p[3] for p in parts)

    mean = cols.mean(axis=0)
    centred = cols - mean
    var = (centred**2).sum(axis=0) / (R - 1)
    m4 = (centred**4).mean(axis=0)
    rows = []
    for c, (name, idx) in enumerate(comps):
        rows.append({
            "component": component_label(name, idx),
            "empirical_mean": float(mean[c]),
            "empirical_var": float(var[c]),
            "theoretical_var": theoretical_variance(name, idx, m),
            "stderr": float(math.sqrt(max(m4[c] - var[c] ** 2, 0.0) / R)),
        })
    cov = centred.T @ centred / (R - 1)
    off = cov[~np.eye(len(comps), dtype=bool)]
    return NoiseReport(n, m, q, R, key.master_seed, rows, z0_mean, cov,
                       [component_label(nm, ix) for nm, ix in comps],
                       float(np.max(np.abs(off))) if off.size else 0.0,
                       4.0 / math.sqrt(R), z3_max, anti)


# -- regression / normality --------------------------------------------------


def loglog_slope(points) -> tuple[float, float]:
    """OLS slope of log y on log x, with its standard error."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ValueError("coordinates must be positive")
    xs = np.log([p[0] for p in pts])
    if len(set(xs.tolist())) != len(xs):
        raise ValueError("x values must be distinct")
    fit = sps.linregress(xs, np.log([p[1] for p in pts]))
    return float(fit.slope), float(fit.stderr)


def ks_normality(samples) -> tuple[float, float]:
    """Two-sided KS of the standardised sample against N(0, 1), asymptotic p-value."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 20:
        raise ValueError(f"need at least 20 samples, got {n}")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DegenerateDistributionError("sample has zero variance")
    if n < 100:
        warnings.warn("asymptotic KS p-value with fewer than 100 samples", stacklevel=2)
    z = np.sort((x - x.mean()) / sd)
    cdf = ndtr(z)
    i = np.arange(1, n + 1)
    d = max(float(np.max(i / n - cdf)), float(np.max(cdf - (i - 1) / n)))
    return d, float(kolmogorov(math.sqrt(n) * d))


# -- strong rates ------------------------------------------------------------


@dataclass
class RateReport:
    m: int
    R: int
    seed: int
    sigma: str
    n_grid: list
    rms_u: list
    rms_v: list
    var_v: list
    u_slope: Optional[float]
    u_stderr: Optional[float]
    v_slope: Optional[float]
    v_stderr: Optional[float]
    u_zero: bool
    v_zero: bool
    sup_rms_u: Optional[list] = None
    sup_rms_v: Optional[list] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _errors_for_n(model, key, n, m, R, sigmas, sup, threads):
    """Per sigma: (U, V, sup |U|, sup |V|, fine terminal), arrays over the R replicates."""

    def run(chunk):
        start, cnt = chunk
        deltas = sample_grids(key.with_replicate(start), n, m, model.dim_noise, cnt)
        out = []
        if sup:
            cp = coarse_terminals(model, deltas, record=True)
            fp = fine_terminals(model, deltas, record=True, leg="fine")
        for sigma in sigmas:
            if sup:
                ap = fine_terminals(model, deltas, sigma, record=True, leg="antithetic")
                u_path = fp - ap
                v_path = 0.5 * (fp + ap) - cp
                sup_u = np.sqrt((u_path**2).sum(axis=1)).max(axis=0)
                sup_v = np.sqrt((v_path**2).sum(axis=1)).max(axis=0)
                u, v, f = u_path[-1], v_path[-1], fp[-1]
            else:
                f, a, c = coupled_from_deltas(model, deltas, sigma)
                u, v = f - a, 0.5 * (f + a) - c
                sup_u = sup_v = None
            out.append((u, v, sup_u, sup_v, f))
        return out

    parts = _map_ordered(run, _chunks(R, n * m * model.dim_noise), threads)
    results = []
    for s in range(len(sigmas)):
        u = np.concatenate([p[s][0] for p in parts], axis=1)
        v = np.concatenate([p[s][1] for p in parts], axis=1)
        su = np.concatenate([p[s][2] for p in parts]) if sup else None
        sv = np.concatenate([p[s][3] for p in parts]) if sup else None
        f = np.concatenate([p[s][4] for p in parts], axis=1)
        results.append((u, v, su, sv, f))
    return results


def _rms(e) -> float:
    return float(np.sqrt(np.mean(np.sum(e**2, axis=0))))


def strong_rate_report(model: SdeModel, m: int, n_grid: Sequence[int], R: int,
                       sigma: Optional[Permutation] = None, master_seed: int = 0,
                       purpose: str = "rates", sup: bool = False,
                       threads: Optional[int] = None) -> RateReport:
    """RMS of U = X^{nm} - X^{nm,sigma} and V = (X^{nm} + X^{nm,sigma})/2 - X^n over n_grid."""
    n_grid = [int(n) for n in n_grid]
    if len(n_grid) < 4:
        raise ValueError("need at least 4 values of n")
    if R < 100:
        raise ValueError("need R >= 100")
    sigma = sigma or Permutation.reversal(m)
    if sigma.m != m:
        raise ValueError(f"permutation order {sigma.m} != m={m}")
    rms_u, rms_v, var_v, sup_u, sup_v, scale = [], [], [], [], [], []
    for n in n_grid:
        key = StreamKey(master_seed, purpose, n)
        u, v, su, sv, f = _errors_for_n(model, key, n, m, R, [sigma], sup, threads)[0]
        scale.append(_rms(f))
        rms_u.append(_rms(u))
        rms_v.append(_rms(v))
        var_v.append(float(np.sum(np.var(v, axis=1, ddof=1))))
        if sup:
            sup_u.append(float(np.sqrt(np.mean(su**2))))
            sup_v.append(float(np.sqrt(np.mean(sv**2))))

    def fit(rms):
        if any(e <= ZERO_ERROR_REL * max(s, 1e-300) for e, s in zip(rms, scale)):
            return None, None, True
        s, e = loglog_slope(zip(n_grid, rms))
        return s, e, False

    us, ue, uz = fit(rms_u)
    vs, ve, vz = fit(rms_v)
    return RateReport(m, R, master_seed, str(sigma), n_grid, rms_u, rms_v, var_v,
                      us, ue, vs, ve, uz, vz,
                      sup_u if sup else None, sup_v if sup else None)


# -- permutation ablation ----------------------------------------------------


@dataclass
class AblationReport:
    m: int
    R: int
    seed: int
    n_grid: list
    rows: list  # {"sigma", "n", "n2_var_v", "rms_v"}
    reversal_min_at_largest: Optional[bool]

    def series(self, sigma: str) -> list:
        return [r["n2_var_v"] for r in self.rows if r["sigma"] == sigma]


def sigma_ablation(model: SdeModel, m: int, permutations: Sequence[Permutation], n_grid: Sequence[int],
                   R: int, master_seed: int = 0, purpose: str = "ablation",
                   threads: Optional[int] = None) -> AblationReport:
    """n^2 Var(V) at t = 1 (summed over components) for each permutation.

    All permutations see the same grids for a given n.
    """
    if m < 3:
        raise ValueError("the ablation needs m >= 3 (for m = 2 reversal is the only non-identity choice)")
    perms = list(permutations)
    if not perms:
        raise ValueError("no permutations given")
    for p in perms:
        if p.m != m:
            raise ValueError(f"permutation {p} has order {p.m}, expected {m}")
        if p.is_identity:
            raise ValueError("identity permutation is not allowed in the ablation")
    rows = []
    for n in n_grid:
        key = StreamKey(master_seed, purpose, int(n))
        res = _errors_for_n(model, key, int(n), m, R, perms, False, threads)
        for p, (u, v, _, _, _) in zip(perms, res):
            var_v = float(np.sum(np.var(v, axis=1, ddof=1)))
            rows.append({"sigma": str(p), "n": int(n), "n2_var_v": n * n * var_v, "rms_v": _rms(v)})
    rev = Permutation.reversal(m)
    verdict = None
    if any(p == rev for p in perms) and len(perms) > 1:
        last = [r for r in rows if r["n"] == int(n_grid[-1])]
        rv = next(r["n2_var_v"] for r in last if r["sigma"] == str(rev))
        verdict = all(rv <= r["n2_var_v"] for r in last)
    return AblationReport(m, R, master_seed, [int(n) for n in n_grid], rows, verdict)


# -- CLT ---------------------------------------------------------------------


@dataclass
class CltReport:
    R: int
    seed: int
    plan: dict
    qhat: np.ndarray
    standardized: np.ndarray
    ks_statistic: float
    p_value: float
    empirical_mean: float
    empirical_variance: float
    scaled_variance: float  # kappa n^{2 alpha} Var(Q)
    level_scaled_variances: list  # m^{2(l-1)} Var_l, l = 1..L, averaged over replicates
    v_proxy: float
    cost_units_per_estimate: int
    warnings: list = field(default_factory=list)


def clt_report(model: SdeModel, payoff: Payoff, n: int, m: int, alpha: float = 1.0,
               family: Optional[WeightFamily] = None, kappa: float = 1.0, R: int = 400,
               master_seed: int = 0, threads: Optional[int] = None) -> CltReport:
    """R independent estimates, standardised by empirical mean/std, tested with KS."""
    if R < 200:
        raise ValueError(f"need R >= 200, got {R}")
    plan = plan_levels(n, m, alpha, family or WeightFamily(), kappa)
    qhat = np.empty(R)
    level_vars = np.zeros((R, plan.L + 1))
    cost = 0
    for r in range(R):
        res = estimate(model, payoff, plan, derive_seed(master_seed, CLT_TAG, r), threads)
        qhat[r] = res.estimate
        level_vars[r] = [s.variance for s in res.levels]
        cost = res.total_cost_units
    sd = qhat.std(ddof=1)
    if not sd > 0:
        raise DegenerateDistributionError("all estimates are identical; the payoff is degenerate")
    stat, p = ks_normality(qhat)
    mean_lv = level_vars.mean(axis=0)
    scaled = [float(m ** (2 * (ell - 1)) * mean_lv[ell]) for ell in range(1, plan.L + 1)]
    notes = []
    if plan.family.violates_condition_w:
        notes.append("weight family 'optimal' violates condition W (its weights are summable)")
    return CltReport(
        R=R,
        seed=master_seed,
        plan=plan.to_dict(),
        qhat=qhat,
        standardized=(qhat - qhat.mean()) / sd,
        ks_statistic=stat,
        p_value=p,
        empirical_mean=float(qhat.mean()),
        empirical_variance=float(sd**2),
        scaled_variance=float(kappa * n ** (2 * alpha) * sd**2),
        level_scaled_variances=scaled,
        v_proxy=scaled[-1],
        cost_units_per_estimate=cost,
        warnings=notes,
    )
