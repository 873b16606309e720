"""Truncated Milstein stepping and the coupled coarse / fine / antithetic legs.

One step from x with time step dt and Brownian increment dW reads

    x + f(x) dt + g(x) dW + sum_{j,j'} h_{.jj'}(x) (dW_j dW_j' - delta_{jj'} dt)

i.e. the Milstein scheme with the Levy-area term dropped. The fine legs use
dt = 1/(nm) and consume the m increments of each coarse cell in the order
given by a permutation; the coarse leg uses dt = 1/n and the cell sums.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import SdeModel
from .noise import (
    FineIncrementGrid,
    Permutation,
    StreamKey,
    coarse_increments,
    sample_grids,
)


class DivergenceError(RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, step: int, leg: str = "", detail: str = ""):
        self.step = step
        self.leg = leg
        where = f" in {leg} leg" if leg else ""
        super().__init__(f"non-finite state at step {step}{where}{detail}")


def _increment(model: SdeModel, x: np.ndarray, dt: float, dw: np.ndarray) -> np.ndarray:
    g = model.diffusion(x)
    h = np.einsum("ljk...,kp...->ljp...", model.jacobian(x), g)
    h *= 0.5
    # g dW + H:(dW dW^T) folded into one contraction against dW
    eff = g + np.einsum("ljp...,p...->lj...", h, dw)
    return (model.drift(x) * dt + np.einsum("lj...,j...->l...", eff, dw)
            - dt * np.einsum("ljj...->l...", h))


def milstein_step(model: SdeModel, x, dt: float, dW) -> np.ndarray:
    """One truncated Milstein step.

    ``x`` is (d,) or (d, B) and ``dW`` is (q,) or (q, B) correspondingly.
    """
    x = np.asarray(x, dtype=float)
    out = x + _increment(model, x, dt, np.asarray(dW, dtype=float))
    if not np.all(np.isfinite(out)):
        raise DivergenceError(1)
    return out


def run_steps(model: SdeModel, x0, increments, dt: float, record_every: Optional[int] = None, leg: str = ""):
    """Iterate the step over increments of shape (steps, q, B) from x0 (d,).

    Returns terminal states (d, B), or with ``record_every`` the states after
    every that many steps, shape (steps // record_every + 1, d, B).
    """
    inc = np.asarray(increments)
    steps, _, batch = inc.shape
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float)[:, None], (model.dim_state, batch)))
    path = [x] if record_every else None
    for s in range(steps):
        x = x + _increment(model, x, dt, inc[s])
        if not np.isfinite(x).all():
            raise DivergenceError(s + 1, leg)
        if record_every and (s + 1) % record_every == 0:
            path.append(x)
    return np.stack(path) if record_every else x


def _batch_last(deltas) -> np.ndarray:
    """(B, n, m, q) -> contiguous (n, m, q, B)."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(deltas), 0, -1))


def coarse_terminals(model: SdeModel, deltas, record: bool = False) -> np.ndarray:
    """Coarse leg for grids (B, n, m, q): n steps of size 1/n. Returns (d, B)."""
    cells = _batch_last(deltas)
    n = cells.shape[0]
    coarse = coarse_increments(np.moveaxis(cells, -1, 0))  # (B, n, q)
    inc = np.ascontiguousarray(np.moveaxis(coarse, 0, -1))  # (n, q, B)
    return run_steps(model, model.initial_state, inc, 1.0 / n,
                     record_every=1 if record else None, leg="coarse")


def fine_terminals(model: SdeModel, deltas, sigma: Optional[Permutation] = None,
                   record: bool = False, fine_resolution: bool = False, leg: str = "fine") -> np.ndarray:
    """Fine leg for grids (B, n, m, q): nm steps of size 1/(nm), cells read in sigma order."""
    cells = _batch_last(deltas)
    n, m, q, b = cells.shape
    if sigma is not None:
        if sigma.m != m:
            raise ValueError(f"permutation order {sigma.m} != grid refinement {m}")
        if not sigma.is_identity:
            cells = cells[:, sigma.index]
    every = None
    if record or fine_resolution:
        every = 1 if fine_resolution else m
    return run_steps(model, model.initial_state, cells.reshape(n * m, q, b), 1.0 / (n * m),
                     record_every=every, leg=leg)


def simulate_coarse(model: SdeModel, grid: FineIncrementGrid) -> np.ndarray:
    """Coarse trajectory at t = i/n, shape (n + 1, d)."""
    return coarse_terminals(model, grid.delta[None], record=True)[..., 0]


def simulate_fine(model: SdeModel, grid: FineIncrementGrid, sigma: Optional[Permutation] = None,
                  fine_resolution: bool = False) -> np.ndarray:
    """Fine trajectory at coarse times (n + 1, d), or every fine time with ``fine_resolution``."""
    return fine_terminals(model, grid.delta[None], sigma, record=True,
                          fine_resolution=fine_resolution)[..., 0]


@dataclass(frozen=True)
class CoupledTriple:
    fine_terminal: np.ndarray
    antithetic_terminal: np.ndarray
    coarse_terminal: np.ndarray
    n: int
    m: int
    sigma: Permutation
    fine_path: Optional[np.ndarray] = None
    antithetic_path: Optional[np.ndarray] = None
    coarse_path: Optional[np.ndarray] = None

    @property
    def average_terminal(self) -> np.ndarray:
        return 0.5 * (self.fine_terminal + self.antithetic_terminal)


def coupled_from_deltas(model: SdeModel, deltas, sigma: Permutation):
    """(fine, antithetic, coarse) terminal states, each (d, B), on shared grids (B, n, m, q)."""
    deltas = np.asarray(deltas)
    if sigma.is_identity:
        fine = fine_terminals(model, deltas, leg="fine")
        anti = fine.copy()
    else:
        # both fine legs advance as one batch of 2B paths
        both = fine_terminals(model, np.concatenate([deltas, deltas[:, :, sigma.index]]),
                              leg="fine/antithetic")
        b = deltas.shape[0]
        fine, anti = both[:, :b], both[:, b:]
    return fine, anti, coarse_terminals(model, deltas)


def coupled_terminals(model: SdeModel, key: StreamKey, n: int, m: int, sigma: Permutation,
                      count: int):
    """Terminal states for ``count`` consecutive replicates starting at key.replicate_index."""
    return coupled_from_deltas(model, sample_grids(key, n, m, model.dim_noise, count), sigma)


def coupled_triple(model: SdeModel, key: StreamKey, n: int, m: int,
                   sigma: Optional[Permutation] = None, trajectories: bool = False) -> CoupledTriple:
    """Coarse, fine and sigma-antithetic legs on the single grid drawn from ``key``."""
    if n < 1 or m < 2:
        raise ValueError(f"need n >= 1 and m >= 2, got n={n}, m={m}")
    sigma = sigma or Permutation.reversal(m)
    grid = sample_grids(key, n, m, model.dim_noise, 1)
    if not trajectories:
        fine, anti, coarse = coupled_from_deltas(model, grid, sigma)
        return CoupledTriple(fine[:, 0], anti[:, 0], coarse[:, 0], n, m, sigma)
    fp = fine_terminals(model, grid, record=True, leg="fine")[..., 0]
    ap = fine_terminals(model, grid, sigma, record=True, leg="antithetic")[..., 0]
    cp = coarse_terminals(model, grid, record=True)[..., 0]
    return CoupledTriple(fp[-1], ap[-1], cp[-1], n, m, sigma, fp, ap, cp)


def write_trajectories_csv(triple: CoupledTriple, path) -> None:
    """Columns (leg, i, t, x_1..x_d) at coarse times."""
    if triple.fine_path is None:
        raise ValueError("triple was simulated without trajectories")
    d = triple.fine_path.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["leg", "i", "t"] + [f"x_{l + 1}" for l in range(d)])
        for leg, path_ in (("fine", triple.fine_path), ("antithetic", triple.antithetic_path),
                           ("coarse", triple.coarse_path)):
            for i, x in enumerate(path_):
                w.writerow([leg, i, f"{i / triple.n:.17g}"] + [f"{v:.17g}" for v in x])
