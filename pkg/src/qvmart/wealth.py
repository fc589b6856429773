"""Pathwise wealth dynamics for proportion strategies: simple integrals,
continuous and jump stochastic exponentials, the left-endpoint residual of
the wealth recursion dW = W pi dS, and log-utility aggregation.

The jump exponential is computed in its factorized form

    W_t = exp( sum pi dS^c - 1/2 sum pi^2 d[S]^c ) * prod (1 + pi dS_jump),

algebraically identical to exponential-times-compensated-jump-products
but immune to overflow when individual jumps are huge: the raw jump
terms inside the exponent cancel exactly against the ``exp(-pi dS)``
jump compensators, so they are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .path_core import QVPath, SamplePath, TimeGrid

__all__ = [
    "WealthPath",
    "UtilityReport",
    "simple_integral",
    "stoch_exp_continuous",
    "stoch_exp_jumps",
    "dd_residual",
    "log_utility",
    "log_utility_from_terminals",
    "terminal_log_wealth_continuous",
    "terminal_log_wealth_jumps",
]


@dataclass(frozen=True)
class WealthPath:
    """Wealth along the grid, started at 1.

    ``hit_nonpositive`` marks a jump wipe-out; from the first nonpositive
    time onward the values are frozen (log utility is ruined either way,
    and freezing keeps downstream sums finite).
    """

    grid: TimeGrid
    values: np.ndarray
    hit_nonpositive: bool = False
    first_nonpositive_time: float | None = None

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if vals.shape != self.grid.points.shape:
            raise ContractViolation("values must align with grid points")
        if vals[0] != 1.0:
            raise ContractViolation("wealth starts at 1")

    @property
    def terminal(self) -> float:
        return float(self.values[-1])


@dataclass(frozen=True)
class UtilityReport:
    """Monte-Carlo estimate of expected log terminal wealth.

    A single nonpositive terminal wealth sends the estimate to -inf;
    the count of such paths is reported separately.
    """

    estimate: float
    stderr: float
    n_paths: int
    n_nonpositive: int

    def as_dict(self) -> dict:
        est = self.estimate
        return {
            "estimate": "-inf" if est == -np.inf else float(est),
            "stderr": float(self.stderr),
            "n_paths": self.n_paths,
            "n_nonpositive": self.n_nonpositive,
        }


def simple_integral(pi: np.ndarray, path: SamplePath) -> SamplePath:
    """Cumulative sum of pi times the path increments (jumps included).

    The integrand is the per-cell step function; the result jumps by
    pi * (jump size) wherever the path jumps and pi is nonzero there.
    """
    pi = np.asarray(pi, dtype=float)
    grid = path.grid
    if pi.shape != (grid.n_steps,):
        raise ContractViolation("pi must hold one value per grid cell")
    vals = np.empty(grid.points.size)
    vals[0] = 0.0
    np.cumsum(pi * path.increments(), out=vals[1:])
    jumps = []
    for idx, size in zip(path.jump_indices, path.jump_sizes):
        scaled = pi[idx - 1] * size
        if scaled != 0.0:
            jumps.append((float(grid.points[idx]), float(scaled)))
    return SamplePath(grid, vals, tuple(jumps))


def _exp_kernel(
    grid: TimeGrid,
    pi: np.ndarray,
    cont_inc: np.ndarray,
    dqv: np.ndarray,
    jump_cells: np.ndarray,
    jump_sizes: np.ndarray,
) -> WealthPath:
    log_cont = np.cumsum(pi * cont_inc - 0.5 * pi * pi * dqv)
    w = np.empty(grid.points.size)
    w[0] = 1.0
    w[1:] = np.exp(log_cont)
    if jump_cells.size == 0:
        return WealthPath(grid, w)
    factors = np.ones(grid.n_steps)
    np.multiply.at(factors, jump_cells, 1.0 + pi[jump_cells] * jump_sizes)
    cumfac = np.cumprod(factors)
    w[1:] *= cumfac
    nonpos = cumfac <= 0.0
    if not nonpos.any():
        return WealthPath(grid, w)
    k = int(np.argmax(nonpos))  # first cell whose cumulative factor died
    w[k + 2 :] = w[k + 1]
    return WealthPath(grid, w, True, float(grid.points[k + 1]))


def stoch_exp_continuous(pi: np.ndarray, path: SamplePath, qv: QVPath) -> WealthPath:
    """exp( integral of pi dS minus half the integral of pi^2 d[S] ).

    Strictly positive on every input; the variation increments come from
    the path's own running variation, not from model parameters.
    """
    if path.jumps:
        raise ContractViolation("continuous exponential needs a jump-free path")
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (path.grid.n_steps,):
        raise ContractViolation("pi must hold one value per grid cell")
    return _exp_kernel(
        path.grid, pi, np.diff(path.values), np.diff(qv.values), np.empty(0, int), np.empty(0)
    )


def stoch_exp_jumps(pi: np.ndarray, path: SamplePath, qv_continuous: QVPath) -> WealthPath:
    """Jump stochastic exponential; ``qv_continuous`` excludes jump terms.

    Nonpositive wealth is a flagged outcome, not an error: the first
    factor (1 + pi dS) <= 0 freezes the path at its nonpositive value.
    With an empty jump list this agrees with the continuous exponential
    bit for bit.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (path.grid.n_steps,):
        raise ContractViolation("pi must hold one value per grid cell")
    jump_cells = path.jump_indices - 1
    return _exp_kernel(
        path.grid,
        pi,
        path.continuous_increments(),
        np.diff(qv_continuous.values),
        jump_cells,
        path.jump_sizes,
    )


def dd_residual(pi: np.ndarray, path: SamplePath, wealth: WealthPath) -> float:
    """Worst-case gap between W and its left-endpoint wealth recursion.

    Measures max over grid times of |W_t - 1 - sum W pi dS|; on the same
    realization this shrinks as the grid refines.
    """
    pi = np.asarray(pi, dtype=float)
    euler = np.cumsum(wealth.values[:-1] * pi * path.increments())
    return float(np.max(np.abs(wealth.values[1:] - 1.0 - euler)))


def log_utility(wealths: Sequence[WealthPath]) -> UtilityReport:
    """Sample mean and standard error of log terminal wealth.

    Any terminal wealth at or below zero makes the whole estimate -inf,
    the Monte-Carlo rendering of assigning -inf to ruinous strategies.
    """
    if not wealths:
        raise ContractViolation("need at least one wealth path")
    w1 = np.array([w.terminal for w in wealths])
    return log_utility_from_terminals_raw(w1)


def log_utility_from_terminals_raw(w1: np.ndarray) -> UtilityReport:
    n = w1.size
    bad = int(np.sum(w1 <= 0.0))
    if bad:
        return UtilityReport(-np.inf, float("nan"), n, bad)
    logs = np.log(w1)
    se = float(np.std(logs, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return UtilityReport(float(np.mean(logs)), se, n, 0)


def log_utility_from_terminals(log_w1: np.ndarray, n_nonpositive: int) -> UtilityReport:
    """Aggregate precomputed per-path log terminal wealths (-inf allowed)."""
    n = log_w1.size
    if n_nonpositive:
        return UtilityReport(-np.inf, float("nan"), n, int(n_nonpositive))
    se = float(np.std(log_w1, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return UtilityReport(float(np.mean(log_w1)), se, n, 0)


# ---------------------------------------------------------------------------
# Vectorized terminal-wealth helpers (matrix form, used by the estimators)
# ---------------------------------------------------------------------------

def terminal_log_wealth_continuous(
    pi: np.ndarray, values: np.ndarray, qv_vals: np.ndarray
) -> np.ndarray:
    """Per-path log terminal wealth for a continuous ensemble.

    ``pi`` broadcasts: either one shared per-cell vector or a per-path
    matrix.
    """
    ds = np.diff(values, axis=1)
    dqv = np.diff(qv_vals, axis=1)
    return np.sum(pi * ds - 0.5 * pi * pi * dqv, axis=1)


def terminal_log_wealth_jumps(
    pi: np.ndarray,
    cont_inc: np.ndarray,
    dqv_cont: np.ndarray,
    jump_path: np.ndarray,
    jump_cell: np.ndarray,
    jump_size: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-path log terminal wealth with jumps, plus the wipe-out mask.

    Jump data comes flattened: parallel arrays of path row, cell index,
    and jump size.  Paths with any factor (1 + pi dS) <= 0 get -inf.
    """
    logw = np.sum(pi * cont_inc - 0.5 * pi * pi * dqv_cont, axis=1)
    n_paths = logw.size
    if jump_path.size:
        if pi.ndim == 1:
            pj = pi[jump_cell]
        else:
            pj = pi[jump_path, jump_cell]
        f = 1.0 + pj * jump_size
        bad = f <= 0.0
        wiped = np.zeros(n_paths, dtype=bool)
        np.logical_or.at(wiped, jump_path[bad], True)
        add = np.zeros(n_paths)
        ok = ~bad
        np.add.at(add, jump_path[ok], np.log(f[ok]))
        logw = logw + add
        logw[wiped] = -np.inf
        return logw, wiped
    return logw, np.zeros(n_paths, dtype=bool)
