"""Empirical drift decomposition and growth-optimality checks.

The estimator recovers the drift density alpha in the representation

    S_t = S_hat_t + integral of alpha d[S]

by a per-bin ratio of sums: within each (time, state) bin, alpha_hat is
the total path increment divided by the total variation increment, the
exact least-squares solution of dS ~ alpha d[S] on bin-measurable test
functions.  Recentring S by the fitted drift yields paths whose simple
integrals against bounded test strategies should be statistically zero;
those z-scores are the martingale diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .path_core import Ensemble
from .strategy import h2_norm, pi_for_ensemble
from .wealth import UtilityReport, log_utility_from_terminals, terminal_log_wealth_continuous

__all__ = [
    "BinSpec",
    "DriftEstimate",
    "LambdaEstimate",
    "DecompositionResult",
    "Diagnostic",
    "GrowthReport",
    "GapReport",
    "estimate_lambda",
    "choose_truncation_level",
    "estimate_alpha",
    "cell_alpha",
    "decompose",
    "reconstruction_error",
    "martingale_residual",
    "growth_optimal_value",
    "optimality_gap",
    "cauchy_schwarz_bound_check",
]


@dataclass(frozen=True)
class BinSpec:
    """Binning for the drift estimator: uniform time bins, optional
    quantile state bins on the path level at each cell's left endpoint."""

    time_bins: int = 32
    state_bins: int = 0
    min_count: int = 50

    def __post_init__(self):
        if self.time_bins < 1 or self.state_bins < 0 or self.min_count < 1:
            raise ContractViolation("invalid bin specification")

    @property
    def n_bins(self) -> int:
        return self.time_bins * max(1, self.state_bins)


@dataclass(frozen=True)
class DriftEstimate:
    """Per-bin drift density with uncertainty and coverage metadata.

    Bins with fewer than ``min_count`` increments carry ``estimated[b] =
    False`` and alpha NaN; downstream consumers must treat them
    explicitly rather than as zero.
    """

    bin_spec: BinSpec
    time_edges: np.ndarray
    state_edges: np.ndarray | None
    alpha: np.ndarray
    stderr: np.ndarray
    count: np.ndarray
    estimated: np.ndarray
    mass: np.ndarray  # total variation increment per bin, for error propagation

    def rows(self) -> list[dict]:
        out = []
        nt, ns = self.bin_spec.time_bins, max(1, self.bin_spec.state_bins)
        for b in range(self.alpha.size):
            tb, sb = divmod(b, ns)
            out.append(
                {
                    "bin_start": float(self.time_edges[tb]),
                    "bin_end": float(self.time_edges[tb + 1]),
                    "state_bin": sb if self.bin_spec.state_bins else None,
                    "alpha": float(self.alpha[b]) if self.estimated[b] else None,
                    "stderr": float(self.stderr[b]) if self.estimated[b] else None,
                    "count": int(self.count[b]),
                }
            )
        return out


@dataclass(frozen=True)
class LambdaEstimate:
    """Monte-Carlo mean of the terminal simple integral of a strategy."""

    value: float
    stderr: float
    strategy: str
    n_paths: int

    @property
    def z(self) -> float:
        if self.stderr == 0.0:
            return 0.0 if self.value == 0.0 else np.inf
        return self.value / self.stderr


@dataclass
class DecompositionResult:
    alpha: DriftEstimate
    s_hat: Ensemble
    coverage: float
    diagnostics: list["Diagnostic"] = field(default_factory=list)


@dataclass(frozen=True)
class Diagnostic:
    strategy: str
    estimate: float
    stderr: float
    z: float

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0


def _require_continuous(ensemble: Ensemble) -> None:
    if ensemble.jumps is not None:
        raise ContractViolation("this estimator expects a continuous-model ensemble")


def _stop_mask(ensemble: Ensemble, qv_vals: np.ndarray, stop_n: float) -> np.ndarray:
    """Boolean cell mask keeping increments up to each path's truncation time."""
    hit = (np.abs(ensemble.values) > stop_n) | (qv_vals > stop_n)
    any_hit = hit.any(axis=1)
    stop = np.where(any_hit, np.argmax(hit, axis=1), ensemble.grid.n_steps)
    cells = np.arange(ensemble.grid.n_steps)
    return cells[None, :] < stop[:, None]


def choose_truncation_level(
    ensemble: Ensemble, qv_vals: np.ndarray, target: float = 0.99
) -> float:
    """Smallest power-of-two threshold leaving at least ``target`` of the
    paths unstopped."""
    n = 1.0
    for _ in range(64):
        hit = (np.abs(ensemble.values) > n) | (qv_vals > n)
        frac_free = 1.0 - hit.any(axis=1).mean()
        if frac_free >= target:
            return n
        n *= 2.0
    raise ContractViolation("no reasonable truncation level keeps enough paths")


def estimate_lambda(
    strategy,
    ensemble: Ensemble,
    qv_vals: np.ndarray | None = None,
    stop_n: float | None = None,
    insider: np.ndarray | None = None,
) -> LambdaEstimate:
    """Mean terminal value of the simple integral of the strategy against
    the paths, with its standard error.

    ``stop_n`` zeroes every increment after the path's level/variation
    truncation time, the bounded-support discipline that keeps the
    estimate finite on heavy models.
    """
    if ensemble.n_paths < 1:
        raise ContractViolation("empty ensemble")
    pi = pi_for_ensemble(strategy, ensemble, qv_vals, insider)
    ds = np.diff(ensemble.values, axis=1)
    if stop_n is not None:
        if qv_vals is None:
            raise ContractViolation("stopping needs the per-path variation")
        ds = ds * _stop_mask(ensemble, qv_vals, stop_n)
    per_path = np.sum(pi * ds, axis=1)
    n = ensemble.n_paths
    se = float(np.std(per_path, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    name = getattr(strategy, "name", "") or strategy.__class__.__name__
    return LambdaEstimate(float(np.mean(per_path)), se, name, n)


def estimate_alpha(
    ensemble: Ensemble, qv_vals: np.ndarray, bin_spec: BinSpec = BinSpec()
) -> DriftEstimate:
    """Per-bin ratio-of-sums drift density alpha_hat = sum dS / sum d[S].

    Standard errors treat paths as the independent unit (cells within a
    path are summed first), which is exact for the ratio estimator under
    path-level resampling.
    """
    _require_continuous(ensemble)
    grid = ensemble.grid
    ds = np.diff(ensemble.values, axis=1)
    dqv = np.diff(qv_vals, axis=1)
    t_left = grid.points[:-1]
    time_edges = np.linspace(0.0, 1.0, bin_spec.time_bins + 1)
    tb = np.clip(np.searchsorted(time_edges, t_left, side="right") - 1, 0, bin_spec.time_bins - 1)
    n_state = max(1, bin_spec.state_bins)
    state_edges = None
    if bin_spec.state_bins:
        left_levels = ensemble.values[:, :-1]
        qs = np.linspace(0.0, 1.0, bin_spec.state_bins + 1)[1:-1]
        state_edges = np.quantile(left_levels, qs)
        sb = np.searchsorted(state_edges, left_levels, side="right")
        bin_of = tb[None, :] * n_state + sb  # (paths, cells)
        P = ensemble.n_paths
        B = bin_spec.time_bins * n_state
        num = np.zeros((P, B))
        den = np.zeros((P, B))
        cnt = np.zeros(B)
        rows = np.repeat(np.arange(P), grid.n_steps)
        flat = bin_of.ravel()
        np.add.at(num, (rows, flat), ds.ravel())
        np.add.at(den, (rows, flat), dqv.ravel())
        np.add.at(cnt, flat, 1.0)
    else:
        B = bin_spec.time_bins
        ind = np.zeros((grid.n_steps, B))
        ind[np.arange(grid.n_steps), tb] = 1.0
        num = ds @ ind  # (paths, bins): per-path, per-bin sums
        den = dqv @ ind
        cnt = np.full(B, float(ensemble.n_paths)) * ind.sum(axis=0)
    tot_num = num.sum(axis=0)
    tot_den = den.sum(axis=0)
    estimated = (cnt >= bin_spec.min_count) & (tot_den > 0.0)
    alpha = np.full(B, np.nan)
    stderr = np.full(B, np.nan)
    P = ensemble.n_paths
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha[estimated] = tot_num[estimated] / tot_den[estimated]
    for b in np.nonzero(estimated)[0]:
        resid = num[:, b] - alpha[b] * den[:, b]
        stderr[b] = np.sqrt(np.sum(resid * resid) * P / max(P - 1, 1)) / tot_den[b]
    return DriftEstimate(
        bin_spec, time_edges, state_edges, alpha, stderr, cnt.astype(int), estimated, tot_den
    )


def cell_alpha(est: DriftEstimate, ensemble: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Drift value and coverage mask for every grid cell.

    Returns ``(alpha_cells, covered)`` where both broadcast against the
    increment matrices: per-cell vectors for time-only binning, per-path
    matrices when state bins are active.  Uncovered cells carry 0 in
    ``alpha_cells`` and False in ``covered``.
    """
    grid = ensemble.grid
    t_left = grid.points[:-1]
    tb = np.clip(
        np.searchsorted(est.time_edges, t_left, side="right") - 1,
        0,
        est.bin_spec.time_bins - 1,
    )
    n_state = max(1, est.bin_spec.state_bins)
    if est.bin_spec.state_bins:
        sb = np.searchsorted(est.state_edges, ensemble.values[:, :-1], side="right")
        bins = tb[None, :] * n_state + sb
    else:
        bins = tb
    covered = est.estimated[bins]
    alpha_cells = np.where(covered, np.nan_to_num(est.alpha[bins], nan=0.0), 0.0)
    return alpha_cells, covered


def decompose(
    ensemble: Ensemble, est: DriftEstimate, max_uncovered: float = 0.05
) -> DecompositionResult:
    """Recentre every path by its fitted drift: S_hat = S - sum alpha d[S].

    Refuses when more than ``max_uncovered`` of the variation mass falls
    in bins without an estimate.
    """
    _require_continuous(ensemble)
    qv_vals = _qv_matrix_continuous(ensemble)
    dqv = np.diff(qv_vals, axis=1)
    alpha_cells, covered = cell_alpha(est, ensemble)
    mass = float(np.sum(dqv))
    covered_mass = float(np.sum(dqv * covered)) if mass > 0 else 1.0
    coverage = covered_mass / mass if mass > 0 else 1.0
    if coverage < 1.0 - max_uncovered:
        raise ContractViolation(
            f"only {coverage:.1%} of the variation mass has a drift estimate"
        )
    drift = np.zeros_like(ensemble.values)
    np.cumsum(alpha_cells * dqv, axis=1, out=drift[:, 1:])
    s_hat = Ensemble(
        ensemble.grid,
        ensemble.values - drift,
        ensemble.master_seed,
        ensemble.model_tag + "-recentred",
    )
    return DecompositionResult(est, s_hat, coverage)


def _qv_matrix_continuous(ensemble: Ensemble) -> np.ndarray:
    inc = np.diff(ensemble.values, axis=1)
    out = np.zeros_like(ensemble.values)
    np.cumsum(inc * inc, axis=1, out=out[:, 1:])
    return out


def reconstruction_error(result: DecompositionResult, ensemble: Ensemble) -> float:
    """Max absolute gap of S_hat + sum alpha d[S] against the original paths."""
    dqv = np.diff(_qv_matrix_continuous(ensemble), axis=1)
    alpha_cells, _ = cell_alpha(result.alpha, ensemble)
    drift = np.cumsum(alpha_cells * dqv, axis=1)
    rebuilt = result.s_hat.values.copy()
    rebuilt[:, 1:] += drift
    return float(np.max(np.abs(rebuilt - ensemble.values)))


def martingale_residual(
    result: DecompositionResult,
    strategies,
    stop_n: float | None = None,
) -> list[Diagnostic]:
    """z-scores of the recentred paths' simple integrals per test strategy.

    |z| <= 3 for every bounded prefix-measurable test is the pass
    condition; the same harness run on un-recentred drifted paths is the
    negative control.
    """
    s_hat = result.s_hat
    qv_vals = _qv_matrix_continuous(s_hat)
    out = []
    for strat in strategies:
        lam = estimate_lambda(strat, s_hat, qv_vals, stop_n=stop_n)
        out.append(Diagnostic(lam.strategy, lam.value, lam.stderr, lam.z))
    result.diagnostics.extend(out)
    return out


@dataclass(frozen=True)
class GrowthReport:
    """Half the fitted quadratic drift mass, with a direct utility cross-check."""

    value: float
    stderr: float
    direct: UtilityReport


def growth_optimal_value(
    est: DriftEstimate, ensemble: Ensemble, qv_vals: np.ndarray
) -> GrowthReport:
    """Expected log wealth of trading the fitted drift density itself.

    Computed as half the mean of sum alpha_hat^2 d[S], and cross-checked
    by pricing the wealth of the alpha_hat strategy directly.  The
    stderr propagates the per-bin drift uncertainty (the dominant term:
    the value is quadratic in the fitted alpha) on top of the per-path
    Monte-Carlo spread.
    """
    _require_continuous(ensemble)
    dqv = np.diff(qv_vals, axis=1)
    alpha_cells, _ = cell_alpha(est, ensemble)
    quad = np.sum(alpha_cells * alpha_cells * dqv, axis=1)
    n = ensemble.n_paths
    value = 0.5 * float(np.mean(quad))
    se_paths = 0.5 * float(np.std(quad, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    ok = est.estimated
    se_alpha_sq = np.sum(
        (est.alpha[ok] * est.mass[ok] * est.stderr[ok] / n) ** 2
    )
    se = float(np.sqrt(se_paths**2 + se_alpha_sq))
    logw = terminal_log_wealth_continuous(alpha_cells, ensemble.values, qv_vals)
    return GrowthReport(value, se, log_utility_from_terminals(logw, 0))


@dataclass(frozen=True)
class GapReport:
    gap: float
    stderr: float
    utility_strategy: float
    utility_optimal: float


def optimality_gap(
    strategy,
    est: DriftEstimate,
    ensemble: Ensemble,
    qv_vals: np.ndarray,
    insider: np.ndarray | None = None,
) -> GapReport:
    """Paired estimate of E[log W(strategy)] - E[log W(alpha_hat)].

    Pairing on common paths makes the standard error of the difference
    the right scale for the one-sided check gap <= 3 stderr.
    """
    _require_continuous(ensemble)
    pi = pi_for_ensemble(strategy, ensemble, qv_vals, insider)
    logw_pi = terminal_log_wealth_continuous(pi, ensemble.values, qv_vals)
    alpha_cells, _ = cell_alpha(est, ensemble)
    logw_a = terminal_log_wealth_continuous(alpha_cells, ensemble.values, qv_vals)
    diff = logw_pi - logw_a
    n = ensemble.n_paths
    se = float(np.std(diff, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return GapReport(
        float(np.mean(diff)), se, float(np.mean(logw_pi)), float(np.mean(logw_a))
    )


@dataclass(frozen=True)
class BoundCheckRow:
    strategy: str
    lam: float
    lam_stderr: float
    norm: float
    bound: float
    ok: bool


def cauchy_schwarz_bound_check(
    strategies,
    ensemble: Ensemble,
    qv_vals: np.ndarray,
    c_bound: float,
    stop_n: float | None = None,
) -> list[BoundCheckRow]:
    """Check |Lambda(pi)| <= sqrt(2C) ||pi|| + 3 combined stderr per strategy.

    ``c_bound`` is an upper bound on expected log utility over the
    family (from a utility sweep or a closed form).
    """
    if c_bound < 0:
        raise ContractViolation("the utility bound C must be non-negative")
    root = np.sqrt(2.0 * c_bound)
    rows = []
    for strat in strategies:
        lam = estimate_lambda(strat, ensemble, qv_vals, stop_n=stop_n)
        nrm = h2_norm(strat, ensemble, qv_vals)
        norm_val = float(np.sqrt(max(nrm.value, 0.0)))
        se_norm = nrm.stderr / (2.0 * norm_val) if norm_val > 0 else 0.0
        slack = 3.0 * float(np.hypot(lam.stderr, root * se_norm))
        bound = root * norm_val + slack
        rows.append(
            BoundCheckRow(lam.strategy, lam.value, lam.stderr, norm_val, bound, abs(lam.value) <= bound)
        )
    return rows
