"""Time grids, cadlag sample paths, pathwise quadratic variation, and
level/variation truncation times.

Paths live on the unit horizon [0, 1].  A path is a piecewise-linear
continuous interpolant through per-grid-point samples plus an explicit,
separately stored jump list; storing jumps apart from the continuous
samples keeps their squared contribution to the quadratic variation
exact rather than mesh-dependent.

Conventions used throughout the package:

* ``values[k]`` is the path level immediately AFTER any jump at
  ``points[k]``.
* a jump at grid point ``points[k]`` (k >= 1) belongs to the grid cell
  ``(points[k-1], points[k]]`` and is indexed by cell ``k - 1``.
* a step function on the grid (a strategy, an integrand) is an array of
  length ``n_steps`` whose entry ``k`` applies on ``(points[k], points[k+1]]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

__all__ = [
    "TimeGrid",
    "SamplePath",
    "QVPath",
    "Ensemble",
    "quadratic_variation",
    "qv_matrix",
    "refine_and_compare_qv",
    "truncation_index",
    "truncation_time",
    "path_to_csv",
    "path_from_csv",
    "path_to_json",
    "path_from_json",
    "save_ensemble",
    "load_ensemble",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid of times with first point 0 and last point 1."""

    points: np.ndarray

    def __post_init__(self):
        pts = _readonly(self.points)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ContractViolation("grid needs at least two points")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ContractViolation("grid must start at 0 and end at 1")
        if not np.all(np.diff(pts) > 0):
            raise ContractViolation("grid points must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    @classmethod
    def uniform(cls, n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise ContractViolation("n_steps must be >= 1")
        return cls(np.linspace(0.0, 1.0, n_steps + 1))

    @classmethod
    def dyadic(cls, level: int) -> "TimeGrid":
        return cls.uniform(2**level)

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Index of the grid point equal to t, up to representation noise."""
        k = int(np.searchsorted(self.points, t))
        for j in (k, k - 1, k + 1):
            if 0 <= j < self.points.size and abs(self.points[j] - t) <= tol:
                return j
        raise ContractViolation(f"t={t!r} is not a grid point")

    def is_dyadic_uniform(self) -> bool:
        n = self.n_steps
        if n & (n - 1):
            return False
        return bool(np.array_equal(self.points, np.linspace(0.0, 1.0, n + 1)))


@dataclass(frozen=True)
class SamplePath:
    """Grid-aligned cadlag path: continuous samples plus an explicit jump list.

    ``jumps`` is a sequence of ``(time, size)`` with strictly increasing
    times, each time a member of ``grid.points`` and strictly positive.
    """

    grid: TimeGrid
    values: np.ndarray
    jumps: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        vals = _readonly(self.values)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "jumps", tuple((float(t), float(s)) for t, s in self.jumps))
        if vals.shape != self.grid.points.shape:
            raise ContractViolation("values must align with grid points")
        times = [t for t, _ in self.jumps]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise ContractViolation("jump times must be strictly increasing")
        for t in times:
            if t <= 0.0:
                raise ContractViolation("jumps must occur in (0, 1]")
            self.grid.index_of(t)  # raises if not on the grid

    @property
    def jump_indices(self) -> np.ndarray:
        """Grid-point index of each jump."""
        return np.array([self.grid.index_of(t) for t, _ in self.jumps], dtype=int)

    @property
    def jump_sizes(self) -> np.ndarray:
        return np.array([s for _, s in self.jumps], dtype=float)

    def continuous_part(self) -> "SamplePath":
        """The path with all jumps removed (cumulative jump sizes subtracted)."""
        if not self.jumps:
            return SamplePath(self.grid, self.values)
        cum = np.zeros_like(self.values)
        for idx, size in zip(self.jump_indices, self.jump_sizes):
            cum[idx:] += size
        return SamplePath(self.grid, self.values - cum)

    def increments(self) -> np.ndarray:
        """Total increment per grid cell, jumps included."""
        return np.diff(self.values)

    def continuous_increments(self) -> np.ndarray:
        """Per-cell increment of the continuous part."""
        inc = np.diff(self.values)
        if self.jumps:
            inc = inc.copy()
            for idx, size in zip(self.jump_indices, self.jump_sizes):
                inc[idx - 1] -= size
        return inc


@dataclass(frozen=True)
class QVPath:
    """Running quadratic variation along a grid: non-decreasing, starts at 0."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _readonly(self.values)
        object.__setattr__(self, "values", vals)
        if vals.shape != self.grid.points.shape:
            raise ContractViolation("values must align with grid points")
        if vals[0] != 0.0:
            raise ContractViolation("quadratic variation starts at 0")
        if np.any(np.diff(vals) < 0):
            raise ContractViolation("quadratic variation must be non-decreasing")

    @property
    def total(self) -> float:
        return float(self.values[-1])


@dataclass(frozen=True)
class Ensemble:
    """A set of paths sharing one grid, stored as a (n_paths, n_points) matrix.

    ``jumps[i]`` is path i's jump list; ``None`` means a continuous model
    (every path jump-free), which lets the matrix operations skip jump
    handling entirely.
    """

    grid: TimeGrid
    values: np.ndarray
    master_seed: int
    model_tag: str
    jumps: tuple[tuple[tuple[float, float], ...], ...] | None = None

    def __post_init__(self):
        vals = _readonly(self.values)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[1] != self.grid.points.size:
            raise ContractViolation("values must be (n_paths, n_points)")
        if vals.shape[0] < 1:
            raise ContractViolation("ensemble needs at least one path")
        if self.jumps is not None and len(self.jumps) != vals.shape[0]:
            raise ContractViolation("per-path jump lists must match path count")

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def path(self, i: int) -> SamplePath:
        j = self.jumps[i] if self.jumps is not None else ()
        return SamplePath(self.grid, self.values[i], j)

    def paths(self) -> Iterable[SamplePath]:
        return (self.path(i) for i in range(self.n_paths))


# ---------------------------------------------------------------------------
# Quadratic variation
# ---------------------------------------------------------------------------

def quadratic_variation(path: SamplePath) -> QVPath:
    """Running sum of squared continuous increments plus squared jump sizes.

    The continuous contribution per cell is the squared increment of the
    continuous interpolant; each jump adds its squared size exactly at
    the jump time, independent of the mesh.
    """
    inc = path.continuous_increments()
    cell = inc * inc
    if path.jumps:
        cell = cell.copy()
        for idx, size in zip(path.jump_indices, path.jump_sizes):
            cell[idx - 1] += size * size
    out = np.empty_like(path.values)
    out[0] = 0.0
    np.cumsum(cell, out=out[1:])
    return QVPath(path.grid, out)


def qv_matrix(ensemble: Ensemble) -> np.ndarray:
    """Quadratic variation of every path, as a (n_paths, n_points) matrix."""
    if ensemble.jumps is None:
        inc = np.diff(ensemble.values, axis=1)
        out = np.zeros_like(ensemble.values)
        np.cumsum(inc * inc, axis=1, out=out[:, 1:])
        return out
    return np.stack([quadratic_variation(p).values for p in ensemble.paths()])


def refine_and_compare_qv(
    model,
    stream,
    index: int,
    levels: Sequence[int],
) -> list[tuple[int, float]]:
    """Terminal quadratic variation of ONE realization on nested dyadic grids.

    ``model`` must expose ``refinable`` and ``path_at_level(stream, index,
    level)`` evaluating the same realization on finer grids; the returned
    rows ``(n_steps, qv_total)`` stabilize when the realization has a
    mesh-robust quadratic variation, and the jump contribution is
    identical at every mesh by construction.
    """
    if not getattr(model, "refinable", False):
        raise ConfigurationError(
            f"model {getattr(model, 'tag', model)!r} does not support consistent refinement"
        )
    rows = []
    for level in levels:
        path = model.path_at_level(stream, index, level)
        rows.append((path.grid.n_steps, quadratic_variation(path).total))
    return rows


# ---------------------------------------------------------------------------
# Truncation times
# ---------------------------------------------------------------------------

def truncation_index(
    values: np.ndarray, qv_values: np.ndarray, n: float
) -> int:
    """Grid index of the first point where |level| > n or variation > n.

    Returns the last grid index when no threshold is crossed, so the
    corresponding time is 1.
    """
    hit = (np.abs(values) > n) | (qv_values > n)
    if not hit.any():
        return values.shape[-1] - 1
    return int(np.argmax(hit))


def truncation_time(path: SamplePath, qv: QVPath, n: float) -> float:
    """First grid time where the level or the quadratic variation exceeds n,
    capped at 1."""
    if n <= 0:
        raise ContractViolation("threshold n must be positive")
    k = truncation_index(path.values, qv.values, n)
    return float(path.grid.points[k])


# ---------------------------------------------------------------------------
# Serialization (round-trip-safe decimal: repr of the float)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def path_to_csv(path: SamplePath) -> tuple[str, str | None]:
    """Render a path as a ``t,value`` CSV plus a ``t,jump_size`` sidecar.

    The sidecar is None when the path has no jumps.  Floats are written
    with the shortest representation that parses back to the same value.
    """
    lines = ["t,value"]
    lines += [f"{_fmt(t)},{_fmt(v)}" for t, v in zip(path.grid.points, path.values)]
    body = "\n".join(lines) + "\n"
    if not path.jumps:
        return body, None
    jlines = ["t,jump_size"]
    jlines += [f"{_fmt(t)},{_fmt(s)}" for t, s in path.jumps]
    return body, "\n".join(jlines) + "\n"


def path_from_csv(body: str, jumps_body: str | None = None) -> SamplePath:
    rows = [ln for ln in body.strip().splitlines()[1:] if ln]
    pts = np.array([float(r.split(",")[0]) for r in rows])
    vals = np.array([float(r.split(",")[1]) for r in rows])
    jumps: tuple[tuple[float, float], ...] = ()
    if jumps_body:
        jrows = [ln for ln in jumps_body.strip().splitlines()[1:] if ln]
        jumps = tuple((float(r.split(",")[0]), float(r.split(",")[1])) for r in jrows)
    return SamplePath(TimeGrid(pts), vals, jumps)


def path_to_json(path: SamplePath) -> dict:
    return {
        "points": [float(t) for t in path.grid.points],
        "values": [float(v) for v in path.values],
        "jumps": [[t, s] for t, s in path.jumps],
    }


def path_from_json(obj: dict) -> SamplePath:
    return SamplePath(
        TimeGrid(np.array(obj["points"], dtype=float)),
        np.array(obj["values"], dtype=float),
        tuple((float(t), float(s)) for t, s in obj.get("jumps", [])),
    )


def save_ensemble(ensemble: Ensemble, out_dir: str | Path, fmt: str = "csv") -> None:
    """Write an ensemble to a directory with a replayable manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "ensemble",
        "model_tag": ensemble.model_tag,
        "master_seed": ensemble.master_seed,
        "n_paths": ensemble.n_paths,
        "n_steps": ensemble.grid.n_steps,
        "format": fmt,
    }
    _atomic_write(out / "ensemble_manifest.json", json.dumps(manifest, indent=2) + "\n")
    if fmt == "json":
        payload = {
            "manifest": manifest,
            "points": [float(t) for t in ensemble.grid.points],
            "paths": [
                {
                    "values": [float(v) for v in ensemble.values[i]],
                    "jumps": [[t, s] for t, s in (ensemble.jumps[i] if ensemble.jumps else ())],
                }
                for i in range(ensemble.n_paths)
            ],
        }
        _atomic_write(out / "ensemble.json", json.dumps(payload) + "\n")
        return
    if fmt != "csv":
        raise ConfigurationError(f"unknown format {fmt!r}")
    for i in range(ensemble.n_paths):
        body, jumps_body = path_to_csv(ensemble.path(i))
        _atomic_write(out / f"path_{i:05d}.csv", body)
        if jumps_body is not None:
            _atomic_write(out / f"path_{i:05d}.jumps.csv", jumps_body)


def load_ensemble(in_dir: str | Path) -> Ensemble:
    src = Path(in_dir)
    manifest = json.loads((src / "ensemble_manifest.json").read_text())
    if manifest.get("format") == "json":
        payload = json.loads((src / "ensemble.json").read_text())
        grid = TimeGrid(np.array(payload["points"], dtype=float))
        values = np.array([p["values"] for p in payload["paths"]], dtype=float)
        jump_lists = tuple(
            tuple((float(t), float(s)) for t, s in p["jumps"]) for p in payload["paths"]
        )
        jumps = None if all(len(j) == 0 for j in jump_lists) else jump_lists
        return Ensemble(grid, values, manifest["master_seed"], manifest["model_tag"], jumps)
    paths = []
    for i in range(manifest["n_paths"]):
        body = (src / f"path_{i:05d}.csv").read_text()
        jfile = src / f"path_{i:05d}.jumps.csv"
        jbody = jfile.read_text() if jfile.exists() else None
        paths.append(path_from_csv(body, jbody))
    grid = paths[0].grid
    values = np.stack([p.values for p in paths])
    jump_lists = tuple(p.jumps for p in paths)
    jumps = None if all(len(j) == 0 for j in jump_lists) else jump_lists
    return Ensemble(grid, values, manifest["master_seed"], manifest["model_tag"], jumps)


def _atomic_write(target: Path, text: str) -> None:
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(target)
