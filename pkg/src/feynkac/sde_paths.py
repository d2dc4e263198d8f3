"""Time grids and Euler-Maruyama path simulation."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .problems import ProblemSpec
from .tensor_core import ContractViolation, RngStream

PATH_DUMP_MAGIC = b"FKPATHS1"


class NonFiniteStateError(FloatingPointError):
    def __init__(self, path: int, step: int):
        super().__init__(f"non-finite state on path m={path} at step n={step}")
        self.path = path
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray
    # uniform builders store T/N exactly instead of diff(knots)
    step_sizes: np.ndarray | None = None

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", k)
        if k.ndim != 1 or k.size < 2:
            raise ContractViolation("a time grid needs at least two knots")
        if k[0] != 0.0 or np.any(np.diff(k) <= 0):
            raise ContractViolation("knots must start at 0 and increase strictly")
        if self.step_sizes is None:
            object.__setattr__(self, "step_sizes", np.diff(k))

    @property
    def N(self) -> int:
        return self.knots.size - 1

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    @property
    def steps(self) -> np.ndarray:
        """``steps[n - 1] = t_n - t_{n-1}`` for ``n = 1..N``."""
        return self.step_sizes


def make_time_grid(T: float, N: int) -> TimeGrid:
    if N < 1:
        raise ContractViolation(f"N must be >= 1, got {N}")
    if not T > 0:
        raise ContractViolation(f"T must be positive, got {T}")
    h = T / N
    knots = np.arange(N + 1) * h
    knots[-1] = T
    return TimeGrid(knots, np.full(N, h))


@dataclass
class PathBatch:
    """States ``X[m, n, :]`` at ``t_n`` and increments ``dW[m, n, :]`` over (t_n, t_{n+1}]."""

    X: np.ndarray
    dW: np.ndarray
    grid: TimeGrid

    @property
    def size(self) -> int:
        return self.X.shape[0]


def _draw_increments(grid: TimeGrid, batch: int, d: int, rng: RngStream, workers: int) -> np.ndarray:
    # path m owns normals [m*N*d, (m+1)*N*d) so chunked draws match the serial one
    per_path = grid.N * d
    if workers <= 1 or batch < 2:
        z = rng.normals(batch * per_path)
    else:
        bounds = np.linspace(0, batch, min(workers, batch) + 1).astype(int)

        def draw(lo_hi):
            lo, hi = lo_hi
            return rng.copy().skip(lo * per_path).normals((hi - lo) * per_path)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(draw, zip(bounds[:-1], bounds[1:])))
        z = np.concatenate(parts)
        rng.skip(batch * per_path)
    z = z.reshape(batch, grid.N, d)
    return z * np.sqrt(grid.steps)[None, :, None]


def simulate_paths(
    problem: ProblemSpec,
    grid: TimeGrid,
    batch: int,
    rng: RngStream | None = None,
    *,
    increments: np.ndarray | None = None,
    workers: int = 1,
) -> PathBatch:
    """Euler-Maruyama paths from ``xi``; ``increments`` bypasses the RNG (tests)."""
    if batch < 1:
        raise ContractViolation(f"batch must be >= 1, got {batch}")
    d = problem.d
    if increments is None:
        if rng is None:
            raise ContractViolation("either rng or increments is required")
        dW = _draw_increments(grid, batch, d, rng, workers)
    else:
        dW = np.asarray(increments, dtype=float)
        if dW.shape != (batch, grid.N, d):
            raise ContractViolation(f"increments shape {dW.shape} != {(batch, grid.N, d)}")
    X = np.empty((batch, grid.N + 1, d))
    X[:, 0, :] = problem.xi
    t = grid.knots
    dt = grid.steps
    for n in range(1, grid.N + 1):
        prev = X[:, n - 1, :]
        X[:, n, :] = (
            prev
            + problem.drift(t[n - 1], prev) * dt[n - 1]
            + problem.diffusion_apply(t[n - 1], prev, dW[:, n - 1, :])
        )
        bad = ~np.isfinite(X[:, n, :])
        if bad.any():
            raise NonFiniteStateError(int(np.argwhere(bad)[0, 0]), n)
    return PathBatch(X=X, dW=dW, grid=grid)


def dump_paths(paths: PathBatch, filename) -> None:
    """Write ``paths`` as: magic, u32 header length, JSON header, X bytes, dW bytes.

    Arrays are little-endian float64 in (m, n, d) order, d fastest.
    """
    header = json.dumps(
        {
            "M": int(paths.X.shape[0]),
            "N": int(paths.grid.N),
            "d": int(paths.X.shape[2]),
            "knots": [float(v) for v in paths.grid.knots],
            "step_sizes": [float(v) for v in paths.grid.steps],
            "order": "m,n,d",
            "dtype": "<f8",
        }
    ).encode()
    with open(filename, "wb") as fh:
        fh.write(PATH_DUMP_MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(np.ascontiguousarray(paths.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(paths.dW, dtype="<f8").tobytes())


def load_paths(filename) -> PathBatch:
    raw = Path(filename).read_bytes()
    if raw[:8] != PATH_DUMP_MAGIC:
        raise ValueError(f"{filename}: not a path dump")
    size = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12 : 12 + size])
    M, N, d = header["M"], header["N"], header["d"]
    body = np.frombuffer(raw, dtype="<f8", offset=12 + size)
    nx = M * (N + 1) * d
    X = body[:nx].reshape(M, N + 1, d).copy()
    dW = body[nx:].reshape(M, N, d).copy()
    steps = header.get("step_sizes")
    grid = TimeGrid(np.asarray(header["knots"]), None if steps is None else np.asarray(steps))
    return PathBatch(X=X, dW=dW, grid=grid)
