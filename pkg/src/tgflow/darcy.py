"""Implicit finite-difference solver for transient 2D saturated flow.

Cell-centered five-point stencil with harmonic-mean inter-cell
transmissibilities and backward-Euler time stepping:

    S_s * V / dt * (h^{k+1} - h^k) = -A h^{k+1} + b

The first and last grid columns are constant-head cells pinned to the left
and right Dirichlet values from the initial instant onward; top and bottom
rows carry a uniform Neumann flux (zero in the base configuration).  Only
the interior columns enter the linear system, which is symmetric positive
definite and constant across steps, so it is factorized once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, cg

# below this many unknowns a sparse direct factorization is used; at or
# above it, Jacobi-preconditioned conjugate gradients
DIRECT_SOLVE_LIMIT = 10_000
_CG_RTOL = 1e-12


class SolverError(RuntimeError):
    """Linear solve failed to reach the required residual."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell-centered rectangular grid."""

    n_x: int
    n_y: int
    dx: float
    dy: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.n_x < 2 or self.n_y < 2:
            raise ValueError("GridSpec needs at least 2 cells per axis")
        if not (self.dx > 0.0 and self.dy > 0.0):
            raise ValueError("GridSpec cell sizes must be strictly positive")

    @property
    def length_x(self) -> float:
        return self.n_x * self.dx

    @property
    def length_y(self) -> float:
        return self.n_y * self.dy

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x centers (n_x,), y centers (n_y,))."""
        xs = self.origin_x + (np.arange(self.n_x) + 0.5) * self.dx
        ys = self.origin_y + (np.arange(self.n_y) + 0.5) * self.dy
        return xs, ys


@dataclass(frozen=True)
class TimeSpec:
    dt: float
    n_t: int

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("TimeSpec.dt must be strictly positive")
        if self.n_t < 1:
            raise ValueError("TimeSpec.n_t must be >= 1")

    def step_times(self) -> np.ndarray:
        """Times 0, dt, ..., n_t*dt matching the result's leading axis."""
        return np.arange(self.n_t + 1) * self.dt


@dataclass(frozen=True)
class BoundarySpec:
    """Dirichlet ends, lateral Neumann flux, initial head, storage."""

    head_left: float
    head_right: float
    head_initial: float
    specific_storage: float
    flux_lateral: float = 0.0

    def __post_init__(self):
        for name in ("head_left", "head_right", "head_initial", "flux_lateral"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"BoundarySpec.{name} must be finite")
        if not self.specific_storage > 0.0:
            raise ValueError("BoundarySpec.specific_storage must be strictly positive")


class SimulationResult:
    """Head history indexed [time step][row][column], with its inputs."""

    def __init__(self, heads: np.ndarray, grid: GridSpec, time: TimeSpec,
                 boundary: BoundarySpec):
        heads = np.ascontiguousarray(heads, dtype=float)
        if heads.shape != (time.n_t + 1, grid.n_y, grid.n_x):
            raise ValueError("heads shape does not match grid/time specs")
        heads.setflags(write=False)
        self.heads = heads
        self.grid = grid
        self.time = time
        self.boundary = boundary


def _check_conductivity(K, grid: GridSpec) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.shape != (grid.n_y, grid.n_x):
        raise ValueError(f"K must have shape (n_y, n_x) = {(grid.n_y, grid.n_x)}, "
                         f"got {K.shape}")
    if not np.all(K > 0.0):
        raise ValueError("conductivity must be positive everywhere")
    return K


def _assemble(K: np.ndarray, grid: GridSpec, boundary: BoundarySpec):
    """SPD system A h = b over the interior columns (steady part).

    Returns (A, b); the pinned first/last columns contribute through b.
    """
    n_x, n_y = grid.n_x, grid.n_y
    dx, dy = grid.dx, grid.dy
    n_xi = n_x - 2  # interior columns
    n_u = n_xi * n_y

    def uidx(iy, ix):
        return iy * n_xi + (ix - 1)

    tx = 2.0 * K[:, :-1] * K[:, 1:] / (K[:, :-1] + K[:, 1:]) * (dy / dx)
    ty = 2.0 * K[:-1, :] * K[1:, :] / (K[:-1, :] + K[1:, :]) * (dx / dy)

    diag = np.zeros(n_u)
    rows, cols, vals = [], [], []
    b = np.zeros(n_u)

    if n_u:
        iy = np.arange(n_y)
        # faces to the pinned columns
        left = uidx(iy, 1)
        right = uidx(iy, n_x - 2)
        np.add.at(diag, left, tx[:, 0])
        np.add.at(diag, right, tx[:, -1])
        np.add.at(b, left, tx[:, 0] * boundary.head_left)
        np.add.at(b, right, tx[:, -1] * boundary.head_right)

        # interior-interior horizontal faces
        if n_xi > 1:
            ix = np.arange(1, n_x - 2)
            IY, IX = np.meshgrid(iy, ix, indexing="ij")
            a = uidx(IY, IX).ravel()
            c = uidx(IY, IX + 1).ravel()
            t = tx[:, 1:-1].ravel()
            np.add.at(diag, a, t)
            np.add.at(diag, c, t)
            rows.extend((a, c))
            cols.extend((c, a))
            vals.extend((-t, -t))

        # vertical faces (all interior columns)
        if n_y > 1:
            ix = np.arange(1, n_x - 1)
            IY, IX = np.meshgrid(np.arange(n_y - 1), ix, indexing="ij")
            a = uidx(IY, IX).ravel()
            c = uidx(IY + 1, IX).ravel()
            t = ty[:, 1:-1].ravel()
            np.add.at(diag, a, t)
            np.add.at(diag, c, t)
            rows.extend((a, c))
            cols.extend((c, a))
            vals.extend((-t, -t))

        # uniform lateral influx across the top and bottom faces
        if boundary.flux_lateral != 0.0:
            for row in (0, n_y - 1):
                b[uidx(row, np.arange(1, n_x - 1))] += boundary.flux_lateral * dx

        rows.append(np.arange(n_u))
        cols.append(np.arange(n_u))
        vals.append(diag)

    A = sp.csc_matrix(
        (np.concatenate(vals) if vals else np.empty(0),
         (np.concatenate(rows) if rows else np.empty(0, int),
          np.concatenate(cols) if cols else np.empty(0, int))),
        shape=(n_u, n_u))
    return A, b


def _solve_spd(M, rhs, x0=None, step: int | None = None):
    """One SPD solve at relative residual <= 1e-10 (direct or PCG)."""
    if M.shape[0] < DIRECT_SOLVE_LIMIT:
        return splu(M).solve(rhs)
    pre = sp.diags(1.0 / M.diagonal())
    try:
        x, info = cg(M, rhs, x0=x0, M=pre, rtol=_CG_RTOL, atol=0.0, maxiter=20 * M.shape[0])
    except TypeError:  # scipy < 1.12 spells the keyword `tol`
        x, info = cg(M, rhs, x0=x0, M=pre, tol=_CG_RTOL, atol=0.0, maxiter=20 * M.shape[0])
    if info != 0:
        where = "steady solve" if step is None else f"time step {step}"
        raise SolverError(f"conjugate gradients failed to converge at {where} (info={info})")
    return x


def _full_field(u: np.ndarray, grid: GridSpec, boundary: BoundarySpec) -> np.ndarray:
    h = np.empty((grid.n_y, grid.n_x))
    h[:, 0] = boundary.head_left
    h[:, -1] = boundary.head_right
    h[:, 1:-1] = u.reshape(grid.n_y, grid.n_x - 2)
    return h


def steady_state(K, grid: GridSpec, boundary: BoundarySpec) -> np.ndarray:
    """Time-independent head field, shape (n_y, n_x)."""
    K = _check_conductivity(K, grid)
    A, b = _assemble(K, grid, boundary)
    if A.shape[0] == 0:
        return _full_field(np.empty(0), grid, boundary)
    return _full_field(_solve_spd(A, b), grid, boundary)


def simulate(K, grid: GridSpec, time: TimeSpec, boundary: BoundarySpec) -> SimulationResult:
    """March the implicit scheme for n_t steps.

    Parameters
    ----------
    K : (n_y, n_x) array of positive cell conductivities.
    grid, time, boundary : discretization and boundary data.

    Returns
    -------
    SimulationResult with heads of shape (n_t + 1, n_y, n_x); index 0 is the
    initial state (pinned columns already at their Dirichlet values).
    """
    K = _check_conductivity(K, grid)
    A, b = _assemble(K, grid, boundary)
    n_u = A.shape[0]
    heads = np.empty((time.n_t + 1, grid.n_y, grid.n_x))

    u = np.full(n_u, float(boundary.head_initial))
    heads[0] = _full_field(u, grid, boundary)
    if n_u == 0:
        heads[1:] = heads[0]
        return SimulationResult(heads, grid, time, boundary)

    d = boundary.specific_storage * grid.dx * grid.dy / time.dt
    M = (A + d * sp.identity(n_u, format="csc")).tocsc()

    if n_u < DIRECT_SOLVE_LIMIT:
        lu = splu(M)
        for k in range(1, time.n_t + 1):
            u = lu.solve(d * u + b)
            heads[k] = _full_field(u, grid, boundary)
    else:
        pre = sp.diags(1.0 / M.diagonal())
        for k in range(1, time.n_t + 1):
            rhs = d * u + b
            try:
                u, info = cg(M, rhs, x0=u, M=pre, rtol=_CG_RTOL, atol=0.0,
                             maxiter=20 * n_u)
            except TypeError:
                u, info = cg(M, rhs, x0=u, M=pre, tol=_CG_RTOL, atol=0.0,
                             maxiter=20 * n_u)
            if info != 0:
                raise SolverError(f"conjugate gradients failed to converge at time step {k} "
                                  f"(info={info})")
            heads[k] = _full_field(u, grid, boundary)

    return SimulationResult(heads, grid, time, boundary)


def extract_labeled(result: SimulationResult, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample, without replacement, of (t, x, y, h) rows.

    The pool is every cell center at every step-end time dt..n_t*dt (the
    initial state is not a labeled instant).  Returns a (count, 4) array.
    """
    grid, time = result.grid, result.time
    pool = time.n_t * grid.n_x * grid.n_y
    if not 0 < count <= pool:
        raise ValueError(f"count must be in [1, {pool}], got {count}")
    flat = rng.choice(pool, size=count, replace=False)
    per = grid.n_x * grid.n_y
    k = flat // per + 1
    iy = (flat % per) // grid.n_x
    ix = flat % grid.n_x
    xs, ys = grid.cell_centers()
    out = np.column_stack([k * time.dt, xs[ix], ys[iy], result.heads[k, iy, ix]])
    return out


# -- persistence ------------------------------------------------------------

def save_result(path, result: SimulationResult):
    """One JSON header line, then the head history as raw little-endian f8."""
    grid, time, bnd = result.grid, result.time, result.boundary
    header = {
        "kind": "head-history",
        "n_t": time.n_t, "n_y": grid.n_y, "n_x": grid.n_x,
        "dt": time.dt, "dx": grid.dx, "dy": grid.dy,
        "origin": [grid.origin_x, grid.origin_y],
        "boundary": {
            "head_left": bnd.head_left, "head_right": bnd.head_right,
            "head_initial": bnd.head_initial,
            "specific_storage": bnd.specific_storage,
            "flux_lateral": bnd.flux_lateral,
        },
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(result.heads, dtype="<f8").tobytes())


def load_result(path) -> SimulationResult:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("kind") != "head-history":
            raise ValueError("not a head-history file")
        raw = fh.read()
    grid = GridSpec(n_x=header["n_x"], n_y=header["n_y"], dx=header["dx"],
                    dy=header["dy"], origin_x=header["origin"][0],
                    origin_y=header["origin"][1])
    time = TimeSpec(dt=header["dt"], n_t=header["n_t"])
    bnd = BoundarySpec(**header["boundary"])
    heads = np.frombuffer(raw, dtype="<f8").reshape(time.n_t + 1, grid.n_y, grid.n_x)
    return SimulationResult(heads.astype(float), grid, time, bnd)


def save_labeled(path, data: np.ndarray, metadata: dict | None = None):
    """CSV of labeled rows `t,x,y,h`; optional sidecar `<path>.meta.json`."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != 4:
        raise ValueError("labeled data must have shape (count, 4)")
    np.savetxt(path, data, delimiter=",", header="t,x,y,h", comments="", fmt="%.17g")
    if metadata is not None:
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(metadata, fh, indent=1)


def load_labeled(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
