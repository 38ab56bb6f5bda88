"""Truncated spectral expansion of a 2D Gaussian log-conductivity field.

The field Z = ln K has a separable exponential covariance

    C(x, x') = sigma2 * exp(-|x1-x2|/eta_x - |y1-y2|/eta_y)

whose 1D factors admit closed-form sinusoidal eigenfunctions: on a domain of
half-width a the frequencies w solve, alternately,

    c - w*tan(w*a) = 0   (cosine modes, c = 1/eta)
    w + c*tan(w*a) = 0   (sine modes)

with exactly one root in each consecutive interval (m*pi/L, (m+1)*pi/L) of
the w axis, and eigenvalues lambda = 2c/(w^2 + c^2) for the unit-variance
kernel.  2D modes are all pairwise products of the per-axis factors; the
field variance multiplies in at assembly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect


class TruncationError(ValueError):
    """Requested energy fraction is unreachable with the 1D mode budget."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Separable exponential covariance of the log-conductivity field."""

    variance: float
    corr_len_x: float
    corr_len_y: float
    length_x: float
    length_y: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        for name in ("variance", "corr_len_x", "corr_len_y", "length_x", "length_y"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"CovarianceSpec.{name} must be strictly positive")


@dataclass(frozen=True)
class Eigenpair1D:
    """One 1D factor mode: eigenvalue, frequency root, normalization.

    ``index`` is the root's interval index m (w in (m*pi/L, (m+1)*pi/L));
    even m are cosine modes about the domain midpoint, odd m sine modes.
    """

    index: int
    eigenvalue: float
    frequency: float
    norm: float

    @property
    def is_cosine(self) -> bool:
        return self.index % 2 == 0

    def evaluate(self, x, origin: float, length: float):
        """Eigenfunction value(s) at physical coordinate(s) x."""
        xc = np.asarray(x, dtype=float) - (origin + 0.5 * length)
        if self.is_cosine:
            return np.cos(self.frequency * xc) / self.norm
        return np.sin(self.frequency * xc) / self.norm

    def derivative(self, x, origin: float, length: float):
        """d/dx of the eigenfunction at physical coordinate(s) x."""
        xc = np.asarray(x, dtype=float) - (origin + 0.5 * length)
        w = self.frequency
        if self.is_cosine:
            return -w * np.sin(w * xc) / self.norm
        return w * np.cos(w * xc) / self.norm


def solve_eigenpairs_1d(corr_len: float, length: float, count: int) -> list[Eigenpair1D]:
    """Leading eigenpairs of the unit-variance exponential kernel on [0, L].

    Roots are bracketed in consecutive intervals of width pi/L and refined by
    bisection; eigenvalues come out strictly decreasing.

    Parameters
    ----------
    corr_len : correlation length eta (> 0).
    length : domain length L (> 0).
    count : number of leading modes (>= 1).
    """
    if not corr_len > 0.0:
        raise ValueError("corr_len must be strictly positive")
    if not length > 0.0:
        raise ValueError("length must be strictly positive")
    if count < 1:
        raise ValueError("count must be >= 1")

    a = 0.5 * length
    c = 1.0 / corr_len
    pairs = []
    for m in range(count):
        lo = m * math.pi / length
        hi = (m + 1) * math.pi / length
        inset = (hi - lo) * 1e-10
        if m % 2 == 0:
            f = lambda w: c - w * math.tan(w * a)  # noqa: E731
        else:
            f = lambda w: w + c * math.tan(w * a)  # noqa: E731
        try:
            w = bisect(f, lo + inset, hi - inset, xtol=1e-12, rtol=8.9e-16)
        except ValueError as exc:
            raise RuntimeError(f"root bracketing failed for 1D mode index {m}") from exc
        lam = 2.0 * c / (w * w + c * c)
        # L2 normalization over [-a, a]: cos -> a + sin(2wa)/2w, sin -> a - sin(2wa)/2w
        s = math.sin(2.0 * w * a) / (2.0 * w)
        norm = math.sqrt(a + s) if m % 2 == 0 else math.sqrt(a - s)
        pairs.append(Eigenpair1D(index=m, eigenvalue=lam, frequency=w, norm=norm))
    return pairs


def fredholm_residual(pair: Eigenpair1D, corr_len: float, length: float,
                      n_points: int = 50, quad_order: int = 96) -> float:
    """Max relative residual of the Fredholm identity for one 1D pair.

    Checks  int_0^L exp(-|x-x'|/eta) f(x') dx' = lambda f(x)  at n_points
    abscissae; the kernel kink at x' = x is handled by splitting the integral
    and applying Gauss-Legendre on each smooth piece.  The residual is
    normalized by lambda * max|f|.
    """
    xs = np.linspace(0.0, length, n_points)
    nodes, weights = np.polynomial.legendre.leggauss(quad_order)
    f_at = pair.evaluate(xs, 0.0, length)
    scale = pair.eigenvalue * np.max(np.abs(f_at))
    worst = 0.0
    for x, fx in zip(xs, f_at):
        total = 0.0
        for lo, hi in ((0.0, x), (x, length)):
            if hi - lo <= 0.0:
                continue
            mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
            xq = mid + half * nodes
            fq = pair.evaluate(xq, 0.0, length)
            total += half * np.sum(weights * np.exp(-np.abs(x - xq) / corr_len) * fq)
        worst = max(worst, abs(total - pair.eigenvalue * fx) / scale)
    return worst


@dataclass(frozen=True)
class Mode2D:
    """One retained 2D mode: product of an x-factor and a y-factor."""

    eigenvalue: float
    x_factor: Eigenpair1D
    y_factor: Eigenpair1D


class KLEModel:
    """Truncated expansion Z(x,y) = mean + sum_i sqrt(lam_i) f_i(x,y) xi_i.

    Immutable after construction; evaluations are pure.  Internally keeps
    flat arrays of the per-mode frequencies/normalizations so that basis
    evaluation over many points is a handful of vectorized trig calls.
    """

    def __init__(self, spec: CovarianceSpec, modes: list[Mode2D], mean_log_k: float,
                 energy_fraction: float):
        self.spec = spec
        self.modes = list(modes)
        self.mean_log_k = float(mean_log_k)
        self.energy_fraction = float(energy_fraction)
        n = len(modes)
        self.n_modes = n
        self._sqrt_lam = np.array([math.sqrt(m.eigenvalue) for m in modes])
        self._wx = np.array([m.x_factor.frequency for m in modes])
        self._wy = np.array([m.y_factor.frequency for m in modes])
        self._nx = np.array([m.x_factor.norm for m in modes])
        self._ny = np.array([m.y_factor.norm for m in modes])
        self._cos_x = np.array([m.x_factor.is_cosine for m in modes])
        self._cos_y = np.array([m.y_factor.is_cosine for m in modes])
        self._xc = spec.origin_x + 0.5 * spec.length_x
        self._yc = spec.origin_y + 0.5 * spec.length_y

    # -- basis evaluation -------------------------------------------------

    def basis_matrix(self, x, y) -> np.ndarray:
        """sqrt(lam_i) f_i(x,y) for each point, shape (P, n)."""
        xt = np.atleast_1d(np.asarray(x, dtype=float))[:, None] - self._xc
        yt = np.atleast_1d(np.asarray(y, dtype=float))[:, None] - self._yc
        fx = np.where(self._cos_x, np.cos(self._wx * xt), np.sin(self._wx * xt)) / self._nx
        fy = np.where(self._cos_y, np.cos(self._wy * yt), np.sin(self._wy * yt)) / self._ny
        return self._sqrt_lam * fx * fy

    def basis_gradients(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """(d/dx, d/dy) of sqrt(lam_i) f_i(x,y), each of shape (P, n)."""
        xt = np.atleast_1d(np.asarray(x, dtype=float))[:, None] - self._xc
        yt = np.atleast_1d(np.asarray(y, dtype=float))[:, None] - self._yc
        fx = np.where(self._cos_x, np.cos(self._wx * xt), np.sin(self._wx * xt)) / self._nx
        fy = np.where(self._cos_y, np.cos(self._wy * yt), np.sin(self._wy * yt)) / self._ny
        dfx = np.where(self._cos_x, -np.sin(self._wx * xt), np.cos(self._wx * xt)) \
            * self._wx / self._nx
        dfy = np.where(self._cos_y, -np.sin(self._wy * yt), np.cos(self._wy * yt)) \
            * self._wy / self._ny
        return self._sqrt_lam * dfx * fy, self._sqrt_lam * fx * dfy

    def _check_in_domain(self, x, y):
        s = self.spec
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        tol_x = 1e-9 * s.length_x
        tol_y = 1e-9 * s.length_y
        if np.any(x < s.origin_x - tol_x) or np.any(x > s.origin_x + s.length_x + tol_x) \
                or np.any(y < s.origin_y - tol_y) or np.any(y > s.origin_y + s.length_y + tol_y):
            raise ValueError("point outside the covariance domain")

    # -- serialization ----------------------------------------------------

    def to_document(self) -> dict:
        s = self.spec
        return {
            "kind": "kle-model",
            "spec": {
                "variance": s.variance,
                "corr_len_x": s.corr_len_x,
                "corr_len_y": s.corr_len_y,
                "length_x": s.length_x,
                "length_y": s.length_y,
                "origin_x": s.origin_x,
                "origin_y": s.origin_y,
            },
            "mean_log_k": self.mean_log_k,
            "truncation": {
                "n_modes": self.n_modes,
                "energy_fraction": self.energy_fraction,
            },
            "modes": [
                {
                    "eigenvalue": m.eigenvalue,
                    "x": {"index": m.x_factor.index, "eigenvalue": m.x_factor.eigenvalue,
                          "frequency": m.x_factor.frequency, "norm": m.x_factor.norm},
                    "y": {"index": m.y_factor.index, "eigenvalue": m.y_factor.eigenvalue,
                          "frequency": m.y_factor.frequency, "norm": m.y_factor.norm},
                }
                for m in self.modes
            ],
        }

    @classmethod
    def from_document(cls, doc: dict) -> "KLEModel":
        if doc.get("kind") != "kle-model":
            raise ValueError("not a kle-model document")
        spec = CovarianceSpec(
            variance=doc["spec"]["variance"],
            corr_len_x=doc["spec"]["corr_len_x"],
            corr_len_y=doc["spec"]["corr_len_y"],
            length_x=doc["spec"]["length_x"],
            length_y=doc["spec"]["length_y"],
            origin_x=doc["spec"]["origin_x"],
            origin_y=doc["spec"]["origin_y"],
        )
        modes = [
            Mode2D(
                eigenvalue=m["eigenvalue"],
                x_factor=Eigenpair1D(**m["x"]),
                y_factor=Eigenpair1D(**m["y"]),
            )
            for m in doc["modes"]
        ]
        return cls(spec, modes, doc["mean_log_k"], doc["truncation"]["energy_fraction"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_document(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "KLEModel":
        with open(path) as fh:
            return cls.from_document(json.load(fh))


def build_kle_2d(spec: CovarianceSpec, *, energy: float | None = None,
                 n_modes: int | None = None, mean_log_k: float = 0.0,
                 axis_budget: int = 100) -> KLEModel:
    """Assemble and truncate the 2D expansion from 1D factor modes.

    Exactly one of ``energy`` (target fraction of sigma2*Lx*Ly, in (0, 1])
    or ``n_modes`` (explicit retained count) selects the truncation.  2D
    eigenvalues are sigma2 * lam_x * lam_y of the unit-variance 1D problems,
    globally sorted descending with (x-index, y-index) tie-breaking.
    """
    if (energy is None) == (n_modes is None):
        raise ValueError("specify exactly one of energy= or n_modes=")
    if energy is not None and not 0.0 < energy <= 1.0:
        raise ValueError("energy target must lie in (0, 1]")
    if n_modes is not None and n_modes < 1:
        raise ValueError("n_modes must be >= 1")

    px = solve_eigenpairs_1d(spec.corr_len_x, spec.length_x, axis_budget)
    py = solve_eigenpairs_1d(spec.corr_len_y, spec.length_y, axis_budget)
    lam_x = np.array([p.eigenvalue for p in px])
    lam_y = np.array([p.eigenvalue for p in py])
    lam2 = spec.variance * lam_x[:, None] * lam_y[None, :]

    ii, jj = np.meshgrid(np.arange(axis_budget), np.arange(axis_budget), indexing="ij")
    flat = np.argsort(
        np.rec.fromarrays([-lam2.ravel(), ii.ravel(), jj.ravel()],
                          names=("neg", "i", "j")),
        order=("neg", "i", "j"),
    )
    lam_sorted = lam2.ravel()[flat]
    total = spec.variance * spec.length_x * spec.length_y
    cum = np.cumsum(lam_sorted) / total

    if n_modes is not None:
        if n_modes > flat.size:
            raise TruncationError(
                f"n_modes={n_modes} exceeds the {flat.size} modes available; "
                f"raise axis_budget")
        n = n_modes
    else:
        if cum[-1] < energy:
            raise TruncationError(
                f"energy target {energy:.4f} unreachable with axis_budget="
                f"{axis_budget} (max {cum[-1]:.6f}); raise axis_budget")
        n = int(np.searchsorted(cum, energy) + 1)

    modes = [
        Mode2D(eigenvalue=float(lam_sorted[k]),
               x_factor=px[ii.ravel()[flat[k]]],
               y_factor=py[jj.ravel()[flat[k]]])
        for k in range(n)
    ]
    return KLEModel(spec, modes, mean_log_k, float(cum[n - 1]))


# -- field evaluation -----------------------------------------------------

def _leading_xi(model: KLEModel, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or xi.size < model.n_modes:
        raise ValueError(
            f"xi must be a vector with at least {model.n_modes} entries, got shape {xi.shape}")
    return xi[: model.n_modes]


def evaluate_logK(model: KLEModel, xi, point) -> float | np.ndarray:
    """Z = mean + sum_i sqrt(lam_i) f_i(p) xi_i at one point or (P,2) points."""
    xi = _leading_xi(model, xi)
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    model._check_in_domain(p[:, 0], p[:, 1])
    z = model.mean_log_k + model.basis_matrix(p[:, 0], p[:, 1]) @ xi
    return float(z[0]) if single else z


def evaluate_logK_gradient(model: KLEModel, xi, point):
    """(dZ/dx, dZ/dy) from the analytic factor derivatives."""
    xi = _leading_xi(model, xi)
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    model._check_in_domain(p[:, 0], p[:, 1])
    gx, gy = model.basis_gradients(p[:, 0], p[:, 1])
    zx, zy = gx @ xi, gy @ xi
    if single:
        return float(zx[0]), float(zy[0])
    return zx, zy


def sample_xi(n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. standard normal coordinates from the provided generator."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return rng.standard_normal(n)


def field_on_grid(model: KLEModel, xi, grid) -> np.ndarray:
    """Conductivity K = exp(Z) at the grid's cell centers, shape (n_y, n_x)."""
    xi = _leading_xi(model, xi)
    xs, ys = grid.cell_centers()
    model._check_in_domain(xs, ys)
    X, Y = np.meshgrid(xs, ys)  # (n_y, n_x)
    phi = model.basis_matrix(X.ravel(), Y.ravel())
    z = model.mean_log_k + phi @ xi
    return np.exp(z.reshape(grid.n_y, grid.n_x))


# -- xi ensemble persistence -----------------------------------------------

def save_xi_ensemble(path, xi_matrix: np.ndarray):
    """CSV with header xi_1,...,xi_n; one realization per row."""
    xi_matrix = np.atleast_2d(np.asarray(xi_matrix, dtype=float))
    header = ",".join(f"xi_{k + 1}" for k in range(xi_matrix.shape[1]))
    np.savetxt(path, xi_matrix, delimiter=",", header=header, comments="",
               fmt="%.17g")


def load_xi_ensemble(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data
