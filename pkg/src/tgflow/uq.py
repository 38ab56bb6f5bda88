"""Monte Carlo uncertainty quantification over head fields.

An ensemble is driven by a matrix of mode coefficients; each row maps to a
full space-time head stack through either the reference solver or the
surrogate, and first/second moments accumulate in one numerically stable
pass.  Reusing one coefficient matrix across both evaluators gives paired
ensembles, which is what the accuracy metrics assume.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde

from . import darcy, network, random_field


class EvaluationError(RuntimeError):
    """A realization failed; carries the offending realization index."""

    def __init__(self, message, realization=None):
        super().__init__(message)
        self.realization = realization


def relative_l2(pred, ref) -> float:
    """||pred - ref|| / ||ref|| over flattened arrays."""
    pred = np.asarray(pred, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if pred.shape != ref.shape:
        raise ValueError("relative_l2 needs equal-length inputs")
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValueError("reference norm is zero")
    return float(np.linalg.norm(pred - ref)) / denom


def r2_score(pred, ref) -> float:
    """1 - sum (pred-ref)^2 / sum (ref - mean ref)^2."""
    pred = np.asarray(pred, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if pred.shape != ref.shape:
        raise ValueError("r2_score needs equal-length inputs")
    if ref.size < 2:
        raise ValueError("r2_score needs at least 2 values")
    centered = ref - ref.mean()
    ss_tot = float(centered @ centered)
    if ss_tot == 0.0:
        raise ValueError("reference is constant; r2_score is undefined")
    resid = pred - ref
    return 1.0 - float(resid @ resid) / ss_tot


class MomentAccumulator:
    """Streaming mean/variance of equally shaped sample arrays.

    Welford updates per sample; ``merge`` combines two partial states
    exactly (parallel/pairwise reduction), so partitioned accumulation
    reproduces the serial result up to roundoff.
    """

    def __init__(self, shape):
        self.count = 0
        self.mean = np.zeros(shape)
        self._m2 = np.zeros(shape)

    def update(self, sample):
        sample = np.asarray(sample, dtype=float)
        if sample.shape != self.mean.shape:
            raise ValueError("sample shape does not match accumulator")
        self.count += 1
        delta = sample - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (sample - self.mean)

    def merge(self, other: "MomentAccumulator"):
        if other.mean.shape != self.mean.shape:
            raise ValueError("cannot merge accumulators of different shapes")
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean.copy()
            self._m2 = other._m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * (other.count / total)
        self._m2 += other._m2 + delta * delta * (self.count * other.count / total)
        self.count = total
        return self

    @property
    def variance(self):
        """Unbiased estimate; needs at least two samples."""
        if self.count < 2:
            raise ValueError("variance needs at least 2 samples")
        return np.maximum(self._m2 / (self.count - 1), 0.0)


@dataclass
class EnsembleStats:
    """Per-step moment fields over the evaluation grid."""

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    count: int
    provenance: str = ""

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if self.mean.shape[0] != self.times.size:
            raise ValueError("leading axis must match the time list")
        if np.any(self.variance < 0.0):
            raise ValueError("variance fields must be nonnegative")


def solver_evaluator(model: random_field.KLEModel, grid: darcy.GridSpec,
                     time: darcy.TimeSpec, boundary: darcy.BoundarySpec):
    """Realization map through the reference solver, at step-end times."""

    def evaluate(xi):
        K = random_field.field_on_grid(model, xi, grid)
        return darcy.simulate(K, grid, time, boundary).heads[1:]

    return evaluate


def surrogate_evaluator(netspec: network.NetworkSpec, params: network.Parameters,
                        grid: darcy.GridSpec, times, hard_bc=None, extras=(),
                        batch: int = 65536):
    """Realization map through the network on the solver's cell centers.

    ``hard_bc`` is (h_left, h_right) when the network was trained with the
    built-in Dirichlet blend; ``extras`` appends fixed trailing inputs
    (boundary heads and field variance of a composite surrogate).
    """
    xc, yc = grid.cell_centers()
    times = np.asarray(times, dtype=float)
    T, Y, X = np.meshgrid(times, yc, xc, indexing="ij")
    base = np.column_stack([T.ravel(), X.ravel(), Y.ravel()])
    extras = np.asarray(extras, dtype=float)

    def evaluate(xi):
        xi = np.asarray(xi, dtype=float)
        P = base.shape[0]
        U = np.empty((P, 3 + xi.size + extras.size))
        U[:, :3] = base
        U[:, 3:3 + xi.size] = xi
        if extras.size:
            U[:, 3 + xi.size:] = extras
        values = np.empty(P)
        for lo in range(0, P, batch):
            part = U[lo:lo + batch]
            jets = network.forward_jet_batch(netspec, params, part, order=0)
            if hard_bc is not None:
                jets = network.apply_hard_bc(jets, part[:, 1], hard_bc[0],
                                             hard_bc[1], grid.origin_x,
                                             grid.length_x)
            values[lo:lo + batch] = jets.value
        return values.reshape(times.size, grid.n_y, grid.n_x)

    return evaluate


def mc_ensemble(evaluator, xi_matrix, times, provenance: str = "", probes=None):
    """Run the evaluator over every coefficient row and accumulate moments.

    The same xi_matrix fed to a solver evaluator and a surrogate evaluator
    yields paired ensembles for metric comparison.  ``probes`` is an
    optional list of (step, iy, ix) indices; when given, the return value
    is (stats, samples) with samples of shape (M, len(probes)) holding the
    raw head values there, the inputs for pointwise density estimates.
    """
    xi_matrix = np.asarray(xi_matrix, dtype=float)
    if xi_matrix.ndim != 2 or xi_matrix.shape[0] < 2:
        raise ValueError("need a (M, n) coefficient matrix with M >= 2")
    times = np.asarray(times, dtype=float)
    acc = None
    samples = None if probes is None else np.empty((xi_matrix.shape[0], len(probes)))
    for r in range(xi_matrix.shape[0]):
        try:
            field = np.asarray(evaluator(xi_matrix[r]), dtype=float)
        except Exception as err:
            raise EvaluationError(f"realization {r} failed: {err}", r) from err
        if field.shape[0] != times.size:
            raise EvaluationError(
                f"realization {r} returned {field.shape[0]} steps, "
                f"expected {times.size}", r)
        if acc is None:
            acc = MomentAccumulator(field.shape)
        acc.update(field)
        if probes is not None:
            for j, (k, iy, ix) in enumerate(probes):
                samples[r, j] = field[k, iy, ix]
    stats = EnsembleStats(times=times, mean=acc.mean, variance=acc.variance,
                          count=acc.count, provenance=provenance)
    return stats if probes is None else (stats, samples)


@dataclass
class PdfEstimate:
    """Histogram plus kernel-density curve of head samples at one point."""

    point: tuple
    samples: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    density_x: np.ndarray
    density_y: np.ndarray
    degenerate: bool = False


def pdf_estimate(point, samples) -> PdfEstimate:
    """Freedman-Diaconis histogram and Silverman Gaussian-kernel density.

    Zero-spread samples get the histogram only, with the density flagged
    unavailable.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 30:
        raise ValueError("pdf_estimate needs at least 30 samples")
    if np.ptp(samples) == 0.0:
        v = samples[0]
        edges = np.array([v - 0.5, v + 0.5])
        counts = np.array([samples.size])
        return PdfEstimate(point=tuple(point), samples=samples, bin_edges=edges,
                           counts=counts, density_x=np.empty(0),
                           density_y=np.empty(0), degenerate=True)
    edges = np.histogram_bin_edges(samples, bins="fd")
    counts, _ = np.histogram(samples, bins=edges)
    kde = gaussian_kde(samples, bw_method="silverman")
    bw = kde.factor * samples.std(ddof=1)
    lo = samples.min() - 5.0 * bw
    hi = samples.max() + 5.0 * bw
    xs = np.linspace(lo, hi, 512)
    return PdfEstimate(point=tuple(point), samples=samples, bin_edges=edges,
                       counts=counts, density_x=xs, density_y=kde(xs))


@dataclass
class MetricTable:
    """Accuracy of surrogate moment fields against a benchmark, per step."""

    times: np.ndarray
    rel_l2_mean: np.ndarray
    r2_mean: np.ndarray
    rel_l2_variance: np.ndarray
    r2_variance: np.ndarray

    def row(self, k) -> dict:
        return {"time": float(self.times[k]),
                "rel_l2_mean": float(self.rel_l2_mean[k]),
                "r2_mean": float(self.r2_mean[k]),
                "rel_l2_variance": float(self.rel_l2_variance[k]),
                "r2_variance": float(self.r2_variance[k])}


def metric_table(surrogate: EnsembleStats, benchmark: EnsembleStats) -> MetricTable:
    """Both metrics for mean and variance fields at every step.

    Fields are flattened over all cells, constant-head columns included.
    """
    if surrogate.mean.shape != benchmark.mean.shape:
        raise ValueError("ensemble shapes differ")
    if surrogate.times.size != benchmark.times.size or \
            not np.allclose(surrogate.times, benchmark.times):
        raise ValueError("ensemble time lists differ")
    S = surrogate.times.size
    out = MetricTable(times=surrogate.times.copy(), rel_l2_mean=np.empty(S),
                      r2_mean=np.empty(S), rel_l2_variance=np.empty(S),
                      r2_variance=np.empty(S))
    for k in range(S):
        out.rel_l2_mean[k] = relative_l2(surrogate.mean[k], benchmark.mean[k])
        out.r2_mean[k] = r2_score(surrogate.mean[k], benchmark.mean[k])
        out.rel_l2_variance[k] = relative_l2(surrogate.variance[k],
                                             benchmark.variance[k])
        out.r2_variance[k] = r2_score(surrogate.variance[k],
                                      benchmark.variance[k])
    return out


# -- serialization ------------------------------------------------------------

def save_metric_table(path, table: MetricTable):
    """CSV `step,time,rel_l2_mean,r2_mean,rel_l2_variance,r2_variance`."""
    with open(path, "w") as fh:
        fh.write("step,time,rel_l2_mean,r2_mean,rel_l2_variance,r2_variance\n")
        for k in range(table.times.size):
            r = table.row(k)
            fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                     % (k + 1, r["time"], r["rel_l2_mean"], r["r2_mean"],
                        r["rel_l2_variance"], r["r2_variance"]))


def load_metric_table(path) -> MetricTable:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return MetricTable(times=arr[:, 1], rel_l2_mean=arr[:, 2], r2_mean=arr[:, 3],
                       rel_l2_variance=arr[:, 4], r2_variance=arr[:, 5])


def save_ensemble_stats(directory, stats: EnsembleStats):
    """meta.json plus one mean/variance CSV per step."""
    os.makedirs(directory, exist_ok=True)
    meta = {"kind": "ensemble-stats", "count": stats.count,
            "provenance": stats.provenance, "times": stats.times.tolist(),
            "shape": list(stats.mean.shape[1:])}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    for k in range(stats.times.size):
        np.savetxt(os.path.join(directory, f"mean_{k + 1:04d}.csv"),
                   stats.mean[k], delimiter=",", fmt="%.17g")
        np.savetxt(os.path.join(directory, f"variance_{k + 1:04d}.csv"),
                   stats.variance[k], delimiter=",", fmt="%.17g")


def load_ensemble_stats(directory) -> EnsembleStats:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("kind") != "ensemble-stats":
        raise ValueError("not an ensemble-stats directory")
    times = np.asarray(meta["times"], dtype=float)
    shape = tuple(meta["shape"])
    mean = np.empty((times.size, *shape))
    var = np.empty((times.size, *shape))
    for k in range(times.size):
        mean[k] = np.loadtxt(os.path.join(directory, f"mean_{k + 1:04d}.csv"),
                             delimiter=",", ndmin=2)
        var[k] = np.loadtxt(os.path.join(directory, f"variance_{k + 1:04d}.csv"),
                            delimiter=",", ndmin=2)
    return EnsembleStats(times=times, mean=mean, variance=var,
                         count=meta["count"], provenance=meta["provenance"])


def save_pdf_estimate(prefix, est: PdfEstimate):
    """`<prefix>_hist.csv` and, unless degenerate, `<prefix>_density.csv`."""
    with open(str(prefix) + "_hist.csv", "w") as fh:
        fh.write("bin_left,bin_right,count\n")
        for i in range(est.counts.size):
            fh.write("%.17g,%.17g,%d\n"
                     % (est.bin_edges[i], est.bin_edges[i + 1], est.counts[i]))
    if not est.degenerate:
        with open(str(prefix) + "_density.csv", "w") as fh:
            fh.write("value,density\n")
            for x, y in zip(est.density_x, est.density_y):
                fh.write("%.17g,%.17g\n" % (x, y))
