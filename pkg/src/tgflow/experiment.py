"""Named experiment families and the staged run pipeline.

A run is fully described by one configuration document (a plain dict,
see builtin_config for the schema by example).  The pipeline turns it
into artifacts under ``<out_root>/run-<hash12>/`` in five stages:

    kle     field basis for the surrogate plus the richer benchmark basis
    data    labeled head samples from solver runs (skipped label-free)
    train   collocation sampling and the optimization loop; checkpoint
    uq      Monte Carlo moments, accuracy metrics, head PDFs at probes
    report  SVG plots of everything above

Each stage directory carries a ``stage.json`` marker with the config
hash, so re-running a finished stage is a no-op and editing the config
invalidates everything downstream of the change.  Solver benchmarks are
expensive and depend on fewer keys than the full document; they live in
``<out_root>/benchmarks/<key>/`` and are shared between runs (a hard-BC
run and its label-free twin reuse the same reference ensemble).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import threading
import time as _clock
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import config as cfg
from . import darcy, network, plotting, random_field, training, uq

STAGES = ("kle", "data", "train", "uq", "report")

SWEEP_AXES = ("collocation", "realizations", "variance")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- built-in configurations -------------------------------------------------------
#
# The desk/* family runs in minutes on one core and is what the test
# suite exercises; the paper/* family reproduces the published setups
# and needs hours.  Both share the schema, so any key can be overridden
# from the command line.

def _desk_base() -> dict:
    return {
        "name": "desk/base",
        "seed": 1601,
        "field": {"variance": 1.0, "corr_len_x": 408.0, "corr_len_y": 408.0,
                  "length_x": 1020.0, "length_y": 1020.0, "mean_log_k": 0.0,
                  "n_modes": 10, "energy": None},
        "grid": {"n_x": 26, "n_y": 26},
        "time": {"dt": 0.2, "n_t": 50},
        "boundary": {"head_left": 202.0, "head_right": 200.0,
                     "head_initial": 200.0, "specific_storage": 0.0001,
                     "flux_lateral": 0.0},
        "network": {"hidden": [40, 40, 40, 40], "beta": 1.0},
        "training": {"epochs": 500, "learning_rate": 0.001,
                     # 2048 doubles the update count per pass over the
                     # 40000 labels; the constant-lr budget needs it
                     "batch": {"labeled": 2048, "collocation": 4096},
                     "weights": {"data": 1.0, "pde": 1.0, "dirichlet": 1.0,
                                 "neumann": 1.0, "initial": 1.0},
                     "bc_mode": "hard"},
        "counts": {"realizations": 8, "labels_per_realization": 5000,
                   "interior": 20000, "dirichlet": 0, "neumann": 2500,
                   "initial": 2500},
        "benchmark": {"energy": 0.9, "samples": 1000,
                      "pdf_points": [[5.0, 510.0, 510.0], [9.0, 830.0, 310.0]]},
        "composite": {"enabled": False, "head_left_mean": 202.0,
                      "head_left_var": 0.25, "head_right_mean": 200.0,
                      "head_right_var": 0.25, "variance_low": 1.0,
                      "variance_high": 2.0, "eval_variance": 1.0},
        "transfer": {"variance": 0.4, "interior": 10000, "dirichlet": 1250,
                     "neumann": 1250, "initial": 1250, "epochs": 200,
                     "learning_rate": 0.001},
    }


def _desk_label_free() -> dict:
    doc = _desk_base()
    doc["name"] = "desk/label-free"
    # same master seed as desk/base so both grade against one cached
    # solver benchmark when they share an output root
    doc["counts"].update(realizations=0, labels_per_realization=0)
    # with no labels the t=0 plane is the only anchor for the interior;
    # it needs weight and many small steps to pull the net from its
    # near-zero start, since physics alone fixes solutions only up to
    # the initial state
    doc["training"]["batch"]["collocation"] = 1024
    doc["training"]["weights"].update(data=0.0, pde=10.0, initial=10.0)
    return doc


def _desk_composite() -> dict:
    doc = _desk_base()
    doc["name"] = "desk/composite"
    doc["seed"] = 1603
    doc["composite"]["enabled"] = True
    doc["training"]["bc_mode"] = "soft"
    # boundary heads and field variance become network inputs; no labels,
    # the physics terms carry everything, and like the label-free case
    # that takes many small steps rather than few large batches
    doc["counts"].update(realizations=0, labels_per_realization=0,
                         dirichlet=2500)
    doc["training"]["batch"]["collocation"] = 1024
    doc["training"]["weights"].update(data=0.0, pde=10.0, dirichlet=10.0,
                                      initial=10.0)
    return doc


def _paper_base() -> dict:
    doc = _desk_base()
    doc["name"] = "paper/base"
    doc["seed"] = 2701
    doc["field"].update(n_modes=None, energy=0.8)
    doc["grid"].update(n_x=51, n_y=51)
    doc["network"]["hidden"] = [50] * 7
    doc["training"]["epochs"] = 2000
    doc["counts"].update(realizations=30, labels_per_realization=40000,
                         interior=1000000, neumann=100000, initial=100000)
    doc["benchmark"].update(energy=0.96, samples=10000)
    return doc


def _paper_label_free() -> dict:
    doc = _paper_base()
    doc["name"] = "paper/label-free"
    doc["seed"] = 2702
    doc["counts"].update(realizations=0, labels_per_realization=0)
    doc["training"]["weights"].update(data=0.0, pde=10.0)
    return doc


def _paper_short_corr() -> dict:
    doc = _paper_base()
    doc["name"] = "paper/short-corr"
    doc["seed"] = 2703
    doc["field"].update(corr_len_x=204.0, corr_len_y=204.0)
    doc["network"]["hidden"] = [100] * 7
    doc["counts"].update(realizations=80, interior=3000000)
    doc["benchmark"]["energy"] = 0.95
    return doc


def _paper_composite() -> dict:
    doc = _paper_base()
    doc["name"] = "paper/composite"
    doc["seed"] = 2704
    doc["composite"]["enabled"] = True
    doc["training"]["bc_mode"] = "soft"
    doc["network"]["hidden"] = [80] * 7
    doc["counts"].update(realizations=150, interior=2000000, dirichlet=100000)
    return doc


_BUILTIN = {
    "desk/base": _desk_base,
    "desk/label-free": _desk_label_free,
    "desk/composite": _desk_composite,
    "paper/base": _paper_base,
    "paper/label-free": _paper_label_free,
    "paper/short-corr": _paper_short_corr,
    "paper/composite": _paper_composite,
}


def builtin_names() -> list[str]:
    return sorted(_BUILTIN)


def builtin_config(name: str) -> dict:
    try:
        factory = _BUILTIN[name]
    except KeyError:
        raise cfg.ConfigError(
            f"unknown built-in configuration {name!r}; "
            f"available: {', '.join(builtin_names())}") from None
    return factory()


_SECTIONS = ("name", "seed", "field", "grid", "time", "boundary", "network",
             "training", "counts", "benchmark", "composite", "transfer")


def validate_document(doc: dict):
    """Schema and cross-section checks, before any stage spends time."""
    for key in _SECTIONS:
        if key not in doc:
            raise cfg.ConfigError(f"missing configuration section {key!r}")
    f = doc["field"]
    if (f.get("n_modes") is None) == (f.get("energy") is None):
        raise cfg.ConfigError("field: set exactly one of n_modes or energy")
    if doc["composite"]["enabled"]:
        if f["variance"] != 1.0:
            raise cfg.ConfigError(
                "composite runs need field.variance: 1.0; the variance "
                "network input carries the actual sigma^2")
        if doc["training"]["bc_mode"] != "soft":
            raise cfg.ConfigError("composite runs need training.bc_mode: soft")
    for key, val in doc["counts"].items():
        if val < 0:
            raise cfg.ConfigError(f"counts.{key} must be >= 0")
    for point in doc["benchmark"]["pdf_points"]:
        if len(point) != 3:
            raise cfg.ConfigError("benchmark.pdf_points entries are [t, x, y]")
    try:
        grid_spec(doc)
        time_spec(doc)
        boundary_spec(doc)
        covariance_spec(doc)
        composite_input_spec(doc)
    except (TypeError, ValueError) as err:
        raise cfg.ConfigError(str(err)) from err


# -- document -> objects -----------------------------------------------------------

def covariance_spec(doc: dict, variance: float | None = None) -> random_field.CovarianceSpec:
    f = doc["field"]
    return random_field.CovarianceSpec(
        variance=f["variance"] if variance is None else variance,
        corr_len_x=f["corr_len_x"], corr_len_y=f["corr_len_y"],
        length_x=f["length_x"], length_y=f["length_y"])


def grid_spec(doc: dict) -> darcy.GridSpec:
    g, f = doc["grid"], doc["field"]
    return darcy.GridSpec(n_x=g["n_x"], n_y=g["n_y"],
                          dx=f["length_x"] / g["n_x"],
                          dy=f["length_y"] / g["n_y"])


def time_spec(doc: dict) -> darcy.TimeSpec:
    return darcy.TimeSpec(dt=doc["time"]["dt"], n_t=doc["time"]["n_t"])


def boundary_spec(doc: dict) -> darcy.BoundarySpec:
    return darcy.BoundarySpec(**doc["boundary"])


def composite_input_spec(doc: dict) -> training.CompositeInputSpec | None:
    comp = doc["composite"]
    if not comp["enabled"]:
        return None
    return training.CompositeInputSpec(
        head_left_mean=comp["head_left_mean"],
        head_left_var=comp["head_left_var"],
        head_right_mean=comp["head_right_mean"],
        head_right_var=comp["head_right_var"],
        variance_low=comp["variance_low"],
        variance_high=comp["variance_high"])


def surrogate_field_model(doc: dict) -> random_field.KLEModel:
    f = doc["field"]
    if f["n_modes"] is not None:
        return random_field.build_kle_2d(covariance_spec(doc),
                                         n_modes=f["n_modes"],
                                         mean_log_k=f["mean_log_k"])
    return random_field.build_kle_2d(covariance_spec(doc), energy=f["energy"],
                                     mean_log_k=f["mean_log_k"])


def benchmark_variance(doc: dict) -> float:
    comp = doc["composite"]
    return comp["eval_variance"] if comp["enabled"] else doc["field"]["variance"]


def benchmark_field_model(doc: dict) -> random_field.KLEModel:
    """Richer basis for the reference ensemble, at the evaluation variance."""
    spec = covariance_spec(doc, variance=benchmark_variance(doc))
    return random_field.build_kle_2d(spec, energy=doc["benchmark"]["energy"],
                                     mean_log_k=doc["field"]["mean_log_k"])


def sampling_ranges(doc: dict, n_modes: int) -> training.SamplingRanges:
    t, f = doc["time"], doc["field"]
    return training.SamplingRanges(t_end=t["dt"] * t["n_t"],
                                   length_x=f["length_x"],
                                   length_y=f["length_y"], n_modes=n_modes)


def loss_weights(doc: dict) -> training.LossWeights:
    return training.LossWeights(**doc["training"]["weights"])


def training_config(doc: dict) -> training.TrainingConfig:
    tr = doc["training"]
    return training.TrainingConfig(epochs=tr["epochs"],
                                   learning_rate=tr["learning_rate"],
                                   batch_labeled=tr["batch"]["labeled"],
                                   batch_collocation=tr["batch"]["collocation"],
                                   seed=stage_seed(doc["seed"], "train"),
                                   bc_mode=tr["bc_mode"])


def network_spec(doc: dict, n_modes: int) -> network.NetworkSpec:
    """Architecture with normalization spans taken from the config.

    Space-time inputs map to [-1, 1]; xi columns stay raw (standard
    normal already); composite extras map their +-4 sigma span (heads)
    or sampling interval (variance) to [-1, 1].
    """
    net, f, t, comp = doc["network"], doc["field"], doc["time"], doc["composite"]
    spans = [(0.0, t["dt"] * t["n_t"]), (0.0, f["length_x"]),
             (0.0, f["length_y"])]
    shift, scale = [], []
    for lo, hi in spans:
        s, c = network.normalization_to_unit_interval(lo, hi)
        shift.append(s)
        scale.append(c)
    shift += [0.0] * n_modes
    scale += [1.0] * n_modes
    if comp["enabled"]:
        for mean, var in ((comp["head_left_mean"], comp["head_left_var"]),
                          (comp["head_right_mean"], comp["head_right_var"])):
            half = 4.0 * np.sqrt(var) if var > 0 else 1.0
            s, c = network.normalization_to_unit_interval(mean - half, mean + half)
            shift.append(s)
            scale.append(c)
        s, c = network.normalization_to_unit_interval(comp["variance_low"],
                                                      comp["variance_high"])
        shift.append(s)
        scale.append(c)
    return network.NetworkSpec(n_inputs=len(shift), hidden=tuple(net["hidden"]),
                               beta=net["beta"], shift=tuple(shift),
                               scale=tuple(scale))


def stage_seed(master: int, stage: str) -> int:
    """Independent deterministic stream per stage from one master seed."""
    digest = hashlib.sha256(f"{master}:{stage}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


def energy_table(model: random_field.KLEModel) -> np.ndarray:
    """Rows (n, eigenvalue, cumulative energy fraction), n = 0..n_modes.

    The n=0 row (no modes retained, zero energy) anchors the curve.
    """
    lam = np.array([m.eigenvalue for m in model.modes])
    total = model.spec.variance * model.spec.length_x * model.spec.length_y
    return np.column_stack([np.arange(0.0, lam.size + 1.0),
                            np.concatenate([[0.0], lam]),
                            np.concatenate([[0.0], np.cumsum(lam) / total])])


def save_energy_table(path, table: np.ndarray):
    np.savetxt(path, table, delimiter=",", comments="", fmt="%.17g",
               header="n,eigenvalue,cumulative_energy")


# -- manifest and markers ----------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    run_dir: str
    version: str
    stages: dict

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"kind": "run-manifest", "config_hash": self.config_hash,
                       "run_dir": self.run_dir, "version": self.version,
                       "stages": self.stages}, fh, indent=1)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "run-manifest":
            raise ValueError("not a run manifest")
        return cls(config_hash=doc["config_hash"], run_dir=doc["run_dir"],
                   version=doc["version"], stages=doc["stages"])


def _stage_artifacts(stage_dir) -> list[str]:
    """Artifact paths relative to the stage directory, marker excluded."""
    found = []
    for base, _dirs, files in os.walk(stage_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(base, name), stage_dir)
            if rel != "stage.json":
                found.append(rel)
    return sorted(found)


def run_directory(doc: dict, out_root) -> str:
    return os.path.join(out_root, "run-" + cfg.short_hash(doc))


def _marker_path(stage_dir) -> str:
    return os.path.join(stage_dir, "stage.json")


def _stage_is_built(stage_dir, config_hash: str) -> bool:
    try:
        with open(_marker_path(stage_dir)) as fh:
            marker = json.load(fh)
    except (OSError, ValueError):
        return False
    return marker.get("config_hash") == config_hash


def _write_marker(stage_dir, config_hash: str, seconds: float):
    with open(_marker_path(stage_dir), "w") as fh:
        json.dump({"config_hash": config_hash, "seconds": seconds}, fh, indent=1)


# -- pipeline ----------------------------------------------------------------------

def stage_status(doc: dict, out_root) -> dict:
    """Per-stage 'built' or 'missing', judged by the on-disk markers."""
    full_hash = cfg.config_hash(doc)
    run_dir = run_directory(doc, out_root)
    return {stage: ("built" if _stage_is_built(os.path.join(run_dir, stage),
                                               full_hash) else "missing")
            for stage in STAGES}


def run_pipeline(doc: dict, out_root, *, through: str = "report",
                 echo=None) -> RunManifest:
    """Build every stage up to ``through``, skipping ones already built.

    Artifacts land under ``<out_root>/run-<hash>/<stage>/``; the returned
    manifest (also saved as manifest.json) records per-stage status and
    wall time.  Failures raise StageError after persisting the manifest.
    """
    if through not in STAGES:
        raise cfg.ConfigError(
            f"unknown stage {through!r}; stages are {', '.join(STAGES)}")
    validate_document(doc)
    say = echo if echo is not None else (lambda _line: None)
    full_hash = cfg.config_hash(doc)
    run_dir = run_directory(doc, out_root)
    os.makedirs(run_dir, exist_ok=True)
    cfg.save_config(os.path.join(run_dir, "config.yaml"), doc)
    from . import __version__
    manifest = RunManifest(config_hash=full_hash, run_dir=run_dir,
                           version=__version__, stages={})
    manifest_path = os.path.join(run_dir, "manifest.json")
    for stage in STAGES[:STAGES.index(through) + 1]:
        stage_dir = os.path.join(run_dir, stage)
        if _stage_is_built(stage_dir, full_hash):
            manifest.stages[stage] = {"status": "cached", "seconds": 0.0,
                                      "artifacts": _stage_artifacts(stage_dir)}
            manifest.save(manifest_path)
            say(f"[{stage}] cached")
            continue
        os.makedirs(stage_dir, exist_ok=True)
        started = _clock.perf_counter()
        try:
            _STAGE_RUNNERS[stage](doc, run_dir, stage_dir, out_root, say)
        except Exception as err:
            manifest.stages[stage] = {"status": "failed", "error": str(err)}
            manifest.save(manifest_path)
            if isinstance(err, StageError):
                raise
            raise StageError(stage, str(err)) from err
        seconds = _clock.perf_counter() - started
        _write_marker(stage_dir, full_hash, seconds)
        manifest.stages[stage] = {"status": "built", "seconds": seconds,
                                  "artifacts": _stage_artifacts(stage_dir)}
        manifest.save(manifest_path)
        say(f"[{stage}] built in {seconds:.6g} s")
    return manifest


def _stage_kle(doc, run_dir, stage_dir, out_root, say):
    model = surrogate_field_model(doc)
    model.save(os.path.join(stage_dir, "model.json"))
    save_energy_table(os.path.join(stage_dir, "energy.csv"), energy_table(model))
    bench = benchmark_field_model(doc)
    bench.save(os.path.join(stage_dir, "benchmark_model.json"))
    say(f"[kle] surrogate basis {model.n_modes} modes "
        f"({model.energy_fraction:.6g} energy), benchmark basis "
        f"{bench.n_modes} ({bench.energy_fraction:.6g})")


def _stage_data(doc, run_dir, stage_dir, out_root, say):
    counts = doc["counts"]
    if counts["realizations"] == 0:
        say("[data] label-free configuration, nothing to simulate")
        return
    model = random_field.KLEModel.load(os.path.join(run_dir, "kle", "model.json"))
    rng = np.random.default_rng(stage_seed(doc["seed"], "data"))
    labeled = training.build_training_set(
        counts["realizations"], counts["labels_per_realization"], model,
        grid_spec(doc), time_spec(doc), boundary_spec(doc), rng,
        composite=composite_input_spec(doc))
    training.save_labeled_set(os.path.join(stage_dir, "labels.csv"), labeled)
    random_field.save_xi_ensemble(os.path.join(stage_dir, "xi.csv"), labeled.xi)
    say(f"[data] {len(labeled)} labeled heads from "
        f"{counts['realizations']} solver runs")


def _stage_train(doc, run_dir, stage_dir, out_root, say):
    model = random_field.KLEModel.load(os.path.join(run_dir, "kle", "model.json"))
    counts = doc["counts"]
    ranges = sampling_ranges(doc, model.n_modes)
    rng = np.random.default_rng(stage_seed(doc["seed"], "collocation"))
    points = training.sample_collocation(
        ranges, counts["interior"], counts["dirichlet"], counts["neumann"],
        counts["initial"], rng, composite=composite_input_spec(doc))
    physics = training.PhysicsSpec.from_boundary(
        boundary_spec(doc), ranges, mean_log_k=doc["field"]["mean_log_k"])
    prep = training.prepare_collocation(points, model, physics)
    labeled = None
    if counts["realizations"] > 0:
        labeled = training.load_labeled_set(
            os.path.join(run_dir, "data", "labels.csv"))
    weights = loss_weights(doc)
    if labeled is None and weights.data > 0.0:
        weights = replace(weights, data=0.0)
        say("[train] no labeled set, dropping the data term")
    spec = network_spec(doc, model.n_modes)
    params0 = network.init_parameters(
        spec, np.random.default_rng(stage_seed(doc["seed"], "init")))
    if doc["training"]["bc_mode"] == "soft":
        # soft mode trains absolute heads; starting the output at the mid
        # boundary level keeps the optimizer's travel O(1)
        comp = doc["composite"]
        if comp["enabled"]:
            level = 0.5 * (comp["head_left_mean"] + comp["head_right_mean"])
        else:
            level = 0.5 * (doc["boundary"]["head_left"]
                           + doc["boundary"]["head_right"])
        params0.bias(len(spec.hidden))[:] = level
    params, history = training.train(spec, params0, labeled, prep, weights,
                                     training_config(doc))
    network.save_checkpoint(os.path.join(stage_dir, "checkpoint.dat"), spec,
                            params, metadata={"name": doc["name"],
                                              "config_hash": cfg.config_hash(doc)})
    training.save_loss_history(os.path.join(stage_dir, "history.csv"), history)
    if history:
        say(f"[train] {len(history)} epochs, final loss "
            f"{history[-1]['total']:.6g}")


def probe_indices(doc: dict, grid: darcy.GridSpec,
                  time: darcy.TimeSpec) -> list[tuple[int, int, int]]:
    """Map configured (t, x, y) probes to (step, iy, ix) sample indices."""
    xc, yc = grid.cell_centers()
    out = []
    for t, x, y in doc["benchmark"]["pdf_points"]:
        k = int(round(t / time.dt)) - 1
        if not 0 <= k < time.n_t:
            raise cfg.ConfigError(
                f"pdf point time {t} lies outside the simulated steps")
        out.append((k, int(np.argmin(np.abs(yc - y))),
                    int(np.argmin(np.abs(xc - x)))))
    return out


def benchmark_fingerprint(doc: dict) -> dict:
    """The config subset that determines the reference Monte Carlo."""
    field = dict(doc["field"])
    field.pop("n_modes", None)
    field.pop("energy", None)
    field["variance"] = benchmark_variance(doc)
    return {"field": field, "grid": doc["grid"], "time": doc["time"],
            "boundary": doc["boundary"], "benchmark": doc["benchmark"],
            "seed": doc["seed"]}


def _save_probe_samples(path, samples: np.ndarray):
    header = ",".join(f"probe_{j + 1}" for j in range(samples.shape[1]))
    np.savetxt(path, samples, delimiter=",", comments="", header=header,
               fmt="%.17g")


def _load_probe_samples(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


# parallel sweep points may share a benchmark; build it exactly once
_BENCH_LOCK = threading.Lock()


def _ensure_benchmark(doc, out_root, say):
    """Build or reload the shared solver ensemble for this configuration."""
    with _BENCH_LOCK:
        return _ensure_benchmark_locked(doc, out_root, say)


def _ensure_benchmark_locked(doc, out_root, say):
    fingerprint = benchmark_fingerprint(doc)
    key = cfg.config_hash(fingerprint)[:12]
    bdir = os.path.join(out_root, "benchmarks", key)
    meta_path = os.path.join(bdir, "benchmark.json")
    if os.path.exists(meta_path):
        stats = uq.load_ensemble_stats(os.path.join(bdir, "stats"))
        xi = random_field.load_xi_ensemble(os.path.join(bdir, "xi.csv"))
        samples = _load_probe_samples(os.path.join(bdir, "probe_samples.csv"))
        say(f"[uq] benchmark {key} cached ({stats.count} realizations)")
        return bdir, stats, samples, xi
    os.makedirs(bdir, exist_ok=True)
    model = benchmark_field_model(doc)
    grid, time = grid_spec(doc), time_spec(doc)
    m = doc["benchmark"]["samples"]
    rng = np.random.default_rng(stage_seed(doc["seed"], "benchmark"))
    xi = rng.standard_normal((m, model.n_modes))
    evaluator = uq.solver_evaluator(model, grid, time, boundary_spec(doc))
    started = _clock.perf_counter()
    stats, samples = uq.mc_ensemble(evaluator, xi, time.step_times()[1:],
                                    provenance="solver " + key,
                                    probes=probe_indices(doc, grid, time))
    seconds = _clock.perf_counter() - started
    uq.save_ensemble_stats(os.path.join(bdir, "stats"), stats)
    random_field.save_xi_ensemble(os.path.join(bdir, "xi.csv"), xi)
    _save_probe_samples(os.path.join(bdir, "probe_samples.csv"), samples)
    model.save(os.path.join(bdir, "model.json"))
    with open(meta_path, "w") as fh:
        json.dump({"kind": "mc-benchmark", "fingerprint": fingerprint,
                   "seconds": seconds}, fh, indent=1)
    say(f"[uq] benchmark {key} built in {seconds:.6g} s ({m} solver runs)")
    return bdir, stats, samples, xi


def _surrogate_extras(doc: dict, variance: float | None = None) -> tuple:
    comp = doc["composite"]
    if not comp["enabled"]:
        return ()
    return (comp["head_left_mean"], comp["head_right_mean"],
            comp["eval_variance"] if variance is None else variance)


def _stage_uq(doc, run_dir, stage_dir, out_root, say):
    bdir, bench_stats, bench_samples, xi = _ensure_benchmark(doc, out_root, say)
    spec, params, _meta = network.load_checkpoint(
        os.path.join(run_dir, "train", "checkpoint.dat"))
    model = random_field.KLEModel.load(os.path.join(run_dir, "kle", "model.json"))
    if xi.shape[1] < model.n_modes:
        raise StageError("uq", f"benchmark basis has {xi.shape[1]} modes but "
                               f"the surrogate needs {model.n_modes}; raise "
                               f"benchmark.energy")
    grid, time = grid_spec(doc), time_spec(doc)
    times = time.step_times()[1:]
    hard = None
    if doc["training"]["bc_mode"] == "hard":
        hard = (doc["boundary"]["head_left"], doc["boundary"]["head_right"])
    evaluator = uq.surrogate_evaluator(spec, params, grid, times, hard_bc=hard,
                                       extras=_surrogate_extras(doc))
    probes = probe_indices(doc, grid, time)
    surr_stats, surr_samples = uq.mc_ensemble(
        evaluator, xi[:, :model.n_modes], times,
        provenance="surrogate " + doc["name"], probes=probes)
    uq.save_ensemble_stats(os.path.join(stage_dir, "surrogate_stats"), surr_stats)
    table = uq.metric_table(surr_stats, bench_stats)
    uq.save_metric_table(os.path.join(stage_dir, "metrics.csv"), table)
    for j, probe in enumerate(probes):
        uq.save_pdf_estimate(os.path.join(stage_dir, f"pdf_{j + 1}_benchmark"),
                             uq.pdf_estimate(probe, bench_samples[:, j]))
        uq.save_pdf_estimate(os.path.join(stage_dir, f"pdf_{j + 1}_surrogate"),
                             uq.pdf_estimate(probe, surr_samples[:, j]))
    with open(os.path.join(stage_dir, "benchmark.json"), "w") as fh:
        json.dump({"directory": os.path.relpath(bdir, out_root)}, fh, indent=1)
    mid = time.n_t // 2 - 1
    say(f"[uq] mid-step r2: mean {table.r2_mean[mid]:.6g}, "
        f"variance {table.r2_variance[mid]:.6g}")


def _pdf_overlay_series(uq_dir, j):
    series = []
    hist = np.loadtxt(os.path.join(uq_dir, f"pdf_{j}_benchmark_hist.csv"),
                      delimiter=",", skiprows=1, ndmin=2)
    total = hist[:, 2].sum()
    widths = hist[:, 1] - hist[:, 0]
    edges = np.append(hist[:, 0], hist[-1, 1])
    series.append({"label": "reference histogram", "x": edges,
                   "y": hist[:, 2] / (total * widths), "style": "step",
                   "color": "#b0b6bf"})
    for tag, label in (("benchmark", "reference density"),
                       ("surrogate", "surrogate density")):
        path = os.path.join(uq_dir, f"pdf_{j}_{tag}_density.csv")
        if os.path.exists(path):
            dens = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            series.append({"label": label, "x": dens[:, 0], "y": dens[:, 1]})
    return series


def _stage_report(doc, run_dir, stage_dir, out_root, say):
    history = training.load_loss_history(
        os.path.join(run_dir, "train", "history.csv"))
    written = []
    if history.size:
        names = ("total", "data", "pde", "dirichlet", "neumann", "initial")
        series = []
        for i, label in enumerate(names):
            col = history[:, i + 1]
            if label != "total" and not np.any(col > 0.0):
                continue
            series.append({"label": label, "x": history[:, 0], "y": col})
        plotting.line_plot(os.path.join(stage_dir, "loss.svg"), series,
                           title=f"training loss ({doc['name']})",
                           xlabel="epoch", ylabel="mse", ylog=True)
        written.append("loss.svg")
    table = uq.load_metric_table(os.path.join(run_dir, "uq", "metrics.csv"))
    plotting.line_plot(
        os.path.join(stage_dir, "metrics_r2.svg"),
        [{"label": "mean head", "x": table.times, "y": table.r2_mean},
         {"label": "head variance", "x": table.times, "y": table.r2_variance}],
        title="coefficient of determination vs reference",
        xlabel="time", ylabel="r2")
    plotting.line_plot(
        os.path.join(stage_dir, "metrics_rel_l2.svg"),
        [{"label": "mean head", "x": table.times, "y": table.rel_l2_mean},
         {"label": "head variance", "x": table.times,
          "y": table.rel_l2_variance}],
        title="relative L2 error vs reference",
        xlabel="time", ylabel="relative error", ylog=True)
    written += ["metrics_r2.svg", "metrics_rel_l2.svg"]
    energy = np.loadtxt(os.path.join(run_dir, "kle", "energy.csv"),
                        delimiter=",", skiprows=1, ndmin=2)
    plotting.line_plot(
        os.path.join(stage_dir, "energy.svg"),
        [{"label": "retained fraction", "x": energy[:, 0], "y": energy[:, 2]}],
        title="field basis energy", xlabel="modes",
        ylabel="cumulative fraction")
    written.append("energy.svg")
    uq_dir = os.path.join(run_dir, "uq")
    for j in range(1, len(doc["benchmark"]["pdf_points"]) + 1):
        t, x, y = doc["benchmark"]["pdf_points"][j - 1]
        plotting.line_plot(
            os.path.join(stage_dir, f"pdf_{j}.svg"),
            _pdf_overlay_series(uq_dir, j),
            title=f"head pdf at t={t:g}, x={x:g}, y={y:g}",
            xlabel="head", ylabel="density")
        written.append(f"pdf_{j}.svg")
    say("[report] wrote " + ", ".join(written))


_STAGE_RUNNERS = {"kle": _stage_kle, "data": _stage_data, "train": _stage_train,
                  "uq": _stage_uq, "report": _stage_report}


def run_single_simulation(doc: dict, out_root, *, echo=None) -> str:
    """One solver run on one sampled conductivity field, for inspection.

    Not a pipeline stage: builds its own small field basis, draws a
    single realization, and saves heads, conductivity, and coefficients
    under ``<run>/simulate/``.  Returns that directory.
    """
    validate_document(doc)
    say = echo if echo is not None else (lambda _line: None)
    full_hash = cfg.config_hash(doc)
    run_dir = run_directory(doc, out_root)
    sim_dir = os.path.join(run_dir, "simulate")
    if _stage_is_built(sim_dir, full_hash):
        say("[simulate] cached")
        return sim_dir
    os.makedirs(sim_dir, exist_ok=True)
    cfg.save_config(os.path.join(run_dir, "config.yaml"), doc)
    started = _clock.perf_counter()
    model = surrogate_field_model(doc)
    rng = np.random.default_rng(stage_seed(doc["seed"], "simulate"))
    xi = random_field.sample_xi(model.n_modes, rng)
    grid = grid_spec(doc)
    conductivity = random_field.field_on_grid(model, xi, grid)
    result = darcy.simulate(conductivity, grid, time_spec(doc), boundary_spec(doc))
    darcy.save_result(os.path.join(sim_dir, "heads.dat"), result)
    np.savetxt(os.path.join(sim_dir, "conductivity.csv"), conductivity,
               delimiter=",", fmt="%.17g")
    random_field.save_xi_ensemble(os.path.join(sim_dir, "xi.csv"),
                                  xi[np.newaxis, :])
    _write_marker(sim_dir, full_hash, _clock.perf_counter() - started)
    final = result.heads[-1]
    say(f"[simulate] {doc['time']['n_t']} steps; final head range "
        f"{final.min():.6g} to {final.max():.6g}")
    return sim_dir


# -- transfer to an unseen variance ------------------------------------------------

def run_transfer(doc: dict, out_root, *, build_deps: bool = False,
                 echo=None) -> dict:
    """Fine-tune a composite surrogate at transfer.variance, label-free.

    Measures the variance-field r2 at the window midpoint before and
    after pinning the variance input and re-training on fresh collocation
    points.  Artifacts land under ``<run>/transfer/``; returns the
    summary dict (also saved as summary.json).
    """
    validate_document(doc)
    say = echo if echo is not None else (lambda _line: None)
    comp = composite_input_spec(doc)
    if comp is None:
        raise cfg.ConfigError(
            "transfer needs a composite configuration (composite.enabled: true)")
    full_hash = cfg.config_hash(doc)
    run_dir = run_directory(doc, out_root)
    train_dir = os.path.join(run_dir, "train")
    if build_deps:
        run_pipeline(doc, out_root, through="train", echo=echo)
    elif not _stage_is_built(train_dir, full_hash):
        raise StageError("transfer", "no trained checkpoint for this "
                                     "configuration; build through 'train' first")
    tdir = os.path.join(run_dir, "transfer")
    summary_path = os.path.join(tdir, "summary.json")
    if _stage_is_built(tdir, full_hash):
        with open(summary_path) as fh:
            summary = json.load(fh)
        say(f"[transfer] cached: variance r2 "
            f"{summary['r2_variance_before']:.6g} -> "
            f"{summary['r2_variance_after']:.6g}")
        return summary
    os.makedirs(tdir, exist_ok=True)
    started = _clock.perf_counter()
    tr = doc["transfer"]
    eval_doc = copy.deepcopy(doc)
    eval_doc["composite"]["eval_variance"] = tr["variance"]
    bdir, bench_stats, _bench_samples, xi = _ensure_benchmark(eval_doc,
                                                              out_root, say)
    model = random_field.KLEModel.load(os.path.join(run_dir, "kle", "model.json"))
    spec, params, _meta = network.load_checkpoint(
        os.path.join(train_dir, "checkpoint.dat"))
    grid, time = grid_spec(doc), time_spec(doc)
    times = time.step_times()[1:]
    extras = _surrogate_extras(doc, variance=tr["variance"])

    def variance_metrics(parameters):
        evaluator = uq.surrogate_evaluator(spec, parameters, grid, times,
                                           extras=extras)
        stats = uq.mc_ensemble(evaluator, xi[:, :model.n_modes], times,
                               provenance=f"surrogate {doc['name']} "
                                          f"sigma2={tr['variance']:g}")
        return uq.metric_table(stats, bench_stats)

    mid = time.n_t // 2 - 1
    before = variance_metrics(params)
    say(f"[transfer] pretrained variance r2 at t={times[mid]:.6g}: "
        f"{before.r2_variance[mid]:.6g}")
    ranges = sampling_ranges(doc, model.n_modes)
    rng = np.random.default_rng(stage_seed(doc["seed"], "transfer"))
    points = training.sample_collocation(ranges, tr["interior"],
                                         tr["dirichlet"], tr["neumann"],
                                         tr["initial"], rng, composite=comp)
    points = training.pin_composite_inputs(points, tr["variance"])
    physics = training.PhysicsSpec.from_boundary(
        boundary_spec(doc), ranges, mean_log_k=doc["field"]["mean_log_k"])
    prep = training.prepare_collocation(points, model, physics)
    config = training.TrainingConfig(
        epochs=tr["epochs"], learning_rate=tr["learning_rate"],
        batch_collocation=doc["training"]["batch"]["collocation"],
        seed=stage_seed(doc["seed"], "transfer-train"), bc_mode="soft")
    tune_started = _clock.perf_counter()
    tuned, history = training.transfer_finetune(spec, params, prep,
                                                loss_weights(doc), config)
    tune_seconds = _clock.perf_counter() - tune_started
    after = variance_metrics(tuned)
    network.save_checkpoint(os.path.join(tdir, "checkpoint.dat"), spec, tuned,
                            metadata={"name": doc["name"],
                                      "variance": tr["variance"]})
    training.save_loss_history(os.path.join(tdir, "history.csv"), history)
    uq.save_metric_table(os.path.join(tdir, "metrics_before.csv"), before)
    uq.save_metric_table(os.path.join(tdir, "metrics_after.csv"), after)
    summary = {"variance": tr["variance"], "mid_time": float(times[mid]),
               "r2_variance_before": float(before.r2_variance[mid]),
               "r2_variance_after": float(after.r2_variance[mid]),
               "r2_mean_before": float(before.r2_mean[mid]),
               "r2_mean_after": float(after.r2_mean[mid]),
               "finetune_seconds": tune_seconds,
               "benchmark": os.path.relpath(bdir, out_root)}
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=1)
    _write_marker(tdir, full_hash, _clock.perf_counter() - started)
    say(f"[transfer] variance r2 {summary['r2_variance_before']:.6g} -> "
        f"{summary['r2_variance_after']:.6g} after {tr['epochs']} epochs "
        f"({tune_seconds:.6g} s)")
    return summary


# -- sweeps ------------------------------------------------------------------------

def sweep_key(doc: dict, axis: str) -> str:
    """Dotted config key a sweep axis drives for this document."""
    if axis == "collocation":
        return "counts.interior"
    if axis == "realizations":
        return "counts.realizations"
    if axis == "variance":
        return ("composite.eval_variance" if doc["composite"]["enabled"]
                else "field.variance")
    raise cfg.ConfigError(
        f"unknown sweep axis {axis!r}; axes are {', '.join(SWEEP_AXES)}")


def sweep(doc: dict, axis: str, values, out_root, *, workers: int | None = None,
          echo=None) -> tuple[list[RunManifest | None], list[dict]]:
    """One pipeline run per value along an axis.

    Each point is a full config document, so it gets its own run
    directory and reuses any benchmark it shares with siblings.  A
    failed point is recorded (manifest entry None if nothing was
    persisted) and the sweep continues.  Returns the manifests and the
    per-point metric rows, both in input order; the rows are also
    written as one CSV.  ``workers`` > 1 runs points concurrently
    (default from the TGFLOW_WORKERS environment variable).
    """
    validate_document(doc)
    say = echo if echo is not None else (lambda _line: None)
    key = sweep_key(doc, axis)
    mid = doc["time"]["n_t"] // 2 - 1
    if workers is None:
        workers = int(os.environ.get("TGFLOW_WORKERS", "1"))

    def run_point(value):
        point = copy.deepcopy(doc)
        cfg.set_key(point, key, type(cfg.get_key(doc, key))(value))
        say(f"[sweep] {key} = {value:g}")
        try:
            manifest = run_pipeline(point, out_root, through="uq", echo=echo)
        except (StageError, cfg.ConfigError) as err:
            run_dir = run_directory(point, out_root)
            manifest_path = os.path.join(run_dir, "manifest.json")
            manifest = (RunManifest.load(manifest_path)
                        if os.path.exists(manifest_path) else None)
            return manifest, {"value": float(value),
                              "run": os.path.basename(run_dir),
                              "status": str(err)}
        table = uq.load_metric_table(
            os.path.join(manifest.run_dir, "uq", "metrics.csv"))
        return manifest, {"value": float(value),
                          "run": os.path.basename(manifest.run_dir),
                          "status": "ok",
                          "r2_mean": float(table.r2_mean[mid]),
                          "r2_variance": float(table.r2_variance[mid]),
                          "rel_l2_mean": float(table.rel_l2_mean[mid]),
                          "rel_l2_variance": float(table.rel_l2_variance[mid])}

    values = list(values)
    if workers > 1 and len(values) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_point, values))
    else:
        results = [run_point(v) for v in values]
    manifests = [m for m, _row in results]
    rows = [row for _m, row in results]
    path = sweep_summary_path(doc, axis, out_root)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    cols = ("value", "run", "status", "r2_mean", "r2_variance",
            "rel_l2_mean", "rel_l2_variance")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_sweep_cell(row.get(c)) for c in cols) + "\n")
    say(f"[sweep] summary at {path}")
    return manifests, rows


def _sweep_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "%.17g" % value
    return str(value).replace(",", ";")


def sweep_summary_path(doc: dict, axis: str, out_root) -> str:
    return os.path.join(out_root, "sweeps",
                        f"{axis}-{cfg.short_hash(doc)}.csv")
