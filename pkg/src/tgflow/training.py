"""Physics-constrained training of the head surrogate.

The loss couples a labeled-data misfit with PDE, boundary and initial
residuals evaluated at fixed collocation points.  Log-conductivity and its
gradient are precomputed at those points once, so an epoch touches the
spectral field model not at all.  The PDE and Neumann residuals are
nondimensionalized before squaring: in the raw units of the base problem the
transient residual is ~1e-5, which at unit loss weight would vanish next to
head-scale misfits, so residuals are expressed against the characteristic
conductivity, head drop and domain length (see ResidualScales).

Minibatching: each epoch makes exactly one shuffled pass over every active
set.  The step count is the largest per-set batch count; sets with fewer
batches are split into that many nearly-equal slices instead, so sets of
very different sizes stay synchronized within an epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import darcy, network, random_field


class ConfigurationError(ValueError):
    """Inconsistent training setup (empty active set, bad mode, ...)."""


class TrainingError(RuntimeError):
    """Training aborted; message carries epoch/step/term diagnostics."""


EVAL_SUBSAMPLE_CAP = 100_000

# collocation column layout: t, x, y, xi_1..xi_n [, B1, B2, s2]
T_COL, X_COL, Y_COL, XI_COL = 0, 1, 2, 3
COMPOSITE_EXTRAS = 3


@dataclass(frozen=True)
class LossWeights:
    data: float = 1.0
    pde: float = 1.0
    dirichlet: float = 1.0
    neumann: float = 1.0
    initial: float = 1.0

    def __post_init__(self):
        vals = (self.data, self.pde, self.dirichlet, self.neumann, self.initial)
        if any(v < 0.0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if all(v == 0.0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    learning_rate: float = 1e-3
    batch_labeled: int = 4096
    batch_collocation: int = 4096
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    bc_mode: str = "hard"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate >= 0.0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_labeled < 1 or self.batch_collocation < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.bc_mode not in ("hard", "soft"):
            raise ValueError("bc_mode must be 'hard' or 'soft'")


@dataclass(frozen=True)
class CompositeInputSpec:
    """Distributions of the extra inputs: boundary heads and field variance."""

    head_left_mean: float = 202.0
    head_left_var: float = 0.25
    head_right_mean: float = 200.0
    head_right_var: float = 0.25
    variance_low: float = 1.0
    variance_high: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.variance_low < self.variance_high:
            raise ValueError("need 0 < variance_low < variance_high")
        if self.head_left_var < 0.0 or self.head_right_var < 0.0:
            raise ValueError("head variances must be >= 0")


@dataclass(frozen=True)
class SamplingRanges:
    """Coordinate ranges and mode count for collocation sampling."""

    t_end: float
    length_x: float
    length_y: float
    n_modes: int
    origin_x: float = 0.0
    origin_y: float = 0.0
    t_start: float = 0.0

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError("need t_end > t_start")
        if not (self.length_x > 0.0 and self.length_y > 0.0):
            raise ValueError("domain lengths must be positive")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")


@dataclass
class CollocationSet:
    """Fixed point sets for the residual terms (sampled once, never refreshed)."""

    interior: np.ndarray
    neumann: np.ndarray
    neumann_normal: np.ndarray
    dirichlet: np.ndarray
    dirichlet_head: np.ndarray
    initial: np.ndarray
    n_modes: int
    composite: bool = False

    @property
    def width(self) -> int:
        return 3 + self.n_modes + (COMPOSITE_EXTRAS if self.composite else 0)


@dataclass
class LabeledSet:
    """Simulation-derived tuples; each input row carries its realization's xi."""

    inputs: np.ndarray
    targets: np.ndarray
    xi: np.ndarray

    def __len__(self):
        return self.targets.size


@dataclass(frozen=True)
class PhysicsSpec:
    """Constants the residual terms need, plus derived scales."""

    specific_storage: float
    h_left: float
    h_right: float
    h_initial: float
    x_origin: float
    length_x: float
    flux_lateral: float = 0.0
    k_ref: float = 1.0

    @classmethod
    def from_boundary(cls, boundary: darcy.BoundarySpec, ranges: SamplingRanges,
                      mean_log_k: float = 0.0) -> "PhysicsSpec":
        return cls(specific_storage=boundary.specific_storage,
                   h_left=boundary.head_left, h_right=boundary.head_right,
                   h_initial=boundary.head_initial, x_origin=ranges.origin_x,
                   length_x=ranges.length_x, flux_lateral=boundary.flux_lateral,
                   k_ref=math.exp(mean_log_k))


@dataclass(frozen=True)
class ResidualScales:
    """Dimensionless normalization for the PDE and Neumann residuals."""

    pde: float
    neumann: float

    @classmethod
    def from_physics(cls, physics: PhysicsSpec) -> "ResidualScales":
        drop = abs(physics.h_left - physics.h_right)
        if drop == 0.0:
            drop = 1.0
        q_ref = physics.k_ref * drop / physics.length_x
        tau = physics.length_x ** 2 / (physics.k_ref * drop)
        return cls(pde=tau, neumann=1.0 / q_ref)


@dataclass
class PreparedCollocation:
    """Collocation set with the field data and constants residuals consume."""

    points: CollocationSet
    physics: PhysicsSpec
    scales: ResidualScales
    z: np.ndarray
    zx: np.ndarray
    zy: np.ndarray
    z_neumann: np.ndarray


def sample_collocation(ranges: SamplingRanges, n_interior: int, n_dirichlet: int,
                       n_neumann: int, n_initial: int, rng: np.random.Generator,
                       composite: CompositeInputSpec | None = None) -> CollocationSet:
    """Draw the four fixed point sets.

    Interior t is uniform on (t_start, t_end]; x, y uniform over the domain;
    each xi coordinate standard normal.  Neumann points sit exactly on the
    lateral walls with outward normal sign in y; Dirichlet points on the
    constant-head walls carry their prescribed head (per-point in composite
    mode).  Initial points have t = t_start exactly.
    """
    if min(n_interior, n_dirichlet, n_neumann, n_initial) < 0:
        raise ValueError("point counts must be >= 0")
    n = ranges.n_modes
    width = 3 + n + (COMPOSITE_EXTRAS if composite is not None else 0)

    def draw(count):
        u = np.empty((count, width))
        span = ranges.t_end - ranges.t_start
        u[:, T_COL] = ranges.t_end - span * rng.random(count)
        u[:, X_COL] = rng.uniform(ranges.origin_x, ranges.origin_x + ranges.length_x, count)
        u[:, Y_COL] = rng.uniform(ranges.origin_y, ranges.origin_y + ranges.length_y, count)
        u[:, XI_COL:XI_COL + n] = rng.standard_normal((count, n))
        if composite is not None:
            u[:, XI_COL + n] = composite.head_left_mean \
                + math.sqrt(composite.head_left_var) * rng.standard_normal(count)
            u[:, XI_COL + n + 1] = composite.head_right_mean \
                + math.sqrt(composite.head_right_var) * rng.standard_normal(count)
            u[:, XI_COL + n + 2] = rng.uniform(composite.variance_low,
                                               composite.variance_high, count)
        return u

    interior = draw(n_interior)

    neumann = draw(n_neumann)
    normal = np.where(rng.random(n_neumann) < 0.5, -1.0, 1.0)
    neumann[:, Y_COL] = np.where(normal < 0, ranges.origin_y,
                                 ranges.origin_y + ranges.length_y)

    dirichlet = draw(n_dirichlet)
    on_left = rng.random(n_dirichlet) < 0.5
    dirichlet[:, X_COL] = np.where(on_left, ranges.origin_x,
                                   ranges.origin_x + ranges.length_x)
    if composite is not None:
        head = np.where(on_left, dirichlet[:, XI_COL + n], dirichlet[:, XI_COL + n + 1])
    else:
        head = np.empty(n_dirichlet)  # filled by the physics constants later
        head[:] = np.nan
    initial = draw(n_initial)
    initial[:, T_COL] = ranges.t_start

    return CollocationSet(interior=interior, neumann=neumann, neumann_normal=normal,
                          dirichlet=dirichlet, dirichlet_head=head,
                          initial=initial, n_modes=n,
                          composite=composite is not None)


def prepare_collocation(points: CollocationSet, model: random_field.KLEModel,
                        physics: PhysicsSpec) -> PreparedCollocation:
    """Evaluate log-conductivity data at the fixed points, once.

    In composite mode every point carries its own field variance; the
    spectral model must then be built at unit variance so the per-point
    factor sqrt(s2) scales the fluctuation exactly.
    """
    if points.composite and model.spec.variance != 1.0:
        raise ConfigurationError(
            "composite collocation requires a unit-variance field model; "
            "the per-point variance input provides the scaling")
    if points.n_modes != model.n_modes:
        raise ConfigurationError(
            f"collocation carries {points.n_modes} xi coordinates but the "
            f"field model retains {model.n_modes} modes")
    n = points.n_modes

    def field_rows(u):
        if u.shape[0] == 0:
            return np.empty(0), np.empty(0), np.empty(0)
        x, y = u[:, X_COL], u[:, Y_COL]
        xi = u[:, XI_COL:XI_COL + n]
        phi = model.basis_matrix(x, y)
        gx, gy = model.basis_gradients(x, y)
        amp = np.sqrt(u[:, XI_COL + n + 2]) if points.composite else 1.0
        z = model.mean_log_k + amp * np.einsum("pn,pn->p", phi, xi)
        zx = amp * np.einsum("pn,pn->p", gx, xi)
        zy = amp * np.einsum("pn,pn->p", gy, xi)
        return z, zx, zy

    z, zx, zy = field_rows(points.interior)
    zn, _, _ = field_rows(points.neumann)
    head = points.dirichlet_head
    if not points.composite and head.size:
        on_left = points.dirichlet[:, X_COL] == physics.x_origin
        head = np.where(on_left, physics.h_left, physics.h_right)
    pts = replace_dirichlet_heads(points, head)
    return PreparedCollocation(points=pts, physics=physics,
                               scales=ResidualScales.from_physics(physics),
                               z=z, zx=zx, zy=zy, z_neumann=zn)


def pin_composite_inputs(points: CollocationSet, variance: float,
                         head_left: float | None = None,
                         head_right: float | None = None,
                         x_left: float | None = None) -> CollocationSet:
    """Freeze composite inputs at one target scenario.

    The field variance is always pinned; boundary heads are pinned too only
    when given (both plus ``x_left``, the wall carrying ``head_left``),
    otherwise every point keeps its sampled draw.  Dirichlet and initial
    targets follow the pinned values.  Returns a new set.
    """
    if not points.composite:
        raise ConfigurationError("collocation set carries no composite inputs")
    pin_heads = head_left is not None
    if pin_heads and (head_right is None or x_left is None):
        raise ValueError("pinning heads needs head_left, head_right and x_left")
    n = points.n_modes

    def pin(u):
        u = u.copy()
        if pin_heads:
            u[:, XI_COL + n] = head_left
            u[:, XI_COL + n + 1] = head_right
        u[:, XI_COL + n + 2] = variance
        return u

    dirichlet = pin(points.dirichlet)
    if pin_heads:
        head = np.where(dirichlet[:, X_COL] == x_left, head_left, head_right)
    else:
        head = points.dirichlet_head.copy()
    return CollocationSet(interior=pin(points.interior), neumann=pin(points.neumann),
                          neumann_normal=points.neumann_normal.copy(),
                          dirichlet=dirichlet, dirichlet_head=head,
                          initial=pin(points.initial), n_modes=n, composite=True)


def replace_dirichlet_heads(points: CollocationSet, head: np.ndarray) -> CollocationSet:
    return CollocationSet(interior=points.interior, neumann=points.neumann,
                          neumann_normal=points.neumann_normal,
                          dirichlet=points.dirichlet, dirichlet_head=head,
                          initial=points.initial, n_modes=points.n_modes,
                          composite=points.composite)


def pde_residual(jet: network.JetBatch, z, zx, zy, specific_storage: float):
    """Transient flow residual in raw physical units.

    f = S_s dh/dt - exp(Z) (d2h/dx2 + d2h/dy2 + dZ/dx dh/dx + dZ/dy dh/dy),
    the expanded divergence form of the governing equation with K = exp(Z).
    """
    k = np.exp(z)
    return specific_storage * jet.dt \
        - k * (jet.dxx + jet.dyy + zx * jet.dx + zy * jet.dy)


def build_training_set(realizations: int, per_realization: int,
                       model: random_field.KLEModel, grid: darcy.GridSpec,
                       time: darcy.TimeSpec, boundary: darcy.BoundarySpec,
                       rng: np.random.Generator,
                       composite: CompositeInputSpec | None = None) -> LabeledSet:
    """Simulate R field realizations and extract labeled head samples.

    Each labeled row is (t, x, y, xi_1..xi_n) -> h with the realization's
    own xi vector, so the data term needs no field reconstruction.  With a
    composite spec, every realization additionally draws its boundary heads
    and field variance (the start state follows the downstream head), the
    field model must be unit-variance, and rows carry the three extras.
    """
    n = model.n_modes
    if realizations < 0:
        raise ValueError("realizations must be >= 0")
    if composite is not None and model.spec.variance != 1.0:
        raise ConfigurationError(
            "composite labeled data requires a unit-variance field model")
    extra = COMPOSITE_EXTRAS if composite is not None else 0
    inputs = np.empty((realizations * per_realization, 3 + n + extra))
    targets = np.empty(realizations * per_realization)
    xis = np.empty((realizations, n))
    for r in range(realizations):
        xi = random_field.sample_xi(n, rng)
        xis[r] = xi
        bnd = boundary
        if composite is not None:
            b1 = composite.head_left_mean \
                + math.sqrt(composite.head_left_var) * rng.standard_normal()
            b2 = composite.head_right_mean \
                + math.sqrt(composite.head_right_var) * rng.standard_normal()
            s2 = rng.uniform(composite.variance_low, composite.variance_high)
            bnd = darcy.BoundarySpec(head_left=b1, head_right=b2, head_initial=b2,
                                     specific_storage=boundary.specific_storage,
                                     flux_lateral=boundary.flux_lateral)
            K = random_field.field_on_grid(model, math.sqrt(s2) * xi, grid)
        else:
            K = random_field.field_on_grid(model, xi, grid)
        result = darcy.simulate(K, grid, time, bnd)
        rows = darcy.extract_labeled(result, per_realization, rng)
        sl = slice(r * per_realization, (r + 1) * per_realization)
        inputs[sl, :3] = rows[:, :3]
        inputs[sl, 3:3 + n] = xi
        if composite is not None:
            inputs[sl, 3 + n:] = (b1, b2, s2)
        targets[sl] = rows[:, 3]
    return LabeledSet(inputs=inputs, targets=targets, xi=xis)


# -- loss terms -------------------------------------------------------------

class _Term:
    """One quadratic loss term: r = sum_f coeff_f * jet_f + bias, L = mean r^2."""

    def __init__(self, name, U, order, weight, hard_bc):
        self.name = name
        self.U = U
        self.order = order
        self.weight = weight
        self.hard_bc = hard_bc

    def count(self):
        return self.U.shape[0]

    def residual(self, jets, idx):  # -> (r, {field: coeff}, )
        raise NotImplementedError

    def loss_fn(self, physics, idx):
        def fn(jets):
            if self.hard_bc:
                x = self.U[idx, X_COL]
                jets = network.apply_hard_bc(jets, x, physics.h_left, physics.h_right,
                                             physics.x_origin, physics.length_x)
            r, coeffs = self.residual(jets, idx)
            B = r.size
            mse = float(r @ r) / B
            cot = network.JetCotangents()
            for fname, c in coeffs.items():
                setattr(cot, fname, (2.0 / B) * r * c)
            if self.hard_bc:
                cot = network.hard_bc_pullback(cot, self.U[idx, X_COL],
                                               physics.x_origin, physics.length_x)
            return mse, cot
        return fn


class _DataTerm(_Term):
    def __init__(self, labeled, weight, hard_bc):
        super().__init__("data", labeled.inputs, 0, weight, hard_bc)
        self.targets = labeled.targets

    def residual(self, jets, idx):
        return jets.value - self.targets[idx], {"value": 1.0}


class _PdeTerm(_Term):
    def __init__(self, prep, weight, hard_bc):
        super().__init__("pde", prep.points.interior, 2, weight, hard_bc)
        self.prep = prep

    def residual(self, jets, idx):
        p = self.prep
        tau = p.scales.pde
        s_s = p.physics.specific_storage
        z, zx, zy = p.z[idx], p.zx[idx], p.zy[idx]
        k = np.exp(z)
        r = tau * pde_residual(jets, z, zx, zy, s_s)
        return r, {"dt": tau * s_s, "dx": -tau * k * zx, "dy": -tau * k * zy,
                   "dxx": -tau * k, "dyy": -tau * k}


class _DirichletTerm(_Term):
    def __init__(self, prep, weight):
        super().__init__("dirichlet", prep.points.dirichlet, 0, weight, False)
        self.heads = prep.points.dirichlet_head

    def residual(self, jets, idx):
        return jets.value - self.heads[idx], {"value": 1.0}


class _NeumannTerm(_Term):
    def __init__(self, prep, weight, hard_bc):
        super().__init__("neumann", prep.points.neumann, 1, weight, hard_bc)
        self.prep = prep

    def residual(self, jets, idx):
        p = self.prep
        k = np.exp(p.z_neumann[idx])
        ny = p.points.neumann_normal[idx]
        scale = p.scales.neumann
        coeff = scale * k * ny
        r = coeff * jets.dy - scale * p.physics.flux_lateral
        return r, {"dy": coeff}


class _InitialTerm(_Term):
    def __init__(self, prep, weight, hard_bc):
        super().__init__("initial", prep.points.initial, 0, weight, hard_bc)
        pts = prep.points
        if pts.composite:
            # the start state tracks each point's sampled downstream head
            self.targets = pts.initial[:, XI_COL + pts.n_modes + 1]
        else:
            self.targets = np.full(pts.initial.shape[0], prep.physics.h_initial)

    def residual(self, jets, idx):
        return jets.value - self.targets[idx], {"value": 1.0}


def _active_terms(labeled, prep: PreparedCollocation, weights: LossWeights,
                  config_bc: str) -> list[_Term]:
    hard = config_bc == "hard"
    if hard and prep.points.composite:
        raise ConfigurationError("hard Dirichlet mode cannot host per-sample "
                                 "boundary values; use bc_mode='soft'")
    terms = []
    if weights.data > 0.0:
        if labeled is None or len(labeled) == 0:
            raise ConfigurationError("data weight is positive but no labeled set given")
        terms.append(_DataTerm(labeled, weights.data, hard))
    if weights.pde > 0.0:
        if prep.points.interior.shape[0] == 0:
            raise ConfigurationError("pde weight is positive but the interior set is empty")
        terms.append(_PdeTerm(prep, weights.pde, hard))
    if weights.dirichlet > 0.0 and not hard:
        if prep.points.dirichlet.shape[0] == 0:
            raise ConfigurationError("dirichlet weight is positive but the set is empty")
        terms.append(_DirichletTerm(prep, weights.dirichlet))
    if weights.neumann > 0.0:
        if prep.points.neumann.shape[0] == 0:
            raise ConfigurationError("neumann weight is positive but the set is empty")
        terms.append(_NeumannTerm(prep, weights.neumann, hard))
    if weights.initial > 0.0:
        if prep.points.initial.shape[0] == 0:
            raise ConfigurationError("initial weight is positive but the set is empty")
        terms.append(_InitialTerm(prep, weights.initial, hard))
    if not terms:
        raise ConfigurationError("no active loss terms")
    return terms


def mse_components(netspec: network.NetworkSpec, params: network.Parameters,
                   labeled, prep: PreparedCollocation, weights: LossWeights,
                   bc_mode: str = "hard",
                   subsample: dict[str, np.ndarray] | None = None) -> dict[str, float]:
    """Mean squared residual of every active term (inactive terms report 0).

    ``subsample`` optionally maps term names to fixed index arrays, the
    mechanism behind capped per-epoch history evaluation.
    """
    out = {"data": 0.0, "pde": 0.0, "dirichlet": 0.0, "neumann": 0.0, "initial": 0.0}
    for term in _active_terms(labeled, prep, weights, bc_mode):
        idx = None if subsample is None else subsample.get(term.name)
        if idx is None:
            idx = np.arange(term.count())
        jets = network.forward_jet_batch(netspec, params, term.U[idx], order=term.order)
        mse, _ = term.loss_fn(prep.physics, idx)(jets)
        out[term.name] = mse
    return out


def total_loss(components: dict[str, float], weights: LossWeights) -> float:
    """Weighted sum of the five terms."""
    return weights.data * components["data"] + weights.pde * components["pde"] \
        + weights.dirichlet * components["dirichlet"] \
        + weights.neumann * components["neumann"] \
        + weights.initial * components["initial"]


class Adam:
    """Standard first/second-moment adaptive update on a flat vector."""

    def __init__(self, n: int, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def update(self, theta: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _epoch_steps(terms, config) -> int:
    steps = 1
    for term in terms:
        batch = config.batch_labeled if term.name == "data" else config.batch_collocation
        steps = max(steps, math.ceil(term.count() / batch))
    return steps


def train(netspec: network.NetworkSpec, params0: network.Parameters, labeled,
          prep: PreparedCollocation, weights: LossWeights,
          config: TrainingConfig) -> tuple[network.Parameters, list[dict]]:
    """Run the physics-constrained optimization.

    Returns fresh trained Parameters (params0 is untouched) and the
    per-epoch loss history: a list of dicts with keys epoch, total, data,
    pde, dirichlet, neumann, initial, each component evaluated on a fixed
    subsample of at most 100k points per set.

    Raises TrainingError with epoch/step/term context if any loss turns
    non-finite.
    """
    terms = _active_terms(labeled, prep, weights, config.bc_mode)
    rng = np.random.default_rng(config.seed)
    eval_idx = {}
    for term in terms:
        n = term.count()
        if n > EVAL_SUBSAMPLE_CAP:
            eval_idx[term.name] = np.sort(rng.choice(n, EVAL_SUBSAMPLE_CAP, replace=False))
        else:
            eval_idx[term.name] = np.arange(n)

    params = params0.copy()
    adam = Adam(params.n_params, config.learning_rate, config.beta1, config.beta2,
                config.eps)
    steps = _epoch_steps(terms, config)
    history = []
    for epoch in range(1, config.epochs + 1):
        slices = {t.name: np.array_split(rng.permutation(t.count()), steps)
                  for t in terms}
        for step in range(steps):
            grad = np.zeros(params.n_params)
            for term in terms:
                idx = slices[term.name][step]
                if idx.size == 0:
                    continue
                try:
                    _, g = network.loss_gradient(
                        netspec, params, term.U[idx],
                        term.loss_fn(prep.physics, idx), order=term.order)
                except network.NetworkError as err:
                    raise TrainingError(
                        f"non-finite loss in term '{term.name}' at epoch {epoch} "
                        f"step {step + 1} (batch index {err.batch_index})") from err
                grad += term.weight * g
            adam.update(params.theta, grad)
        comps = mse_components(netspec, params, labeled, prep, weights,
                               config.bc_mode, subsample=eval_idx)
        row = {"epoch": epoch, "total": total_loss(comps, weights), **comps}
        if not np.isfinite(row["total"]):
            raise TrainingError(f"non-finite evaluation loss after epoch {epoch}")
        history.append(row)
    return params, history


def transfer_finetune(netspec: network.NetworkSpec, pretrained: network.Parameters,
                      prep: PreparedCollocation, weights: LossWeights,
                      config: TrainingConfig) -> tuple[network.Parameters, list[dict]]:
    """Short label-free re-training from a pretrained state.

    The data term is forcibly inactive; optimizer state starts fresh; the
    pretrained parameters are copied, never mutated.  Zero epochs returns
    parameters identical to the input.
    """
    weights = replace(weights, data=0.0)
    return train(netspec, pretrained, None, prep, weights, config)


def save_loss_history(path, history: list[dict]):
    """CSV `epoch,total,data,pde,dirichlet,neumann,initial`."""
    cols = ("epoch", "total", "data", "pde", "dirichlet", "neumann", "initial")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                     % tuple(row[c] for c in cols))


def load_loss_history(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def save_labeled_set(path, labeled: LabeledSet):
    """CSV with one row per labeled point.

    Header names the columns, so the loader can recover the mode count and
    whether boundary/variance columns are present.  The per-realization xi
    matrix is not stored here; persist it separately with
    random_field.save_xi_ensemble if provenance matters.
    """
    if labeled.xi.ndim != 2 or not labeled.xi.shape[1]:
        raise ValueError("labeled set lacks its xi matrix; cannot name columns")
    n_xi = labeled.xi.shape[1]
    names = ["t", "x", "y"] + [f"xi_{i + 1}" for i in range(n_xi)]
    if labeled.inputs.shape[1] == XI_COL + n_xi + COMPOSITE_EXTRAS:
        names += ["head_left", "head_right", "variance"]
    elif labeled.inputs.shape[1] != XI_COL + n_xi:
        raise ValueError("input width does not match the xi mode count")
    table = np.column_stack([labeled.inputs, labeled.targets])
    np.savetxt(path, table, delimiter=",", header=",".join(names) + ",h",
               comments="", fmt="%.17g")


def load_labeled_set(path) -> LabeledSet:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_xi = sum(1 for c in names if c.startswith("xi_"))
    return LabeledSet(inputs=table[:, :-1], targets=table[:, -1],
                      xi=np.empty((0, n_xi)))
