"""Fully-connected swish network evaluated jointly with input derivatives.

The PDE residual needs h, dh/dt, dh/dx, dh/dy, d2h/dx2 and d2h/dy2 at every
collocation point, plus gradients of all of those with respect to the
weights.  Instead of nesting a general autodiff system, each layer forwards
a small jet: the batch of values, three first-derivative rows (t, x, y) and
two second-derivative rows (xx, yy), composed with closed-form swish
derivatives up to third order.  Parameter gradients come from recording the
jet computation on a tape and reversing it by hand.

Inputs are physical (t, x, y, xi...); an affine per-coordinate map
normalizes selected coordinates internally and the chain-rule factors are
folded into the derivative seeds, so every jet component is reported in
physical units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class NetworkError(RuntimeError):
    """Non-finite evaluation; carries the first offending batch index."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


# jet row layout: first-derivative rows follow input coordinates (t, x, y);
# second-derivative row k differentiates first-derivative row k+1 once more
_COORDS = (0, 1, 2)
_SECOND_OF = (1, 2)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus the input-normalization affine map.

    ``shift``/``scale`` act as u_hat = (u - shift) * scale per input column;
    identity entries (0, 1) leave a coordinate raw.  Random-field coordinates
    xi are already standard-normal and must keep identity entries.
    """

    n_inputs: int
    hidden: tuple[int, ...]
    beta: float = 1.0
    shift: tuple[float, ...] | None = None
    scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_inputs < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("all network widths must be >= 1")
        if not self.beta > 0.0:
            raise ValueError("swish beta must be strictly positive")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        shift = self.shift if self.shift is not None else (0.0,) * self.n_inputs
        scale = self.scale if self.scale is not None else (1.0,) * self.n_inputs
        if len(shift) != self.n_inputs or len(scale) != self.n_inputs:
            raise ValueError("shift/scale must have one entry per input")
        if any(s == 0.0 for s in scale):
            raise ValueError("scale entries must be nonzero")
        object.__setattr__(self, "shift", tuple(float(s) for s in shift))
        object.__setattr__(self, "scale", tuple(float(s) for s in scale))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = (self.n_inputs,) + self.hidden + (1,)
        return list(zip(widths[:-1], widths[1:]))

    def to_document(self) -> dict:
        return {"n_inputs": self.n_inputs, "hidden": list(self.hidden),
                "beta": self.beta, "shift": list(self.shift), "scale": list(self.scale)}

    @classmethod
    def from_document(cls, doc: dict) -> "NetworkSpec":
        return cls(n_inputs=doc["n_inputs"], hidden=tuple(doc["hidden"]),
                   beta=doc["beta"], shift=tuple(doc["shift"]), scale=tuple(doc["scale"]))


def normalization_to_unit_interval(lo: float, hi: float) -> tuple[float, float]:
    """(shift, scale) mapping [lo, hi] onto [-1, 1]."""
    if not hi > lo:
        raise ValueError("need hi > lo to normalize a coordinate")
    return 0.5 * (lo + hi), 2.0 / (hi - lo)


class Parameters:
    """All weights and biases as one flat float64 vector.

    Layer ``i`` exposes writable views ``weight(i)`` of shape
    (fan_in, fan_out) and ``bias(i)`` of shape (fan_out,), in declared order,
    so optimizers can treat ``theta`` as a single array while evaluation
    reads the structured views.
    """

    def __init__(self, spec: NetworkSpec, theta: np.ndarray | None = None):
        self.spec = spec
        sizes = [(din * dout, dout) for din, dout in spec.layer_dims]
        self.n_params = sum(w + b for w, b in sizes)
        if theta is None:
            theta = np.zeros(self.n_params)
        else:
            theta = np.ascontiguousarray(theta, dtype=float)
            if theta.shape != (self.n_params,):
                raise ValueError(f"theta must have shape ({self.n_params},), got {theta.shape}")
        self.theta = theta
        self._views = []
        off = 0
        for (din, dout), (wn, bn) in zip(spec.layer_dims, sizes):
            w = self.theta[off:off + wn].reshape(din, dout)
            off += wn
            b = self.theta[off:off + bn]
            off += bn
            self._views.append((w, b))

    @property
    def n_layers(self) -> int:
        return len(self._views)

    def weight(self, i: int) -> np.ndarray:
        return self._views[i][0]

    def bias(self, i: int) -> np.ndarray:
        return self._views[i][1]

    def copy(self) -> "Parameters":
        return Parameters(self.spec, self.theta.copy())


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> Parameters:
    """Glorot-uniform weights, zero biases."""
    params = Parameters(spec)
    for i, (din, dout) in enumerate(spec.layer_dims):
        bound = np.sqrt(6.0 / (din + dout))
        params.weight(i)[:] = rng.uniform(-bound, bound, size=(din, dout))
    return params


# -- swish and its derivatives -----------------------------------------------

def swish(z, beta=1.0):
    """z * logistic(beta z)."""
    return z * expit(beta * np.asarray(z, dtype=float))


def _swish_derivs(a, beta, order):
    """(sigma, sigma', sigma'', sigma''') at a; entries above order are None."""
    g = expit(beta * a)
    v = a * g
    if order == 0:
        return v, None, None, None
    p = g * (1.0 - g)
    s1 = g + beta * a * p
    if order == 1:
        return v, s1, None, None
    q = 1.0 - 2.0 * g
    s2 = 2.0 * beta * p + beta * beta * a * p * q
    if order == 2:
        return v, s1, s2, None
    s3 = 3.0 * beta * beta * p * q + beta ** 3 * a * p * (q * q - 2.0 * p)
    return v, s1, s2, s3


# -- jets ----------------------------------------------------------------------

@dataclass
class JetBatch:
    """Value and physical-unit derivative rows for a batch, each (B,)."""

    value: np.ndarray
    dt: np.ndarray | None = None
    dx: np.ndarray | None = None
    dy: np.ndarray | None = None
    dxx: np.ndarray | None = None
    dyy: np.ndarray | None = None


@dataclass
class JetCotangents:
    """Loss sensitivities with respect to JetBatch fields; None means zero."""

    value: np.ndarray | None = None
    dt: np.ndarray | None = None
    dx: np.ndarray | None = None
    dy: np.ndarray | None = None
    dxx: np.ndarray | None = None
    dyy: np.ndarray | None = None


@dataclass(frozen=True)
class Jet:
    """Single-point view of a JetBatch."""

    value: float
    dt: float
    dx: float
    dy: float
    dxx: float
    dyy: float


def _check_batch(spec: NetworkSpec, U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[1] != spec.n_inputs:
        raise ValueError(f"batch must have shape (B, {spec.n_inputs}), got {U.shape}")
    return U


def forward(spec: NetworkSpec, params: Parameters, u) -> float | np.ndarray:
    """Head value(s); accepts one input vector or a (B, n_inputs) batch."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    jets = forward_jet_batch(spec, params, np.atleast_2d(u), order=0)
    return float(jets.value[0]) if single else jets.value


def forward_jet(spec: NetworkSpec, params: Parameters, u) -> Jet:
    """Full jet at a single input point."""
    jets = forward_jet_batch(spec, params, np.atleast_2d(np.asarray(u, dtype=float)))
    return Jet(*(float(getattr(jets, f)[0])
                 for f in ("value", "dt", "dx", "dy", "dxx", "dyy")))


def forward_jet_batch(spec: NetworkSpec, params: Parameters, U, order: int = 2,
                      with_tape: bool = False):
    """Propagate value and derivative rows through every layer.

    Parameters
    ----------
    U : (B, n_inputs) physical inputs.
    order : 0 value only, 1 adds first derivatives, 2 adds xx/yy.
    with_tape : also return the recorded tape for ``backprop``.
    """
    if params.spec is not spec and params.spec != spec:
        raise ValueError("parameters were built for a different network spec")
    U = _check_batch(spec, U)
    B = U.shape[0]
    shift = np.asarray(spec.shift)
    scale = np.asarray(spec.scale)

    Z = (U - shift) * scale
    D = S = None
    if order >= 1:
        D = np.zeros((3, B, spec.n_inputs))
        for c, col in enumerate(_COORDS):
            D[c, :, col] = scale[col]
    if order >= 2:
        S = np.zeros((2, B, spec.n_inputs))

    n_hidden = len(spec.hidden)
    tape = {"order": order, "layers": [], "spec": spec, "params": params}
    for i in range(n_hidden):
        W, b = params.weight(i), params.bias(i)
        A = Z @ W + b
        DA = (D.reshape(3 * B, -1) @ W).reshape(3, B, -1) if order >= 1 else None
        SA = (S.reshape(2 * B, -1) @ W).reshape(2, B, -1) if order >= 2 else None
        if with_tape:
            tape["layers"].append((Z, D, S, A, DA, SA))
        v, s1, s2, _ = _swish_derivs(A, spec.beta, min(order, 2))
        Znew = v
        Dnew = s1 * DA if order >= 1 else None
        if order >= 2:
            Snew = np.empty_like(SA)
            for k, c in enumerate(_SECOND_OF):
                Snew[k] = s2 * DA[c] * DA[c] + s1 * SA[k]
        else:
            Snew = None
        Z, D, S = Znew, Dnew, Snew

    W, b = params.weight(n_hidden), params.bias(n_hidden)
    if with_tape:
        tape["layers"].append((Z, D, S, None, None, None))
    value = (Z @ W + b)[:, 0]
    jets = JetBatch(value=value)
    if order >= 1:
        DV = (D.reshape(3 * B, -1) @ W).reshape(3, B)
        jets.dt, jets.dx, jets.dy = DV[0], DV[1], DV[2]
    if order >= 2:
        SV = (S.reshape(2 * B, -1) @ W).reshape(2, B)
        jets.dxx, jets.dyy = SV[0], SV[1]
    return (jets, tape) if with_tape else jets


def backprop(tape: dict, cot: JetCotangents) -> np.ndarray:
    """Reverse the recorded jet computation for a scalar loss.

    ``cot`` holds dLoss/d(jet field) per batch point; the return value is
    dLoss/dtheta as a flat vector in Parameters layout.  Accumulation order
    is fixed, so results are bitwise reproducible.
    """
    spec: NetworkSpec = tape["spec"]
    params: Parameters = tape["params"]
    order = tape["order"]
    layers = tape["layers"]
    B = layers[0][0].shape[0]
    grad = np.zeros(params.n_params)
    gview = Parameters(spec, grad)

    def rows(values, n):
        out = np.zeros((n, B))
        for j, vals in enumerate(values):
            if vals is not None:
                out[j] = vals
        return out

    vbar = np.zeros(B) if cot.value is None else np.asarray(cot.value, dtype=float)
    dbar = rows((cot.dt, cot.dx, cot.dy), 3) if order >= 1 else None
    sbar = rows((cot.dxx, cot.dyy), 2) if order >= 2 else None

    # output layer (linear)
    n_hidden = len(spec.hidden)
    Z, D, S, _, _, _ = layers[-1]
    W = params.weight(n_hidden)
    gW, gb = gview.weight(n_hidden), gview.bias(n_hidden)
    gW += Z.T @ vbar[:, None]
    gb += vbar.sum()
    if order >= 1:
        gW += (D.reshape(3 * B, -1).T @ dbar.reshape(3 * B)[:, None])
    if order >= 2:
        gW += (S.reshape(2 * B, -1).T @ sbar.reshape(2 * B)[:, None])
    zbar = vbar[:, None] @ W.T
    dbar = (dbar.reshape(3 * B, 1) @ W.T).reshape(3, B, -1) if order >= 1 else None
    sbar = (sbar.reshape(2 * B, 1) @ W.T).reshape(2, B, -1) if order >= 2 else None

    for i in range(n_hidden - 1, -1, -1):
        Z, D, S, A, DA, SA = layers[i]
        W = params.weight(i)
        # adjoints of the derivative rows need swish one order deeper than
        # the forward pass used
        _, s1, s2, s3 = _swish_derivs(A, spec.beta, min(order + 1, 3))
        abar = zbar * s1
        if order >= 1:
            dabar = dbar * s1
            abar += np.einsum("cbw,cbw->bw", dbar, DA) * s2
        if order >= 2:
            for k, c in enumerate(_SECOND_OF):
                abar += sbar[k] * (DA[c] * DA[c] * s3 + SA[k] * s2)
                dabar[c] += 2.0 * sbar[k] * s2 * DA[c]
            sabar = sbar * s1
        gW, gb = gview.weight(i), gview.bias(i)
        gW += Z.T @ abar
        gb += abar.sum(axis=0)
        if order >= 1:
            gW += D.reshape(3 * B, -1).T @ dabar.reshape(3 * B, -1)
        if order >= 2:
            gW += S.reshape(2 * B, -1).T @ sabar.reshape(2 * B, -1)
        zbar = abar @ W.T
        if order >= 1:
            dbar = (dabar.reshape(3 * B, -1) @ W.T).reshape(3, B, -1)
        if order >= 2:
            sbar = (sabar.reshape(2 * B, -1) @ W.T).reshape(2, B, -1)
    return grad


def _first_bad_index(*arrays) -> int | None:
    for arr in arrays:
        if arr is None:
            continue
        bad = ~np.isfinite(arr)
        if bad.any():
            return int(np.flatnonzero(bad.reshape(bad.shape[0] if bad.ndim == 1 else -1))[0])
    return None


def loss_gradient(spec: NetworkSpec, params: Parameters, U, loss_fn,
                  order: int = 2) -> tuple[float, np.ndarray]:
    """Scalar loss and its exact parameter gradient over one batch.

    ``loss_fn`` maps the JetBatch at U to ``(loss value, JetCotangents)``;
    the cotangents close the reverse pass through the jet computation, so
    derivatives of the input-derivatives with respect to the weights are
    included.
    """
    jets, tape = forward_jet_batch(spec, params, U, order=order, with_tape=True)
    bad = _first_bad_index(jets.value, jets.dt, jets.dx, jets.dy, jets.dxx, jets.dyy)
    if bad is not None:
        raise NetworkError(f"non-finite network output at batch index {bad}", bad)
    loss, cot = loss_fn(jets)
    if not np.isfinite(loss):
        bad = _first_bad_index(cot.value, cot.dt, cot.dx, cot.dy, cot.dxx, cot.dyy)
        raise NetworkError(f"non-finite loss (first bad batch index: {bad})", bad)
    return float(loss), backprop(tape, cot)


# -- hard Dirichlet imposition --------------------------------------------------

def _bc_factors(x, x_origin, length_x):
    x = np.asarray(x, dtype=float)
    s = (x - x_origin) / length_x
    if np.any(s < -1e-12) or np.any(s > 1.0 + 1e-12):
        raise ValueError("x outside the Dirichlet-constrained span")
    P = s * (1.0 - s)
    Px = (1.0 - 2.0 * s) / length_x
    Pxx = -2.0 / (length_x * length_x)
    return s, P, Px, Pxx


def apply_hard_bc(jet: JetBatch, x, h_left: float, h_right: float,
                  x_origin: float, length_x: float) -> JetBatch:
    """Blend the raw network jet so the Dirichlet ends hold exactly.

    h_hat = h_left (1-s) + h_right s + s(1-s) N with s = (x-x_origin)/L_x;
    at s = 0 and s = 1 the network term vanishes structurally, for any
    parameters.  All derivative rows are transformed consistently.
    """
    s, P, Px, Pxx = _bc_factors(x, x_origin, length_x)
    drop = h_right - h_left
    out = JetBatch(value=h_left + drop * s + P * jet.value)
    if jet.dt is not None:
        out.dt = P * jet.dt
        out.dx = drop / length_x + Px * jet.value + P * jet.dx
        out.dy = P * jet.dy
    if jet.dxx is not None:
        out.dxx = Pxx * jet.value + 2.0 * Px * jet.dx + P * jet.dxx
        out.dyy = P * jet.dyy
    return out


def hard_bc_pullback(cot: JetCotangents, x, x_origin: float,
                     length_x: float) -> JetCotangents:
    """Adjoint of apply_hard_bc: constrained-jet cotangents -> raw-jet ones."""
    _, P, Px, Pxx = _bc_factors(x, x_origin, length_x)
    raw = JetCotangents()
    vb = 0.0
    if cot.value is not None:
        vb = vb + cot.value * P
    if cot.dx is not None:
        vb = vb + cot.dx * Px
        raw.dx = cot.dx * P
    if cot.dxx is not None:
        vb = vb + cot.dxx * Pxx
        raw.dx = (raw.dx if raw.dx is not None else 0.0) + 2.0 * Px * cot.dxx
        raw.dxx = cot.dxx * P
    raw.value = vb if not np.isscalar(vb) else None
    if cot.dt is not None:
        raw.dt = cot.dt * P
    if cot.dy is not None:
        raw.dy = cot.dy * P
    if cot.dyy is not None:
        raw.dyy = cot.dyy * P
    return raw


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, spec: NetworkSpec, params: Parameters,
                    metadata: dict | None = None):
    """One JSON header line, then the flat parameter vector as raw f8."""
    header = {"kind": "network-checkpoint", "spec": spec.to_document(),
              "metadata": metadata or {}}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(params.theta, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, Parameters, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("kind") != "network-checkpoint":
            raise ValueError("not a network checkpoint")
        raw = fh.read()
    spec = NetworkSpec.from_document(header["spec"])
    theta = np.frombuffer(raw, dtype="<f8").astype(float)
    return spec, Parameters(spec, theta), header["metadata"]
