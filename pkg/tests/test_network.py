"""Jet network: hand oracles, finite-difference checks, hard-BC exactness."""

import numpy as np
import pytest

from tgflow import network as net


def identity_spec(n_inputs=3, hidden=(8, 6)):
    return net.NetworkSpec(n_inputs=n_inputs, hidden=hidden)


def random_params(spec, seed):
    return net.init_parameters(spec, np.random.default_rng(seed))


# -- spec and parameters -------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        net.NetworkSpec(n_inputs=0, hidden=(4,))
    with pytest.raises(ValueError):
        net.NetworkSpec(n_inputs=3, hidden=(4, 0))
    with pytest.raises(ValueError):
        net.NetworkSpec(n_inputs=3, hidden=(4,), beta=0.0)
    with pytest.raises(ValueError):
        net.NetworkSpec(n_inputs=3, hidden=(4,), shift=(0.0, 0.0), scale=(1.0, 1.0))
    with pytest.raises(ValueError):
        net.NetworkSpec(n_inputs=2, hidden=(4,), shift=(0.0, 0.0), scale=(1.0, 0.0))


def test_parameter_layout_and_views():
    spec = identity_spec(4, (5, 3))
    p = net.Parameters(spec)
    assert p.n_params == (4 * 5 + 5) + (5 * 3 + 3) + (3 * 1 + 1)
    p.weight(0)[2, 1] = 7.0
    assert p.theta[2 * 5 + 1] == 7.0
    q = p.copy()
    q.theta[:] = 0.0
    assert p.theta[2 * 5 + 1] == 7.0
    with pytest.raises(ValueError):
        net.Parameters(spec, np.zeros(3))


def test_init_is_glorot_with_zero_biases():
    spec = identity_spec(6, (9, 4))
    a = net.init_parameters(spec, np.random.default_rng(123))
    b = net.init_parameters(spec, np.random.default_rng(123))
    assert np.array_equal(a.theta, b.theta)
    for i, (din, dout) in enumerate(spec.layer_dims):
        bound = np.sqrt(6.0 / (din + dout))
        assert np.max(np.abs(a.weight(i))) <= bound
        assert np.all(a.bias(i) == 0.0)
    assert np.std(a.weight(0)) > 0.0


# -- activation -----------------------------------------------------------------

def test_swish_matches_definition_and_zero():
    z = np.linspace(-4.0, 4.0, 41)
    assert np.allclose(net.swish(z, 1.3), z / (1.0 + np.exp(-1.3 * z)), atol=0.0)
    assert net.swish(0.0) == 0.0


def test_swish_derivative_ladder_matches_finite_differences():
    z = np.linspace(-6.0, 6.0, 241)
    beta = 1.0
    h = 1e-6
    v, s1, s2, s3 = net._swish_derivs(z, beta, 3)
    vp = net._swish_derivs(z + h, beta, 3)
    vm = net._swish_derivs(z - h, beta, 3)
    assert np.max(np.abs((vp[0] - vm[0]) / (2 * h) - s1)) <= 1e-8
    assert np.max(np.abs((vp[1] - vm[1]) / (2 * h) - s2)) <= 1e-8
    assert np.max(np.abs((vp[2] - vm[2]) / (2 * h) - s3)) <= 1e-8


# -- forward value -----------------------------------------------------------------

def test_zero_parameters_give_zero_everywhere():
    spec = identity_spec()
    p = net.Parameters(spec)
    u = np.array([0.3, -1.2, 0.8])
    assert net.forward(spec, p, u) == 0.0
    jet = net.forward_jet(spec, p, u)
    assert (jet.value, jet.dt, jet.dx, jet.dy, jet.dxx, jet.dyy) == (0.0,) * 6


def test_single_unit_hand_computation():
    spec = net.NetworkSpec(n_inputs=3, hidden=(1,))
    p = net.Parameters(spec)
    p.weight(0)[:, 0] = [0.4, -0.7, 1.1]
    p.bias(0)[0] = 0.2
    p.weight(1)[0, 0] = 2.0
    p.bias(1)[0] = -0.5
    t, x, y = 0.3, 0.9, -0.4
    a = 0.4 * t - 0.7 * x + 1.1 * y + 0.2
    by_hand = 2.0 * (a / (1.0 + np.exp(-a))) - 0.5
    assert net.forward(spec, p, [t, x, y]) == pytest.approx(by_hand, rel=1e-15)


def test_jet_value_identical_to_forward():
    spec = identity_spec(5, (7, 7))
    p = random_params(spec, 5)
    U = np.random.default_rng(1).normal(size=(11, 5))
    jets = net.forward_jet_batch(spec, p, U)
    assert np.array_equal(jets.value, net.forward(spec, p, U))


def test_forward_shape_errors():
    spec = identity_spec()
    p = net.Parameters(spec)
    with pytest.raises(ValueError):
        net.forward(spec, p, np.zeros(4))
    with pytest.raises(ValueError):
        net.forward_jet_batch(spec, p, np.zeros((2, 2)))


def test_linear_network_jet():
    # no hidden layers: an affine map with exactly the seeded sensitivities
    spec = net.NetworkSpec(n_inputs=4, hidden=(), shift=(1.0, 2.0, 3.0, 0.0),
                           scale=(0.5, 0.25, 2.0, 1.0))
    p = net.Parameters(spec)
    p.weight(0)[:, 0] = [1.0, -2.0, 0.5, 3.0]
    p.bias(0)[0] = 0.1
    jet = net.forward_jet(spec, p, [0.2, 0.4, 0.6, 0.8])
    assert jet.dt == pytest.approx(1.0 * 0.5, rel=1e-15)
    assert jet.dx == pytest.approx(-2.0 * 0.25, rel=1e-15)
    assert jet.dy == pytest.approx(0.5 * 2.0, rel=1e-15)
    assert jet.dxx == 0.0 and jet.dyy == 0.0


def test_permuting_hidden_units_preserves_output():
    spec = identity_spec(3, (6, 5))
    p = random_params(spec, 17)
    q = p.copy()
    perm = np.random.default_rng(0).permutation(6)
    q.weight(0)[:] = q.weight(0)[:, perm]
    q.bias(0)[:] = q.bias(0)[perm]
    q.weight(1)[:] = q.weight(1)[perm, :]
    U = np.random.default_rng(2).normal(size=(9, 3))
    assert np.allclose(net.forward(spec, q, U), net.forward(spec, p, U), rtol=1e-12)


# -- jet vs finite differences ---------------------------------------------------

def fd_first(spec, p, u, col, h=1e-4):
    up, dn = np.array(u, dtype=float), np.array(u, dtype=float)
    up[col] += h
    dn[col] -= h
    return (net.forward(spec, p, up) - net.forward(spec, p, dn)) / (2 * h)


def fd_second(spec, p, u, col, h=1e-4):
    # difference the first-derivative jet: a plain second difference of the
    # value cannot get below the 1e-8 floor in float64 at this step
    up, dn = np.array(u, dtype=float), np.array(u, dtype=float)
    up[col] += h
    dn[col] -= h
    field = "dx" if col == 1 else "dy"
    return (getattr(net.forward_jet(spec, p, up), field)
            - getattr(net.forward_jet(spec, p, dn), field)) / (2 * h)


def agree(got, ref):
    return abs(got - ref) <= max(1e-5 * abs(ref), 1e-8)


def test_jet_components_match_finite_differences():
    rng = np.random.default_rng(404)
    checked = 0
    for trial in range(10):
        widths = tuple(rng.integers(3, 10, size=rng.integers(1, 4)))
        spec = identity_spec(n_inputs=int(rng.integers(3, 6)), hidden=widths)
        p = random_params(spec, 1000 + trial)
        for _ in range(10):
            u = rng.normal(size=spec.n_inputs)
            jet = net.forward_jet(spec, p, u)
            assert agree(jet.dt, fd_first(spec, p, u, 0))
            assert agree(jet.dx, fd_first(spec, p, u, 1))
            assert agree(jet.dy, fd_first(spec, p, u, 2))
            assert agree(jet.dxx, fd_second(spec, p, u, 1))
            assert agree(jet.dyy, fd_second(spec, p, u, 2))
            checked += 1
    assert checked == 100


def test_jet_reports_physical_units_with_normalization():
    hidden = (7, 5)
    raw = net.NetworkSpec(n_inputs=4, hidden=hidden)
    shift = (5.0, 510.0, 510.0, 0.0)
    scale = (0.4, 2.0 / 1020.0, 2.0 / 1020.0, 1.0)
    phys = net.NetworkSpec(n_inputs=4, hidden=hidden, shift=shift, scale=scale)
    p = random_params(raw, 33)
    q = net.Parameters(phys, p.theta.copy())
    u = np.array([2.0, 300.0, 800.0, -0.3])
    u_hat = (u - np.array(shift)) * np.array(scale)
    a = net.forward_jet(phys, q, u)
    b = net.forward_jet(raw, p, u_hat)
    assert a.value == pytest.approx(b.value, rel=1e-14)
    assert a.dt == pytest.approx(b.dt * scale[0], rel=1e-13)
    assert a.dx == pytest.approx(b.dx * scale[1], rel=1e-13)
    assert a.dxx == pytest.approx(b.dxx * scale[1] ** 2, rel=1e-13)
    assert a.dyy == pytest.approx(b.dyy * scale[2] ** 2, rel=1e-13)


# -- parameter gradients -----------------------------------------------------------

def linear_residual_loss(coeffs, rng, B):
    """Mean square of a per-point linear combination of jet components."""
    w = {f: rng.normal(size=B) if on else None for f, on in coeffs.items()}

    def loss_fn(jets):
        r = np.zeros(B)
        for f, c in w.items():
            if c is not None:
                r += c * getattr(jets, f)
        val = np.mean(r * r)
        cot = net.JetCotangents()
        for f, c in w.items():
            if c is not None:
                setattr(cot, f, 2.0 * r * c / B)
        return val, cot

    return loss_fn


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(88)
    for trial in range(20):
        depth = int(rng.integers(1, 4))
        widths = tuple(int(rng.integers(4, 17)) for _ in range(depth))
        spec = identity_spec(n_inputs=int(rng.integers(3, 6)), hidden=widths)
        p = random_params(spec, 3000 + trial)
        B = 6
        U = rng.normal(size=(B, spec.n_inputs))
        coeffs = {"value": True, "dt": trial % 2 == 0, "dx": True, "dy": trial % 3 == 0,
                  "dxx": True, "dyy": True}
        loss_fn = linear_residual_loss(coeffs, rng, B)
        _, grad = net.loss_gradient(spec, p, U, loss_fn)

        h = 1e-5
        fd = np.empty_like(grad)
        for j in range(grad.size):
            tp, tm = p.theta.copy(), p.theta.copy()
            tp[j] += h
            tm[j] -= h
            lp, _ = loss_fn(net.forward_jet_batch(spec, net.Parameters(spec, tp), U))
            lm, _ = loss_fn(net.forward_jet_batch(spec, net.Parameters(spec, tm), U))
            fd[j] = (lp - lm) / (2 * h)
        tol = np.maximum(1e-4 * np.maximum(np.abs(grad), np.abs(fd)), 1e-8)
        assert np.all(np.abs(grad - fd) <= tol)


def test_loss_gradient_through_hard_bc():
    # residual-style loss on the constrained jet exercises the pullback
    rng = np.random.default_rng(54)
    spec = identity_spec(n_inputs=4, hidden=(8, 8))
    p = random_params(spec, 77)
    B = 8
    x0, Lx = 0.0, 1020.0
    U = np.column_stack([rng.uniform(0, 10, B), rng.uniform(0, Lx, B),
                         rng.uniform(0, Lx, B), rng.normal(size=B)])
    x = U[:, 1]
    c_t, c_x, c_xx = rng.normal(size=(3, B))

    def loss_fn(jets):
        # value term centered near the head scale keeps the loss O(1), so the
        # finite-difference probe is not drowned by roundoff on a huge offset
        con = net.apply_hard_bc(jets, x, 202.0, 200.0, x0, Lx)
        r = c_t * con.dt + c_x * con.dx + c_xx * (con.dxx + con.dyy) \
            + 0.3 * (con.value - 201.0)
        val = np.mean(r * r)
        g = 2.0 * r / B
        cot = net.JetCotangents(value=0.3 * g, dt=c_t * g, dx=c_x * g,
                                dxx=c_xx * g, dyy=c_xx * g)
        return val, net.hard_bc_pullback(cot, x, x0, Lx)

    _, grad = net.loss_gradient(spec, p, U, loss_fn)
    h = 1e-5
    fd = np.empty_like(grad)
    for j in range(grad.size):
        tp, tm = p.theta.copy(), p.theta.copy()
        tp[j] += h
        tm[j] -= h
        lp, _ = loss_fn(net.forward_jet_batch(spec, net.Parameters(spec, tp), U))
        lm, _ = loss_fn(net.forward_jet_batch(spec, net.Parameters(spec, tm), U))
        fd[j] = (lp - lm) / (2 * h)
    tol = np.maximum(1e-4 * np.maximum(np.abs(grad), np.abs(fd)), 1e-8)
    assert np.all(np.abs(grad - fd) <= tol)


def test_zero_network_data_loss_has_zero_gradient():
    spec = identity_spec()
    p = net.Parameters(spec)
    U = np.random.default_rng(0).normal(size=(5, 3))

    def loss_fn(jets):
        return np.mean(jets.value ** 2), net.JetCotangents(value=2 * jets.value / 5)

    val, grad = net.loss_gradient(spec, p, U, loss_fn, order=0)
    assert val == 0.0
    assert np.all(grad == 0.0)


def test_single_weight_quadratic_gradient():
    # one linear layer, one input: L = (w u + b)^2 gives dL/dw = 2 u (w u + b)
    spec = net.NetworkSpec(n_inputs=3, hidden=())
    p = net.Parameters(spec)
    p.weight(0)[:, 0] = [0.5, 0.0, 0.0]
    p.bias(0)[0] = 0.25
    U = np.array([[2.0, 0.0, 0.0]])

    def loss_fn(jets):
        return float(jets.value[0] ** 2), net.JetCotangents(value=2 * jets.value)

    _, grad = net.loss_gradient(spec, p, U, loss_fn, order=0)
    v = 0.5 * 2.0 + 0.25
    gw = net.Parameters(spec, grad)
    assert gw.weight(0)[0, 0] == pytest.approx(2 * v * 2.0, rel=1e-14)
    assert gw.bias(0)[0] == pytest.approx(2 * v, rel=1e-14)


def test_nonfinite_output_raises_with_batch_index():
    spec = identity_spec()
    p = net.Parameters(spec)
    p.theta[:] = 1.0
    U = np.zeros((4, 3))
    U[2, 0] = np.inf

    def loss_fn(jets):
        return float(np.mean(jets.value)), net.JetCotangents(value=np.ones(4) / 4)

    with np.errstate(invalid="ignore"):
        with pytest.raises(net.NetworkError) as err:
            net.loss_gradient(spec, p, U, loss_fn, order=0)
    assert err.value.batch_index == 2


# -- hard boundary imposition --------------------------------------------------------

def test_hard_bc_endpoints_exact_for_random_parameters():
    spec = identity_spec(n_inputs=4, hidden=(6,))
    x0, Lx = 0.0, 1020.0
    rng = np.random.default_rng(2024)
    U = np.array([[0.5, x0, 300.0, 0.1], [3.0, x0 + Lx, 700.0, -1.0]])
    for _ in range(1000):
        p = net.Parameters(spec, rng.normal(size=net.Parameters(spec).n_params))
        jets = net.forward_jet_batch(spec, p, U, order=0)
        con = net.apply_hard_bc(jets, U[:, 1], 202.0, 200.0, x0, Lx)
        assert con.value[0] == 202.0
        assert con.value[1] == 200.0


def test_hard_bc_zero_network_is_linear_interpolant():
    spec = identity_spec(n_inputs=4, hidden=(5,))
    p = net.Parameters(spec)
    x0, Lx = 10.0, 500.0
    x = np.array([10.0, 135.0, 260.0, 510.0])
    U = np.column_stack([np.ones(4), x, np.ones(4), np.ones(4)])
    con = net.apply_hard_bc(net.forward_jet_batch(spec, p, U), x, 202.0, 200.0, x0, Lx)
    s = (x - x0) / Lx
    assert np.allclose(con.value, 202.0 + (200.0 - 202.0) * s, atol=0.0)
    assert np.allclose(con.dx, -2.0 / Lx, atol=1e-18)
    assert np.allclose(con.dxx, 0.0, atol=0.0)
    assert np.allclose(con.dt, 0.0, atol=0.0)


def test_hard_bc_rejects_points_outside_span():
    spec = identity_spec()
    p = net.Parameters(spec)
    jets = net.forward_jet_batch(spec, p, np.zeros((1, 3)), order=0)
    with pytest.raises(ValueError):
        net.apply_hard_bc(jets, np.array([-1.0]), 202.0, 200.0, 0.0, 1020.0)


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    spec = net.NetworkSpec(n_inputs=5, hidden=(8, 4), beta=1.0,
                           shift=(0.0, 1.0, 2.0, 0.0, 0.0),
                           scale=(1.0, 0.5, 0.25, 1.0, 1.0))
    p = random_params(spec, 9)
    path = tmp_path / "model.ckpt"
    net.save_checkpoint(path, spec, p, metadata={"field_hash": "deadbeef"})
    spec2, p2, meta = net.load_checkpoint(path)
    assert spec2 == spec
    assert np.array_equal(p2.theta, p.theta)
    assert meta == {"field_hash": "deadbeef"}
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b'{"kind":"other"}\n')
        net.load_checkpoint(bad)
