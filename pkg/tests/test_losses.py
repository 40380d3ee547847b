import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ninn import autodiff as ad
from ninn import fd, losses
from ninn.autodiff import DimensionError
from ninn.problems import make_problem

import gradcheck


def test_fd_solution_minimises_const_loss():
    p = make_problem("exptrig")
    g = p.grid(17)
    uh = fd.solve_elliptic(p, g)
    val = losses.loss_elliptic_const(uh, g.sample(p.source_f), g.sample(p.boundary_g), g)
    assert float(val.data) <= 1e-20


def test_zero_prediction_const_loss():
    g = fd.GridSpec.square(9)
    f = np.random.default_rng(0).standard_normal(g.shape)
    val = losses.loss_elliptic_const(np.zeros(g.shape), f, np.zeros(g.shape), g)
    alpha = g.h**2 / 4
    assert float(val.data) == pytest.approx(alpha * np.sum(f[1:-1, 1:-1] ** 2), rel=1e-13)


def test_mean_reduction_divides_each_term():
    g = fd.GridSpec.square(9)
    rng = np.random.default_rng(1)
    u, f, b = (rng.standard_normal(g.shape) for _ in range(3))
    terms = losses.elliptic_const_terms(u, f, b, g)
    a = 0.3
    mean = float(losses.loss_elliptic_const(u, f, b, g, a, "mean").data)
    expected = a * float(terms.interior.data) / 49 + (1 - a) * float(terms.boundary.data) / 32
    assert mean == pytest.approx(expected, rel=1e-13)


def test_nonconst_with_unit_kappa_equals_const():
    rng = np.random.default_rng(2)
    g = fd.GridSpec.square(12)
    u, f, b = (rng.standard_normal(g.shape) for _ in range(3))
    kd = fd.kappa_to_dual(np.ones(g.shape))
    a = float(losses.loss_elliptic_nonconst(u, kd, f, b, g).data)
    c = float(losses.loss_elliptic_const(u, f, b, g).data)
    assert a == pytest.approx(c, rel=1e-12)


def test_assembled_solution_minimises_nonconst_interior_term():
    p = make_problem("kellogg")
    g = p.grid(17)
    uh = fd.solve_elliptic(p, g)
    kd = fd.kappa_to_dual(g.sample(p.kappa))
    terms = losses.elliptic_nonconst_terms(uh, kd, g.sample(p.source_f), g.sample(p.boundary_g), g)
    scale = np.sum(fd.assemble_elliptic(g.sample(p.kappa), g).rhs(g.sample(p.source_f), g.sample(p.boundary_g)) ** 2)
    assert float(terms.interior.data) <= 1e-20 * max(scale, 1.0)
    assert float(terms.boundary.data) == 0.0


def test_backward_euler_step_minimises_parabolic_loss():
    p = make_problem("trig1")
    g = p.grid(17)
    u0, u1 = fd.solve_parabolic(p, g, 0.1, 1, record=True)
    val = losses.loss_parabolic(u1, u0, g.sample(p.source_f, 0.1), g.sample(p.boundary_g, 0.1), g, tau=0.1)
    assert float(val.data) <= 1e-20


def test_parabolic_interior_term_vanishes_on_steady_state():
    rng = np.random.default_rng(3)
    g = fd.GridSpec.square(10)
    u = rng.standard_normal(g.shape)
    f = np.zeros(g.shape)
    f[1:-1, 1:-1] = fd.apply_laplacian(u, g).data[0]
    terms = losses.parabolic_terms(u, u, f, u, g, tau=0.1)
    assert float(terms.interior.data) <= 1e-18 * np.sum(f**2)
    assert float(terms.boundary.data) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = fd.GridSpec.square(8)
    f, b, prev = (rng.standard_normal(g.shape) for _ in range(3))
    kd = fd.kappa_to_dual(rng.uniform(0.5, 5.0, g.shape))
    u = rng.standard_normal((1, 8, 8))
    for fn in (
        lambda x: losses.loss_elliptic_const(x, f, b, g, 0.3),
        lambda x: losses.loss_elliptic_nonconst(x, kd, f, b, g, 0.3),
        lambda x: losses.loss_parabolic(x, prev, f, b, g, 0.3, 0.1),
        lambda x: losses.loss_elliptic_const(x, f, b, g, 0.3, "mean"),
    ):
        assert gradcheck.check(fn, [u], rng) < 1e-5


def test_previous_step_is_not_differentiated():
    g = fd.GridSpec.square(8)
    tape = ad.Tape()
    u = tape.watch(np.ones((1, 8, 8)))
    prev = tape.watch(np.zeros((1, 8, 8)))
    val = losses.loss_parabolic(u, prev, np.zeros(g.shape), np.zeros(g.shape), g, tau=0.1)
    _, gprev = tape.gradient(val, [u, prev])
    assert not gprev.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), a1=st.floats(0.01, 0.99), a2=st.floats(0.01, 0.99))
def test_nonnegative_and_affine_in_alpha(seed, a1, a2):
    rng = np.random.default_rng(seed)
    g = fd.GridSpec.square(7)
    u, f, b = (rng.standard_normal(g.shape) for _ in range(3))
    terms = losses.elliptic_const_terms(u, f, b, g)
    i, bd = float(terms.interior.data), float(terms.boundary.data)
    assert i >= 0 and bd >= 0
    for a in (a1, a2):
        val = float(losses.loss_elliptic_const(u, f, b, g, a).data)
        assert val >= 0
        assert val == pytest.approx(a * i + (1 - a) * bd, rel=1e-12)


def test_zero_loss_minimiser_is_fd_solution():
    # residuals are affine in u, so least squares on the stacked system gives the minimiser
    p = make_problem("exptrig")
    g = p.grid(7)
    f, b = g.sample(p.source_f), g.sample(p.boundary_g)
    n2 = g.n * g.n
    base = float(losses.loss_elliptic_const(np.zeros(g.shape), f, b, g).data)
    zero = np.zeros(g.shape)
    def residuals(u):
        r_in = fd.residual_const(u, f, g).data.ravel()
        r_b = (u - b)[g.boundary_mask]
        return np.concatenate([r_in, r_b])
    r0 = residuals(zero)
    J = np.column_stack([residuals(e.reshape(g.shape)) - r0 for e in np.eye(n2)])
    u_star = np.linalg.lstsq(J, -r0, rcond=None)[0].reshape(g.shape)
    np.testing.assert_allclose(u_star, fd.solve_elliptic(p, g), atol=1e-10)
    assert base > 0


def test_shape_and_parameter_errors():
    g = fd.GridSpec.square(8)
    z = np.zeros(g.shape)
    with pytest.raises(DimensionError):
        losses.loss_elliptic_const(np.zeros((1, 7, 7)), z, z, g)
    with pytest.raises(DimensionError):
        losses.loss_elliptic_const(z, z, np.zeros((5, 5)), g)
    with pytest.raises(ValueError):
        losses.loss_elliptic_const(z, z, z, g, alpha=1.5)
    with pytest.raises(ValueError):
        losses.loss_parabolic(z, z, z, z, g, tau=0.0)
    with pytest.raises(ValueError):
        losses.loss_elliptic_const(z, z, z, g, reduction="max")


def test_loss_config():
    g = fd.GridSpec.square(9)
    assert losses.LossConfig().alpha_for(g) == pytest.approx(g.h**2 / 4)
    assert losses.LossConfig(alpha=0.2).alpha_for(g) == 0.2
    with pytest.raises(ValueError):
        losses.LossConfig(variant="parabolic")
    with pytest.raises(ValueError):
        losses.LossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        losses.LossConfig(variant="hyperbolic")
