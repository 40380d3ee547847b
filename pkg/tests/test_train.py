import csv

import numpy as np
import pytest

from ninn import autodiff as ad
from ninn import fd, losses, train
from ninn.problems import ConfigurationError, ProblemSpec, make_problem
from ninn.train import AdamState, TrainConfig, TrainingError
from ninn.unet import NetworkSpec, build, forward


def _cfg(**kw):
    kw.setdefault("l2_penalty", 0.0)
    return TrainConfig(**kw)


# -- clipping ------------------------------------------------------------------

def test_clip_scales_large_gradient_to_threshold():
    g = [np.array([1.0])]
    out = train.clip_and_regularize(g, [np.zeros(1)], _cfg())
    assert out[0][0] == pytest.approx(1e-2, rel=1e-12)


def test_clip_uses_global_norm():
    g = [np.array([3.0]), np.array([[4.0]])]
    out = train.clip_and_regularize(g, [np.zeros(1), np.zeros((1, 1))], _cfg())
    assert out[0][0] == pytest.approx(6e-3) and out[1][0, 0] == pytest.approx(8e-3)


def test_small_and_zero_gradients_unchanged():
    g = [np.array([3e-3, 4e-3])]
    out = train.clip_and_regularize(g, [np.zeros(2)], _cfg())
    np.testing.assert_array_equal(out[0], g[0])
    z = train.clip_and_regularize([np.zeros(3)], [np.zeros(3)], _cfg())
    assert not z[0].any()


def test_l2_penalty_added_before_clipping():
    p = [np.array([1.0, -2.0])]
    out = train.clip_and_regularize([np.zeros(2)], p, TrainConfig(l2_penalty=1e-3))
    np.testing.assert_allclose(out[0], [2e-3, -4e-3])


def test_clip_shape_errors():
    with pytest.raises(ValueError):
        train.clip_and_regularize([np.zeros(2)], [np.zeros(3)], _cfg())
    with pytest.raises(ValueError):
        train.clip_and_regularize([np.zeros(2)], [], _cfg())


# -- Adam ----------------------------------------------------------------------

def _reference_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-7):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_matches_reference_loop():
    cfg = _cfg(lr=0.1)
    w = [np.array([1.0])]
    state = AdamState.zeros_like(w)
    for _ in range(3):
        train.adam_step(w, [np.array([1.0])], state, cfg)
    assert w[0][0] == pytest.approx(_reference_adam(1.0, [1.0] * 3, 0.1), abs=1e-12)
    assert state.t == 3


def test_adam_varying_gradients():
    cfg = _cfg(lr=0.05)
    rng = np.random.default_rng(0)
    gs = rng.standard_normal(10)
    w = [np.array([0.5])]
    state = AdamState.zeros_like(w)
    for g in gs:
        train.adam_step(w, [np.array([g])], state, cfg)
    assert w[0][0] == pytest.approx(_reference_adam(0.5, gs, 0.05), abs=1e-12)


def test_first_adam_step_has_magnitude_lr():
    cfg = _cfg(lr=1e-3)
    w = [np.array([0.0, 0.0, 0.0])]
    train.adam_step(w, [np.array([1e-4, -5.0, 2e-3])], AdamState.zeros_like(w), cfg)
    np.testing.assert_allclose(np.abs(w[0]), 1e-3, rtol=1e-3)


def test_zero_learning_rate_freezes_parameters():
    p = make_problem("bubble")
    g = p.grid(8)
    spec = NetworkSpec(1, g.shape, channels=4)
    params = build(spec, 0)
    before = [a.copy() for a in params.arrays()]
    train.train_elliptic(p, g, spec, TrainConfig(lr=0.0, max_steps=5), params=params)
    for a, b in zip(params.arrays(), before):
        np.testing.assert_array_equal(a, b)


# -- training loop -------------------------------------------------------------

def test_training_is_deterministic():
    p = make_problem("exptrig")
    g = p.grid(16)
    spec = NetworkSpec(2, g.shape, channels=4)
    cfg = TrainConfig(max_steps=15, seed=3)
    a = train.train_elliptic(p, g, spec, cfg)
    b = train.train_elliptic(p, g, spec, cfg)
    assert a.loss_history == b.loss_history
    np.testing.assert_array_equal(a.best_prediction, b.best_prediction)


def test_best_loss_history_is_monotone_and_matches_prediction():
    p = make_problem("bubble")
    g = p.grid(16)
    spec = NetworkSpec(2, g.shape, channels=4)
    cfg = TrainConfig(max_steps=40, precision="double")
    r = train.train_elliptic(p, g, spec, cfg)
    best = r.best_history()
    assert np.all(np.diff(best) <= 0)
    assert r.best_loss == best[-1] == r.loss_history[r.best_iteration]
    loss = train.elliptic_loss_fn(p, g, cfg)(r.best_prediction)
    assert float(loss.data) == pytest.approx(r.best_loss, rel=1e-12)
    assert len(r.wall_ms) == 40 and np.all(np.diff(r.wall_ms) >= 0)


def test_training_reduces_loss():
    p = make_problem("bubble")
    g = p.grid(16)
    spec = NetworkSpec(2, g.shape, channels=8)
    r = train.train_elliptic(p, g, spec, TrainConfig(max_steps=100))
    assert r.best_loss < 0.1 * r.loss_history[0]


def test_network_gradient_matches_finite_differences():
    p = make_problem("exptrig")
    g = p.grid(8)
    spec = NetworkSpec(0, g.shape, channels=4)
    cfg = TrainConfig(precision="double")
    params = build(spec, 0, "double")
    rng = np.random.default_rng(1)
    for b in params.biases:
        b[:] = 0.1 * rng.standard_normal(b.shape)
    inp = train.network_input(g.sample(p.source_f), cfg)
    loss_fn = train.elliptic_loss_fn(p, g, cfg)

    def value():
        return float(loss_fn(forward(params, spec, inp)).data)

    tape = ad.Tape()
    grads = tape.gradient(loss_fn(forward(params, spec, inp, tape)), tape.watched)
    for arr, gr in zip(params.arrays(), grads):
        num = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            keep = arr[idx]
            arr[idx] = keep + 1e-6
            up = value()
            arr[idx] = keep - 1e-6
            down = value()
            arr[idx] = keep
            num[idx] = (up - down) / 2e-6
        assert np.linalg.norm(gr - num) <= 1e-4 * max(np.linalg.norm(num), 1e-12)


def test_non_finite_loss_aborts():
    p = make_problem("bubble")
    g = p.grid(8)
    spec = NetworkSpec(1, g.shape, channels=2)
    params = build(spec, 0)
    params.weights[0][...] = np.nan
    with pytest.raises(TrainingError, match="iteration 0"):
        train.train_elliptic(p, g, spec, TrainConfig(max_steps=3), params=params)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(grad_clip_norm=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(input_scaling="std")
    with pytest.raises(ConfigurationError):
        TrainConfig(precision="half")
    par = TrainConfig.parabolic()
    assert par.lr == 1e-4 and par.max_steps == 250


def test_problem_kind_is_checked():
    ell, par = make_problem("bubble"), make_problem("trig1")
    g = ell.grid(8)
    spec = NetworkSpec(1, g.shape, channels=2)
    with pytest.raises(ConfigurationError):
        train.train_elliptic(par, g, spec, TrainConfig(max_steps=1))
    with pytest.raises(ConfigurationError):
        train.train_parabolic(ell, g, spec, TrainConfig.parabolic(max_steps=1))
    with pytest.raises(ConfigurationError):
        train.train_elliptic(ell, ell.grid(9), spec, TrainConfig(max_steps=1))


def test_input_scaling():
    f = np.array([[2.0, -4.0]])
    assert train.network_input(f, TrainConfig()).tolist() == [[[2.0, -4.0]]]
    np.testing.assert_allclose(train.network_input(f, TrainConfig(input_scaling="maxabs")), [[[0.5, -1.0]]])


# -- time stepping -------------------------------------------------------------

def _zero_problem():
    zero = lambda x, y, t=0.0: np.zeros(np.broadcast(x, y).shape)
    return ProblemSpec("zero", (0.0, 1.0), zero, zero, zero, time_dependent=True)


def test_zero_parabolic_problem_stays_zero():
    p = _zero_problem()
    g = p.grid(16)
    spec = NetworkSpec(2, g.shape, channels=4)
    res = train.train_parabolic(p, g, spec, TrainConfig.parabolic(max_steps=20), n_steps=3, first_step_iters=20)
    assert len(res) == 3
    for r in res:
        assert np.abs(r.best_prediction).max() <= 1e-3


def test_parabolic_iteration_schedule_and_warm_start():
    p = make_problem("trig1")
    g = p.grid(8)
    spec = NetworkSpec(1, g.shape, channels=2)
    params = build(spec, 0)
    seen = []
    res = train.train_parabolic(p, g, spec, TrainConfig.parabolic(max_steps=4), n_steps=3,
                                first_step_iters=7, params=params,
                                callback=lambda n, k, l, b: seen.append((n, k)))
    assert [len(r.loss_history) for r in res] == [7, 4, 4]
    assert seen[0] == (1, 0) and seen[-1] == (3, 3)
    # one parameter object is trained throughout
    assert all(r.params is params for r in res)


def test_history_csv(tmp_path):
    r = train.TrainResult(np.zeros((2, 2)), 0.5, [1.0, 0.5, 0.75], 0.1, [1.0, 2.0, 3.0], 1)
    path = tmp_path / "loss.csv"
    train.write_history(r, path)
    rows = list(csv.DictReader(path.open()))
    assert [float(x["best_loss"]) for x in rows] == [1.0, 0.5, 0.5]
    assert [int(x["iteration"]) for x in rows] == [0, 1, 2]
    assert list(rows[0]) == ["iteration", "loss", "best_loss", "wall_ms"]
