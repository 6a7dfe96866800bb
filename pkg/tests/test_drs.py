import csv
import math

import numpy as np
import pytest

from drscl import diffcore as dc
from drscl import drs
from drscl.divergences import DiagGaussian
from drscl.errors import ConfigError, ShapeMismatch
from drscl.model import DecoderConfig, EncoderConfig, GaussianLatentModel, initial_prior
from drscl.tasks import Split


def enc(values):
    return dc.ParamVector({"encoder": np.asarray(values, dtype=np.float64)})


def neural_setup(seed=0, n=40, lam=0.7, alpha=2.0, **cfg_kw):
    rng = np.random.default_rng(seed)
    model = GaussianLatentModel(EncoderConfig(4, (6,), 2), DecoderConfig(4, 2, 2, (5,)))
    x = rng.normal(size=(n, 4))
    y = (x[:, 0] + 0.3 * x[:, 1] > 0).astype(int)
    cfg = drs.DrsConfig(lambda_stab=lam, alpha=alpha, **cfg_kw)
    obj = drs.NeuralObjective(model, Split(x, y), initial_prior(2), cfg)
    return model, obj, cfg, model.init_params(rng)


# config -------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = drs.DrsConfig()
    assert (cfg.gamma, cfg.lambda_r, cfg.lambda_stab, cfg.alpha) == (0.5, 0.7, 0.7, 2.0)
    assert (cfg.inner_steps_f, cfg.inner_steps_g, cfg.inner_lr) == (50, 25, 1e-3)
    for bad in ({"gamma": 0}, {"lambda_r": 2.0}, {"lambda_r": 0}, {"outer_iters": 0},
                {"argument_order": "reverse"}, {"lambda_stab": -1}, {"g_data": "cached"}):
        with pytest.raises(ConfigError):
            drs.DrsConfig(**bad)


# reflect / relaxed_update / residual ---------------------------------------


def test_reflect_examples():
    u = enc([1.0, -2.0])
    assert drs.reflect(u, u).equals(u)
    np.testing.assert_array_equal(drs.reflect(enc([1.0]), enc([0.0]))["encoder"], [2.0])
    rng = np.random.default_rng(0)
    x, u = enc(rng.normal(size=9)), enc(rng.normal(size=9))
    back = drs.reflect(x, drs.reflect(x, u))
    np.testing.assert_allclose(back["encoder"], u["encoder"], rtol=0, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        drs.reflect(enc([1.0]), enc([1.0, 2.0]))


def test_relaxed_update_examples():
    u, x = enc([0.3]), enc([1.0])
    assert drs.relaxed_update(u, x, x, 0.7).equals(u)
    np.testing.assert_array_equal(drs.relaxed_update(enc([0.0]), x, enc([3.0]), 1.0)["encoder"], [2.0])
    rng = np.random.default_rng(1)
    a, b, c = (rng.normal(size=6) for _ in range(3))
    out = drs.relaxed_update(enc(a), enc(b), enc(c), 1.3)["encoder"]
    for i in range(6):
        assert out[i] == pytest.approx(a[i] + 1.3 * (c[i] - b[i]), abs=1e-15)
    with pytest.raises(ValueError):
        drs.relaxed_update(enc(a), enc(b), enc(c), 2.0)


def test_fixed_point_algebra_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        u = dc.ParamVector({"encoder": rng.normal(size=5), "decoder": rng.normal(size=3)})
        x = dc.ParamVector({"encoder": rng.normal(size=5), "decoder": rng.normal(size=3)})
        assert drs.relaxed_update(u, x, x.copy(), rng.uniform(0.01, 1.99)).equals(u)


def test_residual_examples():
    x = enc([1.0, 2.0, 3.0])
    assert drs.residual(x, x) == 0.0
    assert drs.residual(x, enc([1.0, 3.0, 3.0])) == 1.0
    rng = np.random.default_rng(3)
    a, b = enc(rng.normal(size=7)), enc(rng.normal(size=7))
    assert drs.residual(a, b) == math.sqrt(dc.param_distance_sq(a, b))


# prox_f -------------------------------------------------------------------


def test_prox_f_quadratic_reaches_closed_form():
    a = np.array([1.0, -2.0, 0.5])
    obj = drs.QuadraticObjective(a, np.zeros(3), exact_proxes=False)
    cfg = drs.DrsConfig(gamma=0.5, inner_steps_f=4000, inner_lr=0.01)
    u = enc([0.0, 1.0, 2.0])
    x = drs.prox_f(u, obj, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(x["encoder"], (u["encoder"] + 0.5 * a) / 1.5, atol=1e-6)
    exact = drs.prox_f(u, drs.QuadraticObjective(a, np.zeros(3)), cfg, None)
    np.testing.assert_allclose(exact["encoder"], (u["encoder"] + 0.5 * a) / 1.5, rtol=1e-15)


def test_prox_f_small_gamma_stays_near_u():
    model, obj, _, params = neural_setup()
    grad = dc.forward_backward(lambda t, _: obj.f_tensor(t, None, obj._probe_noise), params, None)[1]
    gamma = 1e-4
    cfg = drs.DrsConfig(gamma=gamma, inner_steps_f=200, inner_lr=1e-4)
    x = drs.prox_f(params, obj, cfg, np.random.default_rng(0))
    assert (x - params).norm() <= 10 * gamma * grad.norm()


def test_prox_f_never_worse_than_u():
    model, obj, cfg, params = neural_setup(inner_lr=0.05)
    rng = np.random.default_rng(1)
    for _ in range(5):
        noise = obj.draw_noise(np.random.default_rng(7))
        anchor = params

        def total(p):
            t = {k: dc.Tensor(v) for k, v in p.segments.items()}
            return (obj.f_tensor(t, None, noise).item()
                    + dc.param_distance_sq(p, anchor) / (2 * cfg.gamma))

        x = drs.prox_f(params, obj, cfg, np.random.default_rng(7))
        assert total(x) <= total(params) + 1e-12
        params = x + x.zeros_like()
        rng.normal()


def test_prox_f_minibatch_mode_runs():
    model, obj, _, params = neural_setup(batch_size=8)
    x = drs.prox_f(params, obj, obj.cfg, np.random.default_rng(0))
    assert x.names == params.names and x.all_finite()


# prox_g -------------------------------------------------------------------


def test_prox_g_zero_stability_returns_v():
    model, obj, cfg, params = neural_setup(lam=0.0)
    v = params * 1.5
    x = params
    y = drs.prox_g(v, obj, cfg, np.random.default_rng(0), passthrough=x)
    assert np.array_equal(y["encoder"], v["encoder"])
    assert np.array_equal(y["decoder"], x["decoder"])


def test_prox_g_at_matching_prior_returns_v():
    prior = DiagGaussian([0.3, -1.0], [0.5, 2.0])
    cfg = drs.DrsConfig(gamma=1.0, lambda_stab=3.0, alpha=2.0)
    obj = drs.DirectGaussianObjective(prior, cfg)
    v = enc(np.concatenate([prior.mean, 0.5 * np.log(prior.var)]))
    y = drs.prox_g(v, obj, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(y["encoder"], v["encoder"], atol=1e-12)


def test_prox_g_decoder_passthrough_is_bit_identical():
    model, obj, cfg, params = neural_setup()
    rng = np.random.default_rng(4)
    x = drs.prox_f(params, obj, cfg, rng)
    y = drs.prox_g(drs.reflect(x, params), obj, cfg, rng, passthrough=x)
    assert y["decoder"] is not x["decoder"]
    assert np.array_equal(y["decoder"], x["decoder"])
    assert not np.array_equal(y["encoder"], x["encoder"])


def _grid_prox(alpha, order, lam, gamma, v):
    """Dense grid search over (mu, log sigma) with successive zooming."""
    from drscl.divergences import kl_1d, renyi_1d

    def obj(mu, ls):
        var = np.exp(2 * ls)
        with np.errstate(all="ignore"):
            if alpha == 1.0:
                d = kl_1d(mu, var, 0.0, 1.0) if order == "standard" else kl_1d(0.0, 1.0, mu, var)
            else:
                valid = alpha / (1.0 if order == "paper" else var) + (1 - alpha) / (
                    var if order == "paper" else 1.0) > 0
                d = np.where(valid, renyi_1d(mu, np.where(valid, var, 1.0), 0.0, 1.0, alpha, order),
                             np.inf)
        return lam * d + ((mu - v[0]) ** 2 + (ls - v[1]) ** 2) / (2 * gamma)

    center, half = (0.5 * v[0], 0.0), (v[0], 4.0)
    for _ in range(8):
        M, L = np.meshgrid(np.linspace(center[0] - half[0], center[0] + half[0], 401),
                           np.linspace(center[1] - half[1], center[1] + half[1], 401), indexing="ij")
        V = obj(M, L)
        i = np.unravel_index(np.argmin(V), V.shape)
        center, half = (M[i], L[i]), (half[0] / 10, half[1] / 10)
    return np.array(center)


@pytest.mark.parametrize("alpha,order", [(1.0, "standard"), (0.5, "paper"), (2.0, "standard")])
def test_prox_g_matches_grid_search(alpha, order):
    v = np.array([3.0, 0.2])
    cfg = drs.DrsConfig(gamma=1.0, lambda_stab=4.0, alpha=alpha, argument_order=order,
                        inner_steps_g=3000, inner_lr=0.05)
    y = drs.prox_g(enc(v), drs.DirectGaussianObjective(DiagGaussian.standard(1), cfg), cfg,
                   np.random.default_rng(0))
    np.testing.assert_allclose(y["encoder"], _grid_prox(alpha, order, 4.0, 1.0, v), atol=1e-3)


def test_prox_g_recovers_from_undefined_reflection():
    # alpha=2 under the literal order needs q_var > p_var / 2; v sits outside that region
    prior = DiagGaussian.standard(1)
    cfg = drs.DrsConfig(gamma=1.0, lambda_stab=1.0, alpha=2.0, inner_steps_g=50, inner_lr=0.01)
    obj = drs.DirectGaussianObjective(prior, cfg)
    v = enc([0.0, -2.0])
    passthrough = enc([0.0, 0.0])
    assert not obj.g_is_valid(v)
    y = drs.prox_g(v, obj, cfg, np.random.default_rng(0), passthrough=passthrough)
    assert obj.g_is_valid(y) and obj.penalty_events >= 1


# the outer loop -----------------------------------------------------------


def test_single_iteration_without_stability_is_one_prox_f():
    model, obj, _, params = neural_setup(lam=0.0)
    cfg = drs.DrsConfig(lambda_stab=0.0, outer_iters=1)
    final, diag = drs.drs_solve_task(params, obj, cfg, np.random.default_rng(5))
    x1 = drs.prox_f(params, obj, cfg, np.random.default_rng(5))
    assert final.equals(x1) and diag.iterations == 1


def test_quadratic_drs_converges_to_joint_minimizer():
    a, b = np.array([0.0, 4.0]), np.array([2.0, -1.0])
    cfg = drs.DrsConfig(gamma=0.5, lambda_r=1.0, outer_iters=200, early_stop=False)
    final, diag = drs.drs_solve_task(enc([5.0, 5.0]), drs.QuadraticObjective(a, b), cfg, None)
    np.testing.assert_allclose(final["encoder"], (a + b) / 2, atol=1e-6)
    assert np.all(np.diff(diag.residual[1:]) <= 1e-15)


def test_quadratic_reference_matches_scalar_recurrence():
    traj = drs.drs_quadratic_reference([0.0], [2.0], 0.7, 1.3, 60, u0=[0.4])
    u = 0.4
    for k in range(60):
        x = (u + 0.7 * 0.0) / 1.7
        y = (2 * x - u + 0.7 * 2.0) / 1.7
        u = u + 1.3 * (y - x)
        assert abs(traj["x"][k, 0] - x) <= 1e-12 and abs(traj["u"][k + 1, 0] - u) <= 1e-12
    assert traj["residual"].shape == (60,)


def test_quadratic_reference_examples():
    same = drs.drs_quadratic_reference([1.5], [1.5], 0.5, 1.0, 200)
    assert same["residual"][-1] == pytest.approx(0.0, abs=1e-12)
    assert abs(same["x"][-1, 0] - 1.5) <= 1e-12
    t = drs.drs_quadratic_reference([0.0], [2.0], 1.0, 1.0, 200)
    assert np.abs(t["x"] - 1.0)[:200].min() <= 1e-8
    slow = drs.drs_quadratic_reference([0.0], [2.0], 1.0, 0.5, 400)["x"][-1]
    fast = drs.drs_quadratic_reference([0.0], [2.0], 1.0, 1.9, 400)["x"][-1]
    assert abs(slow[0] - fast[0]) <= 1e-10 and abs(fast[0] - 1.0) <= 1e-10


def test_early_stop_on_small_residual():
    cfg = drs.DrsConfig(gamma=1.0, lambda_r=1.0, outer_iters=500)
    final, diag = drs.drs_solve_task(enc([0.0]), drs.QuadraticObjective([0.0], [2.0]), cfg, None)
    assert diag.iterations < 500 and diag.residual[-1] < 1e-5


def test_neural_loop_is_deterministic_and_writes_diagnostics(tmp_path):
    model, obj, _, params = neural_setup()
    cfg = drs.DrsConfig(outer_iters=3, inner_steps_f=5, inner_steps_g=3)
    runs = []
    for _ in range(2):
        o = drs.NeuralObjective(model, Split(obj.x, obj.y), initial_prior(2), cfg)
        runs.append(drs.drs_solve_task(params, o, cfg, np.random.default_rng(9), task_id=2))
    assert runs[0][0].equals(runs[1][0])
    path = tmp_path / "diag.csv"
    drs.write_diagnostics_csv(path, [runs[0][1]])
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == drs.DIAGNOSTIC_COLUMNS
    assert len(rows) == 4 and rows[1][0] == "2" and rows[3][1] == "3"


def test_prox_g_objective_gradient_matches_finite_differences():
    for seed in range(3):
        model, obj, cfg, params = neural_setup(seed=seed)
        anchor = params * 1.1

        def fn(t, _):
            d = t["encoder"] - anchor["encoder"]
            return obj.g_tensor(t, None) + (d * d).sum() * (0.5 / cfg.gamma)

        enc_only = dc.ParamVector({"encoder": params["encoder"]})
        assert dc.finite_diff_check(fn, enc_only, None, rng=np.random.default_rng(seed)) <= 1e-4
