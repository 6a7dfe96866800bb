"""Fast oracle checks runnable from the command line (``drscl verify``)."""

import time

import numpy as np

from . import diffcore as dc
from . import metrics as mt
from .divergences import kl_1d, oracle_grid, renyi_1d, renyi_quadrature_oracle
from .drs import drs_quadratic_reference
from .errors import GridTooNarrow
from .model import DecoderConfig, EncoderConfig, GaussianLatentModel


def random_valid_case(rng, alphas=(0.3, 0.5, 1.5, 2.0, 2.5), order="paper"):
    """Random ``(q, p, alpha)`` whose Renyi integrand is integrable and localized.

    Returns ``(q, p, alpha, center, halfwidth)``; draws whose integrand peak
    lies outside the probe range (precision within ~1e-4 of zero) are redrawn.
    """
    while True:
        alpha = float(rng.choice(alphas))
        qm, pm = rng.uniform(-5, 5, size=2)
        qv, pv = rng.uniform(0.1, 10, size=2)
        var_a, var_b = (pv, qv) if order == "paper" else (qv, pv)
        if alpha / var_a + (1 - alpha) / var_b <= 0:
            continue
        try:
            center, half = oracle_grid((qm, qv), (pm, pv), alpha, order)
        except GridTooNarrow:
            continue
        return (qm, qv), (pm, pv), alpha, center, half


def check_renyi_oracle(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        q, p, alpha, center, half = random_valid_case(rng)
        closed = float(renyi_1d(q[0], q[1], p[0], p[1], alpha))
        quad = renyi_quadrature_oracle(q, p, alpha, grid_halfwidth=half, grid_points=20001,
                                       center=center)
        worst = max(worst, abs(closed - quad))
    return worst


def check_kl_limit(n=100, seed=1, order="paper"):
    """Largest gap between ``alpha = 1 +- 1e-3`` and the KL branch.

    The gap is about ``1e-3 * |dD/dalpha|``, so cases are drawn with moderate
    divergence (means in [-0.5, 0.5], variances in [0.75, 1.5]).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        qm, pm = rng.uniform(-0.5, 0.5, size=2)
        qv, pv = rng.uniform(0.75, 1.5, size=2)
        at_one = float(renyi_1d(qm, qv, pm, pv, 1.0, order))
        for a in (1.0 - 1e-3, 1.0 + 1e-3):
            worst = max(worst, abs(float(renyi_1d(qm, qv, pm, pv, a, order)) - at_one))
    return worst


def check_gradients(seeds=(0, 1, 2)):
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        model = GaussianLatentModel(EncoderConfig(6, (5,), 3), DecoderConfig(6, 3, 4, (4,)))
        params = model.init_params(rng)
        x, y = rng.normal(size=(7, 6)), rng.integers(0, 4, size=7)
        noise = model.draw_noise(7, 2, rng)
        fn = lambda t, _: model.task_loss_tensor(t, x, y, noise)
        worst = max(worst, dc.finite_diff_check(fn, params, None, rng=rng))
    return worst


def check_quadratic(gammas=(0.1, 0.5, 1.0), relax=(0.5, 1.0, 1.9), iters=200):
    a, b = np.zeros(1), np.full(1, 2.0)
    out = {}
    for g in gammas:
        for lr in relax:
            traj = drs_quadratic_reference(a, b, g, lr, iters)
            out[(g, lr)] = float(np.abs(traj["x"][-1] - 1.0).max())
    return out


def check_metric_algebra(n=1000, seed=2):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        T = int(rng.integers(2, 12))
        A = np.tril(rng.uniform(size=(T, T)))
        if mt.bwt(A) != -float(np.mean(mt.forgetting(A))):
            bad += 1
    return bad


def run_all(echo=print):
    """Run every check and report pass/fail lines; returns True when all pass."""
    results = []

    def record(name, ok, detail, t0):
        results.append(ok)
        echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")

    t0 = time.perf_counter()
    err = check_renyi_oracle()
    record("renyi closed form vs quadrature", err <= 1e-6, f"max |diff| {err:.2e}", t0)
    t0 = time.perf_counter()
    err = max(check_kl_limit(order=o) for o in ("paper", "standard"))
    record("KL limit", err <= 1e-3, f"max |diff| {err:.2e}", t0)
    t0 = time.perf_counter()
    err = check_gradients()
    record("task loss gradients", err <= 1e-4, f"max rel err {err:.2e}", t0)
    t0 = time.perf_counter()
    errs = check_quadratic()
    failing = {k: v for k, v in errs.items() if v > 1e-8}
    record("quadratic DRS oracle", not failing,
           "all cells within 1e-8" if not failing else f"cells above 1e-8: {failing}", t0)
    t0 = time.perf_counter()
    bad = check_metric_algebra()
    record("bwt == -mean(forgetting)", bad == 0, f"{bad} mismatches", t0)
    t0 = time.perf_counter()
    record("kl_1d reference value", abs(float(kl_1d(1.0, 1.0, 0.0, 1.0)) - 0.5) < 1e-15,
           "KL(N(1,1) || N(0,1)) = 0.5", t0)
    return all(results)
