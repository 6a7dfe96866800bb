"""Douglas-Rachford splitting of a task-fitting term f and a stability term g.

Per outer iteration::

    x = prox_f(u)                      # both segments, K Adam steps from u
    y = prox_g(2x - u) ; y_dec = x_dec # encoder only, K_g Adam steps
    u = u + lambda_r * (y - x)

The final parameters for a task are the last ``x``.  Objectives are duck-typed:
anything providing the methods of :class:`NeuralObjective` works, and an
objective with ``exact_proxes = True`` supplies closed-form proximal maps.
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .divergences import ORDERS, weighted_stability
from .errors import ConfigError, NonFiniteLoss, RenyiUndefined

log = logging.getLogger(__name__)

# objective value assigned to points where the Renyi term is undefined
UNDEFINED_PENALTY = 1e12

DIAGNOSTIC_COLUMNS = ("task_id", "iter", "residual", "f_value", "g_value", "wall_ms")


@dataclass(frozen=True)
class DrsConfig:
    gamma: float = 0.5
    lambda_r: float = 0.7
    lambda_stab: float = 0.7
    alpha: float = 2.0
    outer_iters: int = 20
    inner_steps_f: int = 50
    inner_steps_g: int = 25
    inner_lr: float = 1e-3
    argument_order: str = "paper"
    mc_samples: int = 1
    batch_size: int = None  # prox_f minibatch size; None uses the full task
    g_batch_size: int = 128
    g_data: str = "minibatch"  # or "full": whole task re-encoded every step
    early_stop: bool = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not 0 < self.lambda_r < 2:
            raise ConfigError("lambda_r must lie in (0, 2)")
        if self.lambda_stab < 0:
            raise ConfigError("lambda_stab must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        for name in ("outer_iters", "inner_steps_f", "inner_steps_g", "mc_samples", "g_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1 or null")
        if not self.inner_lr > 0:
            raise ConfigError("inner_lr must be > 0")
        if self.argument_order not in ORDERS:
            raise ConfigError(f"argument_order must be one of {ORDERS}")
        if self.g_data not in ("minibatch", "full"):
            raise ConfigError("g_data must be 'minibatch' or 'full'")

    @classmethod
    def field_names(cls):
        return tuple(f.name for f in fields(cls))

    def to_dict(self):
        return asdict(self)


@dataclass
class DrsState:
    u: dc.ParamVector
    x: dc.ParamVector = None
    y: dc.ParamVector = None
    iter: int = 0
    residual_history: list = field(default_factory=list)


@dataclass
class DrsDiagnostics:
    task_id: int = 0
    residual: list = field(default_factory=list)
    f_values: list = field(default_factory=list)
    g_values: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    penalty_events: int = 0

    @property
    def iterations(self):
        return len(self.residual)

    def rows(self):
        for i in range(self.iterations):
            yield (self.task_id, i + 1, self.residual[i], self.f_values[i], self.g_values[i],
                   self.wall_ms[i])


def write_diagnostics_csv(path, diagnostics):
    """One row per outer iteration across all tasks."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIAGNOSTIC_COLUMNS)
        for diag in diagnostics:
            for row in diag.rows():
                writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


# objectives -----------------------------------------------------------------


class NeuralObjective:
    """f and g for one task of the Gaussian-latent classifier.

    ``f`` is the Monte-Carlo negative log-likelihood on the task's training
    split.  ``g`` is the weighted Renyi (or KL at ``alpha == 1``) divergence
    between the aggregated posterior of a batch and the propagated prior.
    """

    exact_proxes = False
    g_segments = ("encoder",)

    def __init__(self, model, split, prior, cfg, use_stability=True, probe_seed=0):
        self.model = model
        self.x = split.x
        self.y = split.y
        self.prior = prior.gaussian if hasattr(prior, "gaussian") else prior
        self.cfg = cfg
        self.use_stability = use_stability and cfg.lambda_stab > 0
        self.penalty_events = 0
        self._probe_noise = model.draw_noise(self.n, 1, np.random.default_rng(probe_seed))

    @property
    def n(self):
        return self.y.size

    def f_batch(self, rng):
        bs = self.cfg.batch_size
        if bs is None or bs >= self.n:
            return None
        return np.sort(rng.choice(self.n, size=bs, replace=False))

    def draw_noise(self, rng, idx=None):
        n = self.n if idx is None else idx.size
        return self.model.draw_noise(n, self.cfg.mc_samples, rng)

    def f_tensor(self, tensors, idx, noise):
        x, y = (self.x, self.y) if idx is None else (self.x[idx], self.y[idx])
        return self.model.task_loss_tensor(tensors, x, y, noise)

    def g_batch(self, rng):
        if self.cfg.g_data == "full" or self.cfg.g_batch_size >= self.n:
            return None
        return np.sort(rng.choice(self.n, size=self.cfg.g_batch_size, replace=False))

    def g_tensor(self, tensors, idx):
        x = self.x if idx is None else self.x[idx]
        mu, log_sigma = self.model.encoder_forward(x, tensors["encoder"])
        from .model import aggregate_gaussian
        mean, var = aggregate_gaussian(mu, log_sigma, self.model.aggregation)
        return weighted_stability((mean, var), self.prior, self.cfg.lambda_stab, self.cfg.alpha,
                                  self.cfg.argument_order)

    def loss_tensor(self, tensors, idx, noise, g_idx=None):
        """The joint objective f + g used by plain gradient baselines."""
        loss = self.f_tensor(tensors, idx, noise)
        if self.use_stability:
            loss = loss + self.g_tensor(tensors, g_idx)
        return loss

    def f_value(self, params):
        tensors = {k: dc.Tensor(v) for k, v in params.segments.items()}
        return self.model.task_loss_tensor(tensors, self.x, self.y, self._probe_noise).item()

    def g_value(self, params):
        """Stability on the full split; ``inf`` where the divergence is undefined."""
        if not self.use_stability:
            return 0.0
        try:
            return self.g_tensor({"encoder": dc.Tensor(params["encoder"])}, None).item()
        except RenyiUndefined:
            return math.inf

    def g_is_valid(self, params):
        return math.isfinite(self.g_value(params))


class QuadraticObjective:
    """``f(p) = 0.5 ||p - a||^2`` and ``g(p) = 0.5 ||p - b||^2`` on one segment."""

    g_segments = ("encoder",)
    penalty_events = 0

    def __init__(self, a, b, exact_proxes=True):
        self.a = np.asarray(a, dtype=np.float64).reshape(-1)
        self.b = np.asarray(b, dtype=np.float64).reshape(-1)
        self.exact_proxes = exact_proxes
        self.use_stability = True

    def exact_prox_f(self, u, gamma):
        return dc.ParamVector({"encoder": (u["encoder"] + gamma * self.a) / (1.0 + gamma)})

    def exact_prox_g(self, v, gamma):
        return dc.ParamVector({"encoder": (v["encoder"] + gamma * self.b) / (1.0 + gamma)})

    def f_batch(self, rng):
        return None

    def g_batch(self, rng):
        return None

    def draw_noise(self, rng, idx=None):
        return None

    def f_tensor(self, tensors, idx, noise):
        d = tensors["encoder"] - self.a
        return (d * d).sum() * 0.5

    def g_tensor(self, tensors, idx):
        d = tensors["encoder"] - self.b
        return (d * d).sum() * 0.5

    def f_value(self, params):
        return 0.5 * float(np.sum((params["encoder"] - self.a) ** 2))

    def g_value(self, params):
        return 0.5 * float(np.sum((params["encoder"] - self.b) ** 2))

    def g_is_valid(self, params):
        return True

    @property
    def minimizer(self):
        return 0.5 * (self.a + self.b)


class DirectGaussianObjective:
    """Stability term for an "encoder" that is the identity map to ``(mu, log_sigma)``.

    The encoder segment holds ``d`` means followed by ``d`` log standard
    deviations; ``g = weighted_stability(q, prior)``.  There is no task term,
    so only :func:`prox_g` is meaningful.  Used to study the proximal map of
    the divergence in isolation.
    """

    exact_proxes = False
    g_segments = ("encoder",)

    def __init__(self, prior, cfg):
        self.prior = prior.gaussian if hasattr(prior, "gaussian") else prior
        self.cfg = cfg
        self.use_stability = cfg.lambda_stab > 0
        self.penalty_events = 0

    def g_batch(self, rng):
        return None

    def g_tensor(self, tensors, idx):
        enc = tensors["encoder"]
        d = self.prior.dim
        mean, log_sigma = enc[:d], enc[d:]
        return weighted_stability((mean, dc.exp(log_sigma * 2.0)), self.prior,
                                  self.cfg.lambda_stab, self.cfg.alpha, self.cfg.argument_order)

    def g_value(self, params):
        try:
            return self.g_tensor({"encoder": dc.Tensor(params["encoder"])}, None).item()
        except RenyiUndefined:
            return math.inf

    def g_is_valid(self, params):
        return math.isfinite(self.g_value(params))

    def prox_objective(self, params, anchor, gamma):
        """``g(params) + ||params - anchor||^2 / (2 gamma)`` on the encoder segment."""
        diff = params["encoder"] - anchor["encoder"]
        return self.g_value(params) + float(diff @ diff) / (2.0 * gamma)


# proximal steps -----------------------------------------------------------


def _prox_term(tensors, anchor, names):
    total = None
    for k in names:
        d = tensors[k] - anchor[k]
        term = (d * d).sum()
        total = term if total is None else total + term
    return total


def prox_f(u, objective, cfg, rng):
    """Approximate ``argmin f(p) + ||p - u||^2 / (2 gamma)`` with K Adam steps from ``u``.

    With full-batch steps the noise draw is fixed for the whole call, so every
    iterate is scored on the same objective and the best one (``u`` included)
    is returned.  With minibatches only ``u`` and the last iterate are scored,
    on the full split.
    """
    if objective.exact_proxes:
        return objective.exact_prox_f(u, cfg.gamma)
    scale = 0.5 / cfg.gamma
    names = u.names
    minibatch = objective.f_batch(rng) is not None

    def make_fn(idx, noise):
        return lambda t, _: objective.f_tensor(t, idx, noise) + _prox_term(t, u, names) * scale

    full_fn = make_fn(None, objective.draw_noise(rng))
    x = u
    state = dc.AdamState.fresh(u, cfg.inner_lr)
    best_val, best = math.inf, u
    if minibatch:
        best_val = dc.loss_value(full_fn, u, None)
    for _ in range(cfg.inner_steps_f):
        if minibatch:
            idx = objective.f_batch(rng)
            _, grad = dc.forward_backward(make_fn(idx, objective.draw_noise(rng, idx)), x, None)
        else:
            val, grad = dc.forward_backward(full_fn, x, None)
            if val < best_val:
                best_val, best = val, x
        x, state = dc.adam_step(x, grad, state)
    if dc.loss_value(full_fn, x, None) < best_val:
        best = x
    return best


def _restrict(params, names):
    return dc.ParamVector({k: params[k] for k in names})


def _merge(base, part):
    out = base.copy()
    for k in part.names:
        out = out.with_segment(k, part[k])
    return out


def prox_g(v, objective, cfg, rng, passthrough=None):
    """Approximate ``argmin g(phi) + ||phi - v_phi||^2 / (2 gamma)`` over the encoder.

    Segments outside ``objective.g_segments`` are copied from ``passthrough``
    (the x-side iterate) or, if absent, from ``v``.  A step that lands where the
    divergence is undefined is rejected and the learning rate halved; if ``v``
    itself is undefined the first valid point on the segment towards
    ``passthrough`` is used, else ``v`` is kept.
    """
    base = passthrough if passthrough is not None else v
    if objective.exact_proxes:
        return _merge(base, _restrict(objective.exact_prox_g(v, cfg.gamma), objective.g_segments))
    names = objective.g_segments
    anchor = _restrict(v, names)
    if not objective.use_stability:
        return _merge(base, anchor)
    scale = 0.5 / cfg.gamma

    def fn(t, idx):
        return objective.g_tensor(t, idx) + _prox_term(t, anchor, names) * scale

    current = anchor
    if not objective.g_is_valid(current):
        objective.penalty_events += 1
        current = _recover_valid(anchor, _restrict(base, names), objective)
        if current is None:
            log.info("stability term undefined along the whole recovery path; keeping v")
            return _merge(base, anchor)
    lr = cfg.inner_lr
    state = dc.AdamState.fresh(current, lr)
    previous = current
    for _ in range(cfg.inner_steps_g):
        idx = objective.g_batch(rng)
        try:
            _, grad = dc.forward_backward(fn, current, idx)
        except RenyiUndefined:
            objective.penalty_events += 1
            lr *= 0.5
            current, state = previous, state.with_lr(lr)
            continue
        previous = current
        current, state = dc.adam_step(current, grad, state)
    if not objective.g_is_valid(current):
        objective.penalty_events += 1
        current = previous
    return _merge(base, current)


def _recover_valid(start, target, objective, steps=(0.25, 0.5, 0.75, 1.0)):
    for tau in steps:
        candidate = start + (target - start) * tau
        if objective.g_is_valid(candidate):
            return candidate
    return None


def reflect(x, u):
    """``2x - u``."""
    return x * 2.0 - u


def relaxed_update(u, x, y, lambda_r):
    """``u + lambda_r (y - x)``."""
    if not 0 < lambda_r < 2:
        raise ValueError("lambda_r must lie in (0, 2)")
    return u + (y - x) * lambda_r


def residual(x, y):
    """Euclidean norm of ``x - y`` over all segments."""
    return math.sqrt(dc.param_distance_sq(x, y))


def drs_solve_task(init, objective, cfg, rng, task_id=0):
    """Run the outer DRS loop for one task; returns ``(x_final, diagnostics)``."""
    state = DrsState(u=init)
    diag = DrsDiagnostics(task_id=task_id)
    tol = 1e-5 * math.sqrt(init.total_dim)
    for i in range(1, cfg.outer_iters + 1):
        t0 = time.perf_counter()
        try:
            x = prox_f(state.u, objective, cfg, rng)
            y = prox_g(reflect(x, state.u), objective, cfg, rng, passthrough=x)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"task {task_id}, outer iteration {i}: {exc}") from exc
        state.u = relaxed_update(state.u, x, y, cfg.lambda_r)
        state.x, state.y, state.iter = x, y, i
        r = residual(x, y)
        state.residual_history.append(r)
        diag.wall_ms.append((time.perf_counter() - t0) * 1e3)
        diag.residual.append(r)
        diag.f_values.append(objective.f_value(x))
        diag.g_values.append(objective.g_value(y))
        if cfg.early_stop and r < tol:
            break
    diag.penalty_events = objective.penalty_events
    return state.x, diag


def drs_quadratic_reference(a, b, gamma, lambda_r, iters, u0=None):
    """Exact DRS trajectory for ``f = 0.5||p-a||^2``, ``g = 0.5||p-b||^2``.

    Returns a dict of arrays ``u`` (iters+1 rows), ``x``, ``y`` and
    ``residual`` (iters rows).  The limit of ``x`` is ``(a + b) / 2``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    u = np.zeros_like(a) if u0 is None else np.asarray(u0, dtype=np.float64).reshape(-1).copy()
    us, xs, ys = [u.copy()], [], []
    for _ in range(iters):
        x = (u + gamma * a) / (1.0 + gamma)
        y = (2.0 * x - u + gamma * b) / (1.0 + gamma)
        u = u + lambda_r * (y - x)
        us.append(u.copy())
        xs.append(x)
        ys.append(y)
    xs, ys = np.array(xs), np.array(ys)
    return {"u": np.array(us), "x": xs, "y": ys, "residual": np.linalg.norm(xs - ys, axis=1)}
