"""KL and Renyi divergences between (diagonal) Gaussians.

Two argument-order conventions are supported for the Renyi divergence
``D_alpha(q || p)``:

``"paper"``
    ``1/(alpha-1) * log  integral p(z)^alpha q(z)^(1-alpha) dz``.  The alpha -> 1
    limit of this integrand is ``KL(p || q)``, so the alpha == 1 branch returns
    that.
``"standard"``
    ``1/(alpha-1) * log  integral q(z)^alpha p(z)^(1-alpha) dz``, with limit
    ``KL(q || p)``.

All closed forms accept numpy arrays or :class:`~drscl.diffcore.Tensor`
objects (elementwise), so the same code serves value reporting and autodiff.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from . import diffcore as dc
from .errors import GridTooNarrow, InvalidVariance, RenyiUndefined

ORDERS = ("paper", "standard")


def _values(x):
    return x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian with per-dimension ``mean`` and ``var`` vectors."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        var = np.array(self.var, dtype=np.float64).reshape(-1)
        if mean.size < 1 or mean.shape != var.shape:
            raise InvalidVariance(f"mean/var shapes {mean.shape} and {var.shape} do not match")
        if not (np.all(np.isfinite(var)) and np.all(var > 0)):
            raise InvalidVariance("variances must be finite and positive")
        if not np.all(np.isfinite(mean)):
            raise InvalidVariance("means must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return self.mean.size

    @classmethod
    def standard(cls, d):
        return cls(np.zeros(d), np.ones(d))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "var": self.var.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["var"], dtype=np.float64))

    def equals(self, other):
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.var, other.var)


def stability_weights(prior):
    """Per-dimension weights proportional to the prior variances, summing to one."""
    var = prior.var if isinstance(prior, DiagGaussian) else np.asarray(prior, dtype=np.float64)
    return var / var.sum()


def _check_var(*variances):
    for v in variances:
        vals = _values(v)
        if not np.all(vals > 0):
            raise InvalidVariance("variances must be positive")


def kl_1d(q_mean, q_var, p_mean, p_var):
    """KL(q || p) for univariate Gaussians, elementwise."""
    _check_var(q_var, p_var)
    diff = q_mean - p_mean
    return 0.5 * dc.log(p_var / q_var) + (q_var + diff * diff) / (2.0 * p_var) - 0.5


def _roles(q_var, p_var, order):
    """Variances playing the P (exponent alpha) and Q (exponent 1-alpha) roles."""
    if order == "paper":
        return p_var, q_var
    if order == "standard":
        return q_var, p_var
    raise ValueError(f"unknown argument order {order!r}; expected one of {ORDERS}")


def renyi_precision(q_var, p_var, alpha, order="paper"):
    """Quadratic coefficient of the log-integrand; positive iff integrable."""
    var_a, var_b = _roles(_values(q_var), _values(p_var), order)
    return alpha / var_a + (1.0 - alpha) / var_b


def renyi_validity(q_var, p_var, alpha, order="paper"):
    """True where the Renyi integrand is integrable (elementwise for arrays)."""
    ok = renyi_precision(q_var, p_var, alpha, order) > 0
    return bool(ok) if np.ndim(ok) == 0 else ok


def renyi_1d(q_mean, q_var, p_mean, p_var, alpha, order="paper"):
    """Closed-form Renyi divergence ``D_alpha(q || p)`` between 1-D Gaussians.

    Elementwise over arrays/tensors.  Raises :class:`RenyiUndefined` (with the
    first offending index) when the integrand is not integrable.
    """
    _check_var(q_var, p_var)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha == 1.0:
        if order == "paper":
            return kl_1d(p_mean, p_var, q_mean, q_var)
        _roles(q_var, p_var, order)
        return kl_1d(q_mean, q_var, p_mean, p_var)
    valid = np.atleast_1d(renyi_validity(q_var, p_var, alpha, order))
    if not np.all(valid):
        bad = int(np.flatnonzero(~valid)[0])
        raise RenyiUndefined(f"Renyi order {alpha} undefined at dimension {bad}", index=bad)
    var_a, var_b = _roles(q_var, p_var, order)
    diff = q_mean - p_mean
    mix = alpha * var_b + (1.0 - alpha) * var_a
    quad = alpha * diff * diff / (2.0 * mix)
    logdet = dc.log(mix) - (1.0 - alpha) * dc.log(var_a) - alpha * dc.log(var_b)
    return quad + logdet / (2.0 * (1.0 - alpha))


def _log_normal_pdf(z, mean, var):
    return -0.5 * np.log(2.0 * np.pi * var) - (z - mean) ** 2 / (2.0 * var)


def renyi_log_integral(q, p, alpha, grid_halfwidth=30.0, grid_points=20001, center=0.0,
                       order="paper"):
    """Simpson estimate of ``log  integral a^alpha b^(1-alpha)`` on a finite grid.

    ``q`` and ``p`` are ``(mean, var)`` pairs.  Returns ``(log_integral,
    boundary_ratio)`` where the ratio compares the integrand at the grid ends to
    the integral; no validity checks are made, so this also serves divergence
    probes for non-integrable cases.
    """
    if grid_points % 2 == 0:
        grid_points += 1
    z = np.linspace(center - grid_halfwidth, center + grid_halfwidth, grid_points)
    log_q = _log_normal_pdf(z, q[0], q[1])
    log_p = _log_normal_pdf(z, p[0], p[1])
    if order == "paper":
        log_f = alpha * log_p + (1.0 - alpha) * log_q
    else:
        log_f = alpha * log_q + (1.0 - alpha) * log_p
    peak = log_f.max()
    vals = np.exp(log_f - peak)
    integral = simpson(vals, x=z)
    boundary = max(vals[0], vals[-1]) / integral
    return peak + np.log(integral), boundary


def oracle_grid(q, p, alpha, order="paper", reach=1e4, drop=60.0):
    """Locate the integrand numerically: ``(center, halfwidth)`` covering everything
    within ``exp(-drop)`` of its peak, found on a coarse probe grid.  Raises
    :class:`GridTooNarrow` when the integrand is not localized inside the probe."""
    z = np.linspace(-reach, reach, 40001)
    log_q = _log_normal_pdf(z, q[0], q[1])
    log_p = _log_normal_pdf(z, p[0], p[1])
    log_f = alpha * log_p + (1.0 - alpha) * log_q if order == "paper" else \
        alpha * log_q + (1.0 - alpha) * log_p
    keep = np.flatnonzero(log_f > log_f.max() - drop)
    if keep[0] == 0 or keep[-1] == z.size - 1:
        raise GridTooNarrow(f"integrand not localized within +-{reach:g}")
    lo, hi = z[max(keep[0] - 1, 0)], z[min(keep[-1] + 1, z.size - 1)]
    return 0.5 * (lo + hi), max(0.5 * (hi - lo) * 1.5, 1.0)


def renyi_quadrature_oracle(q, p, alpha, grid_halfwidth=30.0, grid_points=20001, center=0.0,
                            order="paper"):
    """Renyi divergence by direct numerical integration of the integrand.

    Independent of the closed form; agreement between the two defines
    closed-form correctness.  ``alpha == 1`` integrates the matching KL
    integrand instead.  Raises :class:`GridTooNarrow` when the integrand at the
    grid boundary exceeds 1e-12 of the total.
    """
    if alpha == 1.0:
        a, b = (p, q) if order == "paper" else (q, p)
        if grid_points % 2 == 0:
            grid_points += 1
        z = np.linspace(center - grid_halfwidth, center + grid_halfwidth, grid_points)
        log_a = _log_normal_pdf(z, a[0], a[1])
        dens = np.exp(log_a)
        if max(dens[0], dens[-1]) > 1e-12:
            raise GridTooNarrow("KL integrand not negligible at the grid boundary")
        return float(simpson(dens * (log_a - _log_normal_pdf(z, b[0], b[1])), x=z))
    log_int, boundary = renyi_log_integral(q, p, alpha, grid_halfwidth, grid_points, center, order)
    if not boundary <= 1e-12:
        raise GridTooNarrow(f"boundary integrand ratio {boundary:.3g} exceeds 1e-12")
    return float(log_int / (alpha - 1.0))


def weighted_stability(q, p, lam, alpha, order="paper"):
    """``lam * sum_i w_i D_alpha(q_i || p_i)`` with weights from the prior.

    ``q`` is a :class:`DiagGaussian` or a ``(mean, var)`` pair of arrays or
    tensors (the latter keeps the result differentiable).  ``p`` is the prior.
    """
    if lam < 0:
        raise ValueError("stability weight must be nonnegative")
    q_mean, q_var = (q.mean, q.var) if isinstance(q, DiagGaussian) else q
    if np.size(_values(q_mean)) != p.dim:
        raise ValueError(f"posterior has dimension {np.size(_values(q_mean))}, prior {p.dim}")
    w = stability_weights(p)
    per_dim = renyi_1d(q_mean, q_var, p.mean, p.var, alpha, order)
    return lam * (per_dim * w).sum()


def gaussian_renyi(q, p, alpha, order="paper"):
    """Full-dimensional divergence between diagonal Gaussians (sum over dims)."""
    return float(np.sum(renyi_1d(q.mean, q.var, p.mean, p.var, alpha, order)))
