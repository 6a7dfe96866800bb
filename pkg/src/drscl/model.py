"""Gaussian-latent encoder/decoder classifier.

The encoder maps an input to a diagonal Gaussian ``q(z|x)``; the decoder maps
``concat(x, z)`` (or ``z`` alone) to class logits.  Parameters live in a
:class:`~drscl.diffcore.ParamVector` with an ``"encoder"`` and a ``"decoder"``
segment, each a flat vector unpacked by a fixed layout.
"""

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .divergences import DiagGaussian
from .errors import EmptyDataset, InvalidLabel, NonFiniteActivation, NonFiniteLoss

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 3.0
AGGREGATION_RULES = ("normalized", "product")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden: tuple = (1024, 512)
    latent_dim: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.latent_dim < 1 or self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("encoder widths and latent_dim must be >= 1")
        if self.activation not in dc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class DecoderConfig:
    input_dim: int  # raw input features concatenated with z; 0 feeds z alone
    latent_dim: int = 32
    num_classes: int = 10
    hidden: tuple = (512,)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.latent_dim < 1 or self.num_classes < 1 or self.input_dim < 0 or any(
                h < 1 for h in self.hidden):
            raise ValueError("decoder widths, latent_dim and num_classes must be >= 1")
        if self.activation not in dc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class LatentPosterior:
    mean: np.ndarray
    log_sigma: np.ndarray

    @property
    def sigma(self):
        return np.exp(self.log_sigma)


@dataclass(frozen=True)
class PriorState:
    gaussian: DiagGaussian
    task_index: int = 0

    def __post_init__(self):
        if self.task_index < 0:
            raise ValueError("task_index must be >= 0")

    def to_dict(self):
        return {"gaussian": self.gaussian.to_dict(), "task_index": self.task_index}

    @classmethod
    def from_dict(cls, d):
        return cls(DiagGaussian.from_dict(d["gaussian"]), int(d["task_index"]))


def initial_prior(latent_dim):
    """The standard normal prior used before the first task."""
    return PriorState(DiagGaussian.standard(latent_dim), 0)


def propagate_prior(posterior, t):
    """Store a task's aggregated posterior as the prior for the next task."""
    return PriorState(DiagGaussian(posterior.mean.copy(), posterior.var.copy()), int(t))


def sample_latent(post, rng, deterministic=False):
    """Reparameterised draw ``z = mu + sigma * eps``; ``mu`` itself when deterministic."""
    mean = np.asarray(post.mean, dtype=np.float64)
    if deterministic:
        return mean.copy()
    return mean + np.exp(post.log_sigma) * rng.standard_normal(mean.shape)


def aggregate_gaussian(mu, log_sigma, rule="normalized"):
    """Combine per-example diagonal Gaussians ``(N, d)`` into one ``(d,)`` Gaussian.

    ``normalized`` uses the mean of the per-example precisions, ``product`` the
    sum (the literal product of densities).  In both cases the mean is the
    precision-weighted average.  Works on arrays and tensors.
    """
    precision = dc.exp(log_sigma * -2.0)
    weighted = (precision * mu).sum(axis=0) / precision.sum(axis=0)
    if rule == "normalized":
        total = precision.mean(axis=0)
    elif rule == "product":
        total = precision.sum(axis=0)
    else:
        raise ValueError(f"unknown aggregation rule {rule!r}")
    return weighted, 1.0 / total


class GaussianLatentModel:
    def __init__(self, encoder, decoder, aggregation="normalized", deterministic=False):
        if encoder.latent_dim != decoder.latent_dim:
            raise ValueError("encoder and decoder latent_dim differ")
        if aggregation not in AGGREGATION_RULES:
            raise ValueError(f"unknown aggregation rule {aggregation!r}")
        self.encoder = encoder
        self.decoder = decoder
        self.aggregation = aggregation
        self.deterministic = deterministic
        self.latent_dim = encoder.latent_dim
        self.enc_layout = self._mlp_layout(encoder.input_dim, encoder.hidden, None)
        d = encoder.latent_dim
        last = encoder.hidden[-1] if encoder.hidden else encoder.input_dim
        self.enc_layout += [("W_mu", (last, d)), ("b_mu", (d,)),
                            ("W_ls", (last, d)), ("b_ls", (d,))]
        self.dec_layout = self._mlp_layout(decoder.input_dim + d, decoder.hidden, decoder.num_classes)

    @staticmethod
    def _mlp_layout(n_in, hidden, n_out):
        layout, prev = [], n_in
        widths = list(hidden) + ([n_out] if n_out is not None else [])
        for i, width in enumerate(widths):
            layout += [(f"W{i}", (prev, width)), (f"b{i}", (width,))]
            prev = width
        return layout

    @property
    def num_classes(self):
        return self.decoder.num_classes

    # parameters -----------------------------------------------------------

    def _init_segment(self, layout, rng, activation):
        gain = 2.0 if activation == "relu" else 1.0
        parts = []
        for name, shape in layout:
            if name.startswith("b"):
                parts.append(np.zeros(shape))
                continue
            std = np.sqrt(gain / shape[0])
            if name == "W_ls":
                std *= 0.1
            parts.append(rng.normal(scale=std, size=shape).ravel())
        return np.concatenate([p.ravel() for p in parts])

    def init_params(self, rng):
        return dc.ParamVector(OrderedDict(
            encoder=self._init_segment(self.enc_layout, rng, self.encoder.activation),
            decoder=self._init_segment(self.dec_layout, rng, self.decoder.activation)))

    def zero_params(self):
        size = lambda layout: sum(int(np.prod(s)) for _, s in layout)
        return dc.ParamVector(OrderedDict(
            encoder=np.zeros(size(self.enc_layout)), decoder=np.zeros(size(self.dec_layout))))

    @staticmethod
    def _unpack(flat, layout):
        out, start = {}, 0
        for name, shape in layout:
            n = int(np.prod(shape))
            out[name] = flat[start:start + n].reshape(shape)
            start += n
        return out

    # forward passes ------------------------------------------------------

    def encoder_forward(self, x, enc, need_sigma=True):
        """Return ``(mu, log_sigma)`` tensors for inputs ``x``; ``log_sigma`` is clamped."""
        w = self._unpack(dc.as_tensor(enc), self.enc_layout)
        act = dc.ACTIVATIONS[self.encoder.activation]
        h = dc.as_tensor(x)
        for i in range(len(self.encoder.hidden)):
            h = act(h @ w[f"W{i}"] + w[f"b{i}"])
        mu = h @ w["W_mu"] + w["b_mu"]
        log_sigma = None
        if need_sigma:
            log_sigma = dc.clip(h @ w["W_ls"] + w["b_ls"], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def decoder_logits(self, x, z, dec):
        w = self._unpack(dc.as_tensor(dec), self.dec_layout)
        act = dc.ACTIVATIONS[self.decoder.activation]
        h = dc.concat([dc.as_tensor(x), z], axis=1) if self.decoder.input_dim else dc.as_tensor(z)
        n_layers = len(self.decoder.hidden) + 1
        for i in range(n_layers):
            h = h @ w[f"W{i}"] + w[f"b{i}"]
            if i < n_layers - 1:
                h = act(h)
        return h

    def decoder_features(self, x):
        """The raw-input part of the decoder input (empty when latent-only)."""
        return x if self.decoder.input_dim else x[:, :0]

    def encode(self, x, phi):
        """Per-example posterior ``q(z|x)`` as arrays."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.encoder.input_dim:
            raise ValueError(f"input has {x.shape[1]} features, encoder expects {self.encoder.input_dim}")
        mu, log_sigma = self.encoder_forward(x, phi)
        if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_sigma.data))):
            raise NonFiniteActivation("encoder produced non-finite output")
        return LatentPosterior(mu.data, log_sigma.data)

    def draw_noise(self, n, mc_samples, rng):
        """Standard-normal noise for the reparameterisation, or ``None`` if deterministic."""
        if self.deterministic:
            return None
        return rng.standard_normal((mc_samples, n, self.latent_dim))

    def task_loss_tensor(self, tensors, x, y, noise):
        """Mean negative log-likelihood over examples and noise draws."""
        mu, log_sigma = self.encoder_forward(x, tensors["encoder"], need_sigma=noise is not None)
        if noise is None:
            z, feats, labels = mu, x, y
        else:
            mc, n, d = noise.shape
            z = (mu + dc.exp(log_sigma) * noise).reshape(mc * n, d)
            feats, labels = np.tile(x, (mc, 1)), np.tile(y, mc)
        logits = self.decoder_logits(self.decoder_features(feats), z, tensors["decoder"])
        logp = dc.log_softmax(logits, axis=1)
        return -logp[np.arange(labels.size), labels].mean()

    def _check_labels(self, y):
        y = np.asarray(y)
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise InvalidLabel(f"labels must lie in [0, {self.num_classes})")

    def decode_loglik(self, z, x, y, theta):
        """``log p(y | x, z)`` per example (scalar for a single example)."""
        single = np.ndim(z) == 1
        z, x = np.atleast_2d(z), np.atleast_2d(x)
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        self._check_labels(y)
        logits = self.decoder_logits(self.decoder_features(x), dc.Tensor(z), theta).data
        logp = dc.log_softmax(dc.Tensor(logits)).data[np.arange(y.size), y]
        return float(logp[0]) if single else logp

    def task_loss_f(self, batch, phi, theta, mc_samples=1, rng=None):
        """Monte-Carlo estimate of the mean negative expected log-likelihood."""
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self._check_labels(batch.y)
        rng = np.random.default_rng() if rng is None else rng
        noise = self.draw_noise(len(batch.y), mc_samples, rng)
        tensors = {"encoder": dc.Tensor(phi), "decoder": dc.Tensor(theta)}
        value = self.task_loss_tensor(tensors, batch.x, batch.y, noise).item()
        if not np.isfinite(value):
            raise NonFiniteLoss(f"task loss evaluated to {value}")
        return value

    def predict_proba(self, x, params, mc_samples, rng):
        """Class probabilities averaged over ``mc_samples`` latent draws."""
        mu, log_sigma = self.encoder_forward(x, params["encoder"], need_sigma=not self.deterministic)
        feats = self.decoder_features(x)
        draws = 1 if self.deterministic else mc_samples
        probs = np.zeros((x.shape[0], self.num_classes))
        for _ in range(draws):
            z = mu.data if self.deterministic else (
                mu.data + np.exp(log_sigma.data) * rng.standard_normal(mu.shape))
            logits = self.decoder_logits(feats, dc.Tensor(z), params["decoder"]).data
            probs += np.exp(dc.log_softmax(dc.Tensor(logits)).data)
        return probs / draws

    def accuracy(self, split, params, mc_samples, rng):
        if len(split) == 0:
            raise EmptyDataset("cannot evaluate on an empty split")
        probs = self.predict_proba(split.x, params, mc_samples, rng)
        return float(np.mean(np.argmax(probs, axis=1) == split.y))

    def aggregate_posterior(self, x, phi):
        """Dataset-level diagonal Gaussian from per-example encoder outputs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise EmptyDataset("cannot aggregate over an empty dataset")
        post = self.encode(x, phi)
        mean, var = aggregate_gaussian(post.mean, post.log_sigma, self.aggregation)
        return DiagGaussian(mean, var)


# checkpoints --------------------------------------------------------------


def save_checkpoint(path, params, prior, seed, task_index, extra=None):
    """Write a JSON checkpoint; float64 values round-trip exactly."""
    doc = {
        "encoder": params["encoder"].tolist(),
        "decoder": params["decoder"].tolist(),
        "prior": prior.to_dict(),
        "seed": int(seed),
        "task_index": int(task_index),
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    params = dc.ParamVector(OrderedDict(
        encoder=np.asarray(doc["encoder"], dtype=np.float64),
        decoder=np.asarray(doc["decoder"], dtype=np.float64)))
    return {
        "params": params,
        "prior": PriorState.from_dict(doc["prior"]),
        "seed": doc["seed"],
        "task_index": doc["task_index"],
        "extra": doc.get("extra", {}),
    }
