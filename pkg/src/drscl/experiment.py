"""Run configuration and the continual-learning task loop.

A run trains one method over a task stream, evaluating every seen task after
each one and propagating the aggregated posterior as the next prior.  All
randomness comes from ``np.random.default_rng([seed, task, purpose])`` so a
(config, seed) pair fixes every emitted number, including after ``--resume``.
"""

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import metrics as mt
from .divergences import DiagGaussian, stability_weights
from .drs import (DrsConfig, DrsDiagnostics, NeuralObjective, drs_solve_task,
                  write_diagnostics_csv)
from .errors import ConfigError, DrsclError, RenyiUndefined
from .model import (DecoderConfig, EncoderConfig, GaussianLatentModel, initial_prior,
                    load_checkpoint, propagate_prior, save_checkpoint)
from .tasks import load_dataset, make_joint_stream, make_split_stream, synth_gaussian_tasks

log = logging.getLogger(__name__)

METHODS = ("drs_rd", "sgd_lh", "sgd_kl", "sgd_rd")
SWEEP_AXES = ("alpha", "lambda_stab", "gamma", "lambda_r")
PLOT_COLUMNS = ("method", "seed", "task", "metric", "value")
PLOT_METRICS = ("final_accuracy", "diagonal_accuracy", "forgetting")
DRS_ONLY = ("gamma", "lambda_r", "inner_steps_g", "g_data")

# rng purposes
INIT, TRAIN, EVAL = 0, 1, 2


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "split"  # split | joint | synthetic
    dataset: str = "digits"
    n_tasks: int = 5
    classes_per_task: int = 2
    shift_kind: str = "pixel-permutation"
    seed: int = 0
    test_fraction: float = 0.2
    max_train_per_task: int = None
    max_test_per_task: int = None
    data_dir: str = None
    # synthetic streams
    dim: int = 32
    num_classes: int = 4
    coherence: float = 1.0

    def __post_init__(self):
        if self.kind not in ("split", "joint", "synthetic"):
            raise ConfigError(f"stream.kind must be split, joint or synthetic, got {self.kind!r}")
        if self.n_tasks < 1:
            raise ConfigError("stream.n_tasks must be >= 1")


@dataclass(frozen=True)
class ModelSpec:
    encoder_hidden: tuple = (64,)
    decoder_hidden: tuple = (32,)
    latent_dim: int = 8
    activation: str = "tanh"
    decoder_input: str = "concat"  # concat | latent
    aggregation: str = "normalized"
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(self.decoder_hidden))
        if self.decoder_input not in ("concat", "latent"):
            raise ConfigError("model.decoder_input must be 'concat' or 'latent'")


@dataclass(frozen=True)
class RunConfig:
    method: str = "drs_rd"
    stream: StreamSpec = field(default_factory=StreamSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    drs: DrsConfig = field(default_factory=DrsConfig)
    seeds: tuple = (0,)
    out_dir: str = "out"
    eval_mc_samples: int = 16
    interval_block: int = None
    checkpoint: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.eval_mc_samples < 1:
            raise ConfigError("eval_mc_samples must be >= 1")
        if self.method.startswith("sgd"):
            changed = [k for k in DRS_ONLY if getattr(self.drs, k) != getattr(DrsConfig(), k)]
            if changed:
                warnings.warn(f"{self.method} ignores DRS-only fields {changed}", stacklevel=3)

    def to_dict(self):
        d = asdict(self)
        for part in ("model",):
            for k, v in d[part].items():
                if isinstance(v, tuple):
                    d[part][k] = list(v)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        nested = {"stream": StreamSpec, "model": ModelSpec, "drs": DrsConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in nested:
                if not isinstance(v, dict):
                    raise ConfigError(f"{k} must be an object")
                sub = {f.name for f in fields(nested[k])}
                bad = set(v) - sub
                if bad:
                    raise ConfigError(f"unknown keys in {k}: {sorted(bad)}")
                try:
                    kwargs[k] = nested[k](**v)
                except TypeError as exc:
                    raise ConfigError(str(exc)) from exc
            else:
                kwargs[k] = v
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def with_drs(self, **changes):
        return replace(self, drs=replace(self.drs, **changes))


@dataclass
class RunRecord:
    config: dict
    seed: int
    out_dir: str
    accuracy: list = field(default_factory=list)
    report: dict = None
    diagnostics_csv: str = None
    files: list = field(default_factory=list)
    wall_seconds: dict = field(default_factory=dict)
    train_steps: int = 0
    penalty_events: int = 0
    residuals: list = field(default_factory=list)  # per task, per outer iteration
    failed: str = None

    @property
    def matrix(self):
        return mt.AccuracyMatrix.from_array(np.array(self.accuracy, dtype=np.float64))

    @property
    def seconds_per_step(self):
        return self.wall_seconds.get("train", 0.0) / max(self.train_steps, 1)

    def to_dict(self):
        return asdict(self)


# construction -------------------------------------------------------------


def build_stream(spec):
    if spec.kind == "synthetic":
        return synth_gaussian_tasks(spec.dim, spec.n_tasks, spec.num_classes, spec.coherence,
                                    spec.seed)
    ds = load_dataset(spec.dataset, cache_dir=spec.data_dir)
    if spec.kind == "split":
        return make_split_stream(ds, spec.n_tasks, spec.classes_per_task, spec.seed,
                                 spec.test_fraction, spec.max_train_per_task,
                                 spec.max_test_per_task).validate()
    return make_joint_stream(ds, spec.n_tasks, spec.shift_kind, spec.seed, spec.test_fraction,
                             spec.max_train_per_task, spec.max_test_per_task)


def build_model(spec, input_dim, num_classes):
    enc = EncoderConfig(input_dim, spec.encoder_hidden, spec.latent_dim, spec.activation)
    dec = DecoderConfig(input_dim if spec.decoder_input == "concat" else 0, spec.latent_dim,
                        num_classes, spec.decoder_hidden, spec.activation)
    return GaussianLatentModel(enc, dec, spec.aggregation, spec.deterministic)


def method_drs_config(config):
    """The DrsConfig actually used by ``config.method``."""
    cfg = config.drs
    if config.method == "sgd_lh":
        cfg = replace(cfg, lambda_stab=0.0)
    elif config.method == "sgd_kl":
        cfg = replace(cfg, alpha=1.0)
    return cfg


# plain-gradient baselines -------------------------------------------------


def sgd_solve_task(init, objective, cfg, rng):
    """``outer_iters * inner_steps_f`` Adam steps on ``f + g`` (``g`` off for ``sgd_lh``).

    Where the Renyi term is undefined it acts as a constant penalty, so the
    step follows the gradient of ``f`` alone; such steps are counted.
    """
    params = init
    state = dc.AdamState.fresh(init, cfg.inner_lr)
    steps = cfg.outer_iters * cfg.inner_steps_f
    for _ in range(steps):
        idx = objective.f_batch(rng)
        noise = objective.draw_noise(rng, idx)
        g_idx = objective.g_batch(rng) if objective.use_stability else None
        try:
            _, grad = dc.forward_backward(
                lambda t, _: objective.loss_tensor(t, idx, noise, g_idx), params, None)
        except RenyiUndefined:
            objective.penalty_events += 1
            _, grad = dc.forward_backward(
                lambda t, _: objective.f_tensor(t, idx, noise), params, None)
        params, state = dc.adam_step(params, grad, state)
    return params, steps


# the task loop ------------------------------------------------------------


def _rng(seed, task, purpose):
    return np.random.default_rng([seed, task, purpose])


def evaluate_row(model, stream, params, t, seed, mc_samples):
    return [model.accuracy(stream.tasks[j].test, params, mc_samples, _rng(seed, 1000 * t + j, EVAL))
            for j in range(t + 1)]


def _checkpoint_path(out, t):
    return Path(out) / "checkpoints" / f"task_{t + 1}.json"


def _latest_checkpoint(out, n_tasks):
    for t in reversed(range(n_tasks)):
        p = _checkpoint_path(out, t)
        if p.exists():
            return t, p
    return None, None


def run_continual(config, seed=None, out_dir=None, resume=False, stream=None):
    """Train ``config.method`` over the stream for one seed; returns a :class:`RunRecord`.

    Artifacts in ``out_dir`` (default ``<config.out_dir>/seed_<seed>``):
    ``config.json``, ``accuracy_matrix.csv``, ``metrics.json``,
    ``diagnostics.csv`` (DRS only), ``checkpoints/`` and ``run_record.json``.
    On error a ``FAILED`` marker and a partial record are written before
    re-raising.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    out = Path(out_dir or Path(config.out_dir) / f"seed_{seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    record = RunRecord(config=config.to_dict(), seed=seed, out_dir=str(out))
    (out / "config.json").write_text(json.dumps(record.config, indent=2))
    record.files.append(str(out / "config.json"))
    try:
        _run(config, seed, out, resume, stream, record)
    except DrsclError as exc:
        record.failed = f"{type(exc).__name__}: {exc}"
        (out / "FAILED").write_text(record.failed + "\n")
        _write_record(out, record)
        raise
    return record


def _write_record(out, record):
    path = out / "run_record.json"
    if str(path) not in record.files:
        record.files.append(str(path))
    path.write_text(json.dumps(record.to_dict(), indent=2, allow_nan=True))


def _run(config, seed, out, resume, stream, record):
    t_start = time.perf_counter()
    stream = build_stream(config.stream) if stream is None else stream
    T = len(stream)
    model = build_model(config.model, stream.input_dim, stream.num_classes)
    cfg = method_drs_config(config)
    A = mt.AccuracyMatrix(T)
    params = model.init_params(_rng(seed, 0, INIT))
    prior = initial_prior(model.latent_dim)
    posteriors, diagnostics = [], []
    start = 0
    record.wall_seconds = {"setup": 0.0, "train": 0.0, "eval": 0.0}
    if resume:
        t_done, path = _latest_checkpoint(out, T)
        if path is not None:
            ck = load_checkpoint(path)
            params, prior = ck["params"], ck["prior"]
            extra = ck["extra"]
            saved = np.array(extra["accuracy"], dtype=np.float64)
            saved[saved < 0] = np.nan
            A = mt.AccuracyMatrix.from_array(saved)
            posteriors = [DiagGaussian.from_dict(d) for d in extra["posteriors"]]
            diagnostics = [DrsDiagnostics(**d) for d in extra["diagnostics"]]
            record.train_steps = extra["train_steps"]
            record.penalty_events = extra["penalty_events"]
            record.residuals = extra["residuals"]
            record.wall_seconds = extra["wall_seconds"]
            start = t_done + 1
            log.info("resuming seed %d after task %d", seed, start)
    record.wall_seconds["setup"] += time.perf_counter() - t_start
    for t in range(start, T):
        task = stream.tasks[t]
        t0 = time.perf_counter()
        objective = NeuralObjective(model, task.train, prior, cfg,
                                    use_stability=config.method != "sgd_lh",
                                    probe_seed=int(_rng(seed, t, TRAIN).integers(2**31)))
        rng = _rng(seed, t, TRAIN)
        if config.method == "drs_rd":
            params, diag = drs_solve_task(params, objective, cfg, rng, task_id=t + 1)
            diagnostics.append(diag)
            record.residuals.append(list(diag.residual))
            record.train_steps += diag.iterations * cfg.inner_steps_f
        else:
            params, steps = sgd_solve_task(params, objective, cfg, rng)
            record.train_steps += steps
        record.penalty_events += objective.penalty_events
        t1 = time.perf_counter()
        A.set_row(t, evaluate_row(model, stream, params, t, seed, config.eval_mc_samples))
        posterior = model.aggregate_posterior(task.train.x, params["encoder"])
        posteriors.append(posterior)
        prior = propagate_prior(posterior, t + 1)
        t2 = time.perf_counter()
        record.wall_seconds["train"] += t1 - t0
        record.wall_seconds["eval"] += t2 - t1
        if config.checkpoint:
            extra = {"accuracy": np.nan_to_num(A.A, nan=-1.0).tolist(),
                     "posteriors": [p.to_dict() for p in posteriors],
                     "train_steps": record.train_steps, "penalty_events": record.penalty_events,
                     "residuals": record.residuals, "wall_seconds": record.wall_seconds,
                     "diagnostics": [asdict(d) for d in diagnostics]}
            save_checkpoint(_checkpoint_path(out, t), params, prior, seed, t, extra)
    record.accuracy = A.A.tolist()
    _emit(config, out, A, posteriors, diagnostics, cfg, record)
    _write_record(out, record)


def _emit(config, out, A, posteriors, diagnostics, cfg, record):
    matrix_path = A.to_csv(out / "accuracy_matrix.csv")
    # the bound is monitored between learned posteriors of consecutive tasks
    drift = mt.posterior_drift(posteriors)
    weights = stability_weights(posteriors[0]) if posteriors else np.ones(1)
    lam = cfg.lambda_stab if config.method != "sgd_lh" else config.drs.lambda_stab
    report = mt.build_report(A.A, block=config.interval_block, drift=drift, lambda_stab=lam,
                             weights=weights)
    report.to_json(out / "metrics.json")
    record.report = report.to_dict()
    record.files += [str(matrix_path), str(out / "metrics.json")]
    if diagnostics:
        write_diagnostics_csv(out / "diagnostics.csv", diagnostics)
        record.diagnostics_csv = str(out / "diagnostics.csv")
        record.files.append(record.diagnostics_csv)


# baselines, sweeps and plot data ------------------------------------------


def run_baseline_singles(config, seed=None, stream=None):
    """Accuracy of a freshly initialised model trained on each task alone.

    Uses the method and budget of ``config`` with the prior reset to N(0, I),
    and the same per-task RNG streams as the continual run.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    stream = build_stream(config.stream) if stream is None else stream
    model = build_model(config.model, stream.input_dim, stream.num_classes)
    cfg = method_drs_config(config)
    out = []
    for t, task in enumerate(stream.tasks):
        params = model.init_params(_rng(seed, 0, INIT))
        objective = NeuralObjective(model, task.train, initial_prior(model.latent_dim), cfg,
                                    use_stability=config.method != "sgd_lh",
                                    probe_seed=int(_rng(seed, t, TRAIN).integers(2**31)))
        rng = _rng(seed, t, TRAIN)
        if config.method == "drs_rd":
            params, _ = drs_solve_task(params, objective, cfg, rng, task_id=t + 1)
        else:
            params, _ = sgd_solve_task(params, objective, cfg, rng)
        out.append(model.accuracy(task.test, params, config.eval_mc_samples,
                                  _rng(seed, 1000 * t + t, EVAL)))
    return np.array(out)


def sweep(config, axis, values, out_dir=None):
    """One run per value per seed; writes ``sweep_<axis>.csv`` with mean/std ACC."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    root = Path(out_dir or config.out_dir)
    stream = build_stream(config.stream)
    records, rows = [], []
    for value in values:
        try:
            cfg_v = config.with_drs(**{axis: float(value)})
        except ConfigError as exc:
            log.warning("skipping %s=%s: %s", axis, value, exc)
            rows.append((value, math.nan, math.nan, 0))
            continue
        accs = []
        for seed in config.seeds:
            try:
                rec = run_continual(cfg_v, seed, root / f"{axis}_{value}" / f"seed_{seed}",
                                    stream=stream)
            except DrsclError as exc:
                log.warning("%s=%s seed %d failed: %s", axis, value, seed, exc)
                continue
            records.append(rec)
            accs.append(rec.report["acc"])
        rows.append((value, float(np.mean(accs)) if accs else math.nan,
                     float(np.std(accs)) if accs else math.nan, len(accs)))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / f"sweep_{axis}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("value", "mean_acc", "std_acc", "n_seeds"))
        for r in rows:
            writer.writerow((r[0], repr(r[1]), repr(r[2]), r[3]))
    return records


def plot_rows(records):
    """Long-format rows ``(method, seed, task, metric, value)``; T rows per metric per record."""
    rows = []
    for rec in records:
        A = np.array(rec.accuracy, dtype=np.float64)
        T = A.shape[0]
        F = A.diagonal() - A[-1]  # zero for the last task
        for metric, vals in zip(PLOT_METRICS, (A[-1], A.diagonal(), F)):
            for j in range(T):
                rows.append((rec.config["method"], rec.seed, j + 1, metric, float(vals[j])))
    return rows


def emit_plotdata(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        for row in plot_rows(records):
            writer.writerow(row[:4] + (repr(row[4]),))
    return path


def load_record(run_dir):
    d = json.loads((Path(run_dir) / "run_record.json").read_text())
    return RunRecord(**d)
