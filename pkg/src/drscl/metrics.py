"""Continual-learning metrics computed from an accuracy matrix.

``A[i, j]`` is the test accuracy on task ``j`` after training through task
``i``; entries with ``j > i`` are NaN.  Forgetting for task ``j`` is
``A[j, j] - A[T-1, j]`` and is reported for the ``T - 1`` tasks that were
followed by further training, so ``bwt(A) == -mean(forgetting(A))`` holds
exactly.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .divergences import gaussian_renyi
from .errors import IncompleteMatrix, MissingBaseline, SingleTask


class AccuracyMatrix:
    """Lower-triangular ``T x T`` accuracy table filled row by row."""

    def __init__(self, n_tasks):
        if n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        self.A = np.full((n_tasks, n_tasks), np.nan)

    @property
    def n_tasks(self):
        return self.A.shape[0]

    @classmethod
    def from_array(cls, A):
        A = np.array(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("accuracy matrix must be square")
        out = cls(A.shape[0])
        lower = np.tril(np.ones_like(A, dtype=bool))
        out.A[lower] = A[lower]
        return out

    def set_row(self, i, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (i + 1,):
            raise ValueError(f"row {i} needs {i + 1} entries, got {values.shape}")
        if np.any((values < 0) | (values > 1)):
            raise ValueError("accuracies must lie in [0, 1]")
        self.A[i, :i + 1] = values

    def rows_done(self):
        """Number of leading rows whose lower-triangular part is filled."""
        n = 0
        for i in range(self.n_tasks):
            if np.any(np.isnan(self.A[i, :i + 1])):
                break
            n += 1
        return n

    def to_csv(self, path):
        """CSV with a ``task_1..task_T`` header row and a row label column; blanks above the diagonal."""
        T = self.n_tasks
        names = [f"task_{k + 1}" for k in range(T)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["after"] + names)
            for i in range(T):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in self.A[i]]
                writer.writerow([names[i]] + cells)
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        T = len(rows) - 1
        out = cls(T)
        for i, row in enumerate(rows[1:]):
            out.A[i] = [float(c) if c else np.nan for c in row[1:]]
        return out


def _matrix(A):
    return A.A if isinstance(A, AccuracyMatrix) else np.asarray(A, dtype=np.float64)


def _final_row(A):
    A = _matrix(A)
    last = A[-1]
    if np.any(np.isnan(last)) or np.any(np.isnan(np.diag(A))):
        raise IncompleteMatrix("final row and diagonal of the accuracy matrix must be filled")
    return A, last


def acc(A):
    """Mean accuracy over all tasks after the last one."""
    _, last = _final_row(A)
    return float(np.mean(last))


def forgetting(A):
    """``F_j = A[j, j] - A[T-1, j]`` for ``j = 0 .. T-2``."""
    A, last = _final_row(A)
    T = A.shape[0]
    return np.array([A[j, j] - last[j] for j in range(T - 1)])


def bwt(A):
    """Average change on earlier tasks between learning them and the end of the stream."""
    A = _matrix(A)
    if A.shape[0] < 2:
        raise SingleTask("backward transfer needs at least two tasks")
    # written as -(diag - final) so it is the exact negation of mean(forgetting)
    return float(-np.mean(forgetting(A)))


def fwt(A, baseline):
    """Average head start over independently trained single-task models, tasks 2..T."""
    A = _matrix(A)
    T = A.shape[0]
    if T < 2:
        raise SingleTask("forward transfer needs at least two tasks")
    if baseline is None:
        raise MissingBaseline("forward transfer needs single-task baselines")
    b = np.asarray(baseline, dtype=np.float64)
    if b.shape != (T,) or np.any(np.isnan(b[1:])):
        raise MissingBaseline(f"need {T} baselines, got shape {b.shape}")
    diag = np.diag(A)
    if np.any(np.isnan(diag)):
        raise IncompleteMatrix("diagonal must be filled")
    return float(np.mean(diag[1:] - b[1:]))


def interval_forgetting(F, block):
    """Mean forgetting over consecutive blocks of ``block`` tasks; the last may be shorter."""
    if block < 1:
        raise ValueError("block must be >= 1")
    F = np.asarray(F, dtype=np.float64)
    return np.array([F[s:s + block].mean() for s in range(0, F.size, block)])


def forgetting_bound(lambda_stab, weights):
    """Right-hand side ``(1/lambda) * sum(w)``."""
    if not lambda_stab > 0:
        return math.inf
    return float(np.sum(weights)) / lambda_stab


def forgetting_bound_check(div_history, lambda_stab, weights):
    """Count transitions whose divergence exceeds ``(1/lambda) * sum(w)``."""
    bound = forgetting_bound(lambda_stab, weights)
    return int(sum(1 for d in div_history if d > bound))


def posterior_drift(posteriors):
    """``D_0.5(q^(t-1) || q^t)`` between consecutive aggregated posteriors, summed over dims."""
    return [gaussian_renyi(posteriors[t - 1], posteriors[t], 0.5)
            for t in range(1, len(posteriors))]


@dataclass
class MetricsReport:
    acc: float
    bwt: float = None
    fwt: float = None
    per_task_forgetting: list = field(default_factory=list)
    interval_forgetting: list = field(default_factory=list)
    bound_violations: int = 0
    bound_transitions: int = 0
    bound_value: float = None
    drift: list = field(default_factory=list)

    @property
    def violation_rate(self):
        return self.bound_violations / self.bound_transitions if self.bound_transitions else 0.0

    def to_dict(self):
        d = asdict(self)
        d["violation_rate"] = self.violation_rate
        return d

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))
        return path

    @classmethod
    def from_json(cls, path):
        d = json.loads(Path(path).read_text())
        d.pop("violation_rate", None)
        return cls(**d)


def build_report(A, baseline=None, block=None, drift=None, lambda_stab=None, weights=None):
    """Collect every metric that the inputs allow into a :class:`MetricsReport`."""
    T = _matrix(A).shape[0]
    F = forgetting(A)
    report = MetricsReport(acc=acc(A), per_task_forgetting=F.tolist())
    if T >= 2:
        report.bwt = bwt(A)
        report.interval_forgetting = interval_forgetting(F, block or T).tolist()
        if baseline is not None:
            report.fwt = fwt(A, baseline)
    if drift is not None and lambda_stab is not None:
        w = np.ones(1) if weights is None else weights
        report.drift = [float(d) for d in drift]
        report.bound_value = forgetting_bound(lambda_stab, w)
        report.bound_transitions = len(drift)
        report.bound_violations = forgetting_bound_check(drift, lambda_stab, w)
    return report
