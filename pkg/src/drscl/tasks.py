"""Task streams: split-class and shared-label regimes, loaders and batching."""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, InsufficientClasses, InvalidShift, TruncatedFile

DATA_DIR_ENV = "DRSCL_DATA_DIR"
SHIFT_KINDS = ("rotation", "pixel-permutation", "noise-level")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    image_shape: tuple = None
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise CountMismatch(f"{x.shape[0]} inputs vs {y.shape[0]} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.size


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray = None  # row indices into the source dataset

    def __len__(self):
        return self.y.size

    def subset(self, idx):
        return Split(self.x[idx], self.y[idx], None if self.index is None else self.index[idx])


@dataclass(frozen=True)
class Task:
    train: Split
    test: Split
    classes: tuple
    transform: str = "identity"


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple
    regime: str
    num_classes: int  # width of the shared classification head
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    @property
    def label_map(self):
        return [t.classes for t in self.tasks]

    @property
    def input_dim(self):
        return self.tasks[0].train.x.shape[1]

    def validate(self):
        """Check the regime invariant; raises ``ValueError`` on violation."""
        sets = [set(c) for c in self.label_map]
        if self.regime == "disjoint":
            for i in range(len(sets)):
                for j in range(i + 1, len(sets)):
                    if sets[i] & sets[j]:
                        raise ValueError(f"tasks {i} and {j} share classes")
        elif self.regime == "joint":
            if any(s != sets[0] for s in sets):
                raise ValueError("joint stream tasks must share one label space")
        else:
            raise ValueError(f"unknown regime {self.regime!r}")
        for task in self.tasks:
            for split in (task.train, task.test):
                if split.y.size and (split.y.min() < 0 or split.y.max() >= self.num_classes):
                    raise ValueError("label outside the head range")
        return self


def _train_test(idx, rng, test_fraction, max_train=None, max_test=None):
    idx = rng.permutation(idx)
    n_test = int(round(test_fraction * idx.size))
    test, train = idx[:n_test], idx[n_test:]
    if max_train is not None:
        train = train[:max_train]
    if max_test is not None:
        test = test[:max_test]
    return np.sort(train), np.sort(test)


def make_split_stream(dataset, n_tasks, classes_per_task, seed, test_fraction=0.2,
                      max_train_per_task=None, max_test_per_task=None):
    """Partition the classes of ``dataset`` into ``n_tasks`` disjoint tasks.

    Labels are remapped to local indices ``0..classes_per_task-1`` in the
    order of each task's (sorted) class tuple.
    """
    if n_tasks < 1 or classes_per_task < 1:
        raise InsufficientClasses("need at least one task and one class per task")
    if n_tasks * classes_per_task > dataset.num_classes:
        raise InsufficientClasses(
            f"{n_tasks} x {classes_per_task} classes requested, dataset has {dataset.num_classes}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.num_classes)
    tasks = []
    for t in range(n_tasks):
        classes = tuple(int(c) for c in np.sort(order[t * classes_per_task:(t + 1) * classes_per_task]))
        idx = np.flatnonzero(np.isin(dataset.y, classes))
        train, test = _train_test(idx, rng, test_fraction, max_train_per_task, max_test_per_task)
        local = np.full(dataset.num_classes, -1, dtype=np.int64)
        local[list(classes)] = np.arange(classes_per_task)
        tasks.append(Task(
            train=Split(dataset.x[train], local[dataset.y[train]], train),
            test=Split(dataset.x[test], local[dataset.y[test]], test),
            classes=classes))
    return TaskStream(tuple(tasks), "disjoint", classes_per_task).validate()


def apply_shift(x, kind, param, image_shape=None):
    """Apply one fixed task transformation to a batch of flattened inputs."""
    if kind == "identity" or param is None:
        return x.copy()
    if kind == "rotation":
        if image_shape is None:
            raise InvalidShift("rotation needs image-shaped features")
        from scipy.ndimage import rotate
        imgs = x.reshape((-1,) + tuple(image_shape))
        out = rotate(imgs, float(param), axes=(1, 2), reshape=False, order=1, mode="constant")
        return out.reshape(x.shape)
    if kind == "pixel-permutation":
        return x[:, param]
    if kind == "noise-level":
        sigma, noise_seed = param
        noise = np.random.default_rng(noise_seed).normal(size=x.shape)
        return x + sigma * noise
    raise InvalidShift(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")


def make_joint_stream(dataset, n_tasks, shift_kind, seed, test_fraction=0.2, max_train_per_task=None,
                      max_test_per_task=None, max_angle=90.0, max_noise=0.5):
    """Shared-label stream: every task sees all classes under its own input shift.

    Task 0 is the identity.  Transforms are fixed per task and always applied to
    the raw inputs, never composed across tasks.  All tasks use the same
    train/test partition of the raw examples.
    """
    if shift_kind not in SHIFT_KINDS:
        raise InvalidShift(f"unknown shift kind {shift_kind!r}; expected one of {SHIFT_KINDS}")
    if shift_kind == "rotation" and dataset.image_shape is None:
        raise InvalidShift("rotation needs image-shaped features")
    if n_tasks < 1:
        raise InvalidShift("need at least one task")
    rng = np.random.default_rng(seed)
    train, test = _train_test(np.arange(len(dataset)), rng, test_fraction,
                              max_train_per_task, max_test_per_task)
    classes = tuple(range(dataset.num_classes))
    tasks = []
    for t in range(n_tasks):
        if t == 0:
            param, label = None, "identity"
        elif shift_kind == "rotation":
            param = float(rng.uniform(-max_angle, max_angle))
            label = f"rotation({param:.3f})"
        elif shift_kind == "pixel-permutation":
            param = rng.permutation(dataset.x.shape[1])
            label = "pixel-permutation"
        else:
            param = (max_noise * t / max(n_tasks - 1, 1), int(rng.integers(2**31)))
            label = f"noise-level({param[0]:.3f})"
        kind = "identity" if param is None else shift_kind
        tasks.append(Task(
            train=Split(apply_shift(dataset.x[train], kind, param, dataset.image_shape),
                        dataset.y[train], train),
            test=Split(apply_shift(dataset.x[test], kind, param, dataset.image_shape),
                       dataset.y[test], test),
            classes=classes, transform=label))
    return TaskStream(tuple(tasks), "joint", dataset.num_classes).validate()


def synth_gaussian_tasks(d, n_tasks, classes, coherence, seed, n_train_per_class=100,
                         n_test_per_class=50, separation=3.0):
    """Gaussian-mixture classification tasks sharing one label space.

    Class means for task ``t`` are ``sqrt(c) * shared + sqrt(1 - c) * own_t``
    with both parts drawn from ``N(0, separation^2 / d * I)``; inputs add unit
    isotropic noise.  ``coherence=1`` gives identical tasks, ``0`` independent
    ones.
    """
    if d < 2:
        raise ValueError("synthetic tasks need d >= 2")
    if not 0.0 <= coherence <= 1.0:
        raise ValueError("coherence must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    scale = separation / np.sqrt(d)
    shared = rng.normal(scale=scale, size=(classes, d))
    means = np.empty((n_tasks, classes, d))
    tasks = []
    for t in range(n_tasks):
        own = rng.normal(scale=scale, size=(classes, d))
        means[t] = np.sqrt(coherence) * shared + np.sqrt(1.0 - coherence) * own
        splits = []
        for n in (n_train_per_class, n_test_per_class):
            y = np.repeat(np.arange(classes), n)
            x = means[t][y] + rng.normal(size=(y.size, d))
            perm = rng.permutation(y.size)
            splits.append(Split(x[perm], y[perm]))
        tasks.append(Task(splits[0], splits[1], tuple(range(classes)), f"gaussian-task-{t}"))
    return TaskStream(tuple(tasks), "joint", classes, {"class_means": means}).validate()


# loaders ------------------------------------------------------------------


def data_dir(override=None):
    """Dataset cache directory: explicit override, then ``$DRSCL_DATA_DIR``."""
    path = override or os.environ.get(DATA_DIR_ENV) or Path.home() / ".cache" / "drscl"
    return Path(path)


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair (optionally gzipped) into a :class:`Dataset`."""
    raw_img = _read_bytes(images_path)
    raw_lbl = _read_bytes(labels_path)
    if len(raw_img) < 4 or len(raw_lbl) < 4:
        raise TruncatedFile("file shorter than its magic number")
    (magic_img,) = struct.unpack(">I", raw_img[:4])
    (magic_lbl,) = struct.unpack(">I", raw_lbl[:4])
    if magic_img != IMAGES_MAGIC:
        raise BadMagic(f"images magic {magic_img:#010x}, expected {IMAGES_MAGIC:#010x}")
    if magic_lbl != LABELS_MAGIC:
        raise BadMagic(f"labels magic {magic_lbl:#010x}, expected {LABELS_MAGIC:#010x}")
    if len(raw_img) < 16 or len(raw_lbl) < 8:
        raise TruncatedFile("IDX header is incomplete")
    n_img, rows, cols = struct.unpack(">III", raw_img[4:16])
    (n_lbl,) = struct.unpack(">I", raw_lbl[4:8])
    if n_img != n_lbl:
        raise CountMismatch(f"{n_img} images vs {n_lbl} labels")
    need = n_img * rows * cols
    if len(raw_img) - 16 < need or len(raw_lbl) - 8 < n_lbl:
        raise TruncatedFile("IDX payload shorter than its header declares")
    pixels = np.frombuffer(raw_img, dtype=np.uint8, count=need, offset=16)
    labels = np.frombuffer(raw_lbl, dtype=np.uint8, count=n_lbl, offset=8)
    x = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if n_lbl else 0
    return Dataset(x, labels.astype(np.int64), num_classes, (rows, cols), Path(images_path).name)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


def load_digits_dataset():
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits
    bunch = load_digits()
    return Dataset(bunch.data / 16.0, bunch.target, 10, (8, 8), "digits")


_IDX_NAMES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "mnist-test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "emnist-letters": ("emnist-letters-train-images-idx3-ubyte",
                       "emnist-letters-train-labels-idx1-ubyte"),
}


def find_idx_pair(name, cache_dir=None):
    """Locate a known IDX pair (plain or ``.gz``) in the cache directory."""
    root = data_dir(cache_dir)
    found = []
    for stem in _IDX_NAMES[name]:
        for candidate in (root / stem, root / (stem + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {root}")
    return tuple(found)


def load_dataset(name, cache_dir=None, images_path=None, labels_path=None):
    if name == "digits":
        return load_digits_dataset()
    if name == "idx":
        if not (images_path and labels_path):
            raise FileNotFoundError("dataset 'idx' needs images_path and labels_path")
        return load_idx(images_path, labels_path)
    if name in _IDX_NAMES:
        ds = load_idx(*find_idx_pair(name, cache_dir))
        if name == "emnist-letters":
            # letters are labelled 1..26
            return Dataset(ds.x, ds.y - 1, 26, ds.image_shape, name)
        return ds
    raise FileNotFoundError(f"unknown dataset {name!r}")


# batching and hygiene -----------------------------------------------------


def batches(split, batch_size, rng):
    """One epoch of shuffled minibatches; every example appears exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(len(split))
    for start in range(0, perm.size, batch_size):
        yield split.subset(perm[start:start + batch_size])


def row_hashes(x):
    return {hashlib.sha1(np.ascontiguousarray(row).tobytes()).hexdigest() for row in x}


def leakage_check(stream):
    """Number of test rows (over all tasks) whose exact bytes occur in any train split."""
    train = set()
    for task in stream.tasks:
        train |= row_hashes(task.train.x)
    return sum(len(row_hashes(task.test.x) & train) for task in stream.tasks)
