"""Task environments, per-task datasets and base-learner subsamples.

Randomness flows through counter-based Philox generators keyed by integer
tuples, so every (seed, purpose, task index) triple owns an independent
substream and sampling is reproducible regardless of evaluation order.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

SINUSOID = "sinusoid"
TOY_CLASSIFICATION = "toy-classification"

# purpose tags for substreams
_META_TRAIN = 11
_TARGET = 13
_SUBSAMPLE = 17
_FRESH = 19


def rng_for(*keys):
    """Philox generator on the substream identified by integer ``keys``."""
    entropy = [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class Dataset:
    """Inputs ``x`` of shape ``(m, d)`` and targets ``y`` of shape ``(m,)``.

    Classification targets are integer labels.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"|x|={len(self.x)} != |y|={len(self.y)}")
        if self.x.ndim != 2:
            raise ValueError(f"x must be 2-D, got shape {self.x.shape}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        return Dataset(self.x[idx], self.y[idx])

    def one_hot(self, n_classes):
        return np.eye(n_classes)[self.y.astype(int)]


EMPTY = Dataset(np.zeros((0, 1)), np.zeros(0))


@dataclass(frozen=True)
class Task:
    """Generative parameters of one data distribution plus its sample count.

    Sinusoid: ``params = (amplitude, phase, offset)``.
    Classification: ``params`` holds the ``(n_way, 2)`` class centroids.
    """

    family: str
    params: np.ndarray
    m: int

    def f(self, x):
        """Noise-free sinusoid value at inputs ``x`` of shape ``(n, 1)``."""
        if self.family != SINUSOID:
            raise ValueError("f() is defined for sinusoid tasks only")
        amp, phase, offset = self.params
        return amp * np.sin(x[:, 0] - phase) + offset


@dataclass(frozen=True)
class TaskEnvironment:
    """A distribution over ``(D, m)`` pairs.

    ``m`` is the training-set size of target tasks, ``m_obs`` the size of
    observed (meta-training) task datasets.
    """

    family: str = SINUSOID
    m: int = 5
    m_obs: int = 5
    noise: float = 0.1
    amplitude: tuple = (1.4, 2.6)
    phase: tuple = (0.0, float(np.pi))
    offset: tuple = (-1.0, 1.0)
    x_range: tuple = (-5.0, 5.0)
    n_way: int = 5
    centroid_range: tuple = (-3.0, 3.0)
    spread: float = 0.5
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.family not in (SINUSOID, TOY_CLASSIFICATION):
            raise ValueError(f"unknown family {self.family!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.m_obs < self.m:
            raise ValueError(f"m_obs={self.m_obs} must be >= m={self.m}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.family == TOY_CLASSIFICATION and self.n_way < 2:
            raise ValueError("n_way must be >= 2")

    def with_sizes(self, m=None, m_obs=None):
        kw = dict(self.__dict__)
        kw.pop("extra")
        if m is not None:
            kw["m"] = m
        if m_obs is not None:
            kw["m_obs"] = m_obs
        return TaskEnvironment(**kw)

    @property
    def input_dim(self):
        return 1 if self.family == SINUSOID else 2

    def sample_task(self, rng, m):
        if self.family == SINUSOID:
            params = np.array([
                rng.uniform(*self.amplitude),
                rng.uniform(*self.phase),
                rng.uniform(*self.offset),
            ])
        else:
            params = rng.uniform(*self.centroid_range, size=(self.n_way, 2))
        return Task(self.family, params, int(m))

    def sample_points(self, task, size, rng):
        if self.family == SINUSOID:
            x = rng.uniform(*self.x_range, size=(size, 1))
            y = task.f(x) + self.noise * rng.standard_normal(size)
            return Dataset(x, y)
        labels = np.arange(size) % self.n_way
        rng.shuffle(labels)
        x = task.params[labels] + self.spread * rng.standard_normal((size, 2))
        return Dataset(x, labels.astype(np.int64))


def sample_meta_train(env, n, seed):
    """``n`` i.i.d. observed tasks, each with a dataset of ``env.m_obs`` points."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        rng = rng_for(seed, _META_TRAIN, i)
        task = env.sample_task(rng, env.m_obs)
        out.append((task, env.sample_points(task, env.m_obs, rng)))
    return out


def sample_target_tasks(env, count, seed, n_test=100):
    """Target tasks with an ``env.m``-point train set and an ``n_test`` test set.

    Train and test points are independent draws from the task distribution.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for i in range(count):
        rng = rng_for(seed, _TARGET, i)
        task = env.sample_task(rng, env.m)
        both = env.sample_points(task, env.m + n_test, rng)
        idx = np.arange(env.m + n_test)
        if env.family == TOY_CLASSIFICATION:
            # keep the train split class-balanced
            train_idx = np.concatenate([
                np.flatnonzero(both.y == c)[: (env.m // env.n_way) + (c < env.m % env.n_way)]
                for c in range(env.n_way)])
            test_idx = np.setdiff1d(idx, train_idx)
        else:
            train_idx, test_idx = idx[: env.m], idx[env.m:]
        out.append((task, both.take(train_idx), both.take(test_idx)))
    return out


def sample_fresh(env, task, size, seed, *keys):
    """Fresh points from a task's distribution on a dedicated substream."""
    return env.sample_points(task, size, rng_for(seed, _FRESH, *keys))


@dataclass(frozen=True)
class SubsamplePair:
    """Full observed dataset ``S`` and the inner set ``S'`` that trains the base learner."""

    full: Dataset
    inner: Dataset
    mode: str = "subset"
    index: np.ndarray = None

    def __post_init__(self):
        if self.mode not in ("subset", "disjoint"):
            raise ValueError(f"unknown mode {self.mode!r}")


def subsample(full, m_prime, mode="subset", seed=0, task=None, env=None, key=0):
    """Select ``S'`` for the base learner.

    ``subset`` draws ``m_prime`` points of ``full`` uniformly without
    replacement.  ``disjoint`` draws ``m_prime`` fresh points from the task
    distribution, which requires ``task`` and ``env``.
    """
    rng = rng_for(seed, _SUBSAMPLE, key)
    if mode == "subset":
        if m_prime > len(full):
            raise ValueError(f"m_prime={m_prime} exceeds |S|={len(full)}")
        idx = np.sort(rng.choice(len(full), size=m_prime, replace=False))
        return SubsamplePair(full, full.take(idx), mode, idx)
    if mode == "disjoint":
        if task is None or env is None:
            raise ValueError("disjoint mode needs the task and its environment")
        return SubsamplePair(full, env.sample_points(task, m_prime, rng), mode, None)
    raise ValueError(f"unknown mode {mode!r}")


def stack(datasets):
    """Stack equal-sized datasets into ``(B, m, d)`` inputs and ``(B, m)`` targets."""
    sizes = {len(d) for d in datasets}
    if len(sizes) != 1:
        raise ValueError(f"cannot stack datasets of sizes {sorted(sizes)}")
    return (np.stack([d.x for d in datasets]), np.stack([d.y for d in datasets]))


def write_csv(path, datasets, task_ids=None):
    """Columnar CSV: ``task_id, x0..x{d-1}, y``."""
    task_ids = range(len(datasets)) if task_ids is None else task_ids
    d = datasets[0].x.shape[1] if datasets else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id"] + [f"x{j}" for j in range(d)] + ["y"])
        for tid, ds in zip(task_ids, datasets):
            for xi, yi in zip(ds.x, ds.y):
                w.writerow([tid] + [repr(float(v)) for v in xi] + [repr(float(yi))])


def read_csv(path, integer_labels=False):
    """Inverse of :func:`write_csv`; returns ``{task_id: Dataset}`` in file order."""
    rows = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 2
        for row in r:
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
    out = {}
    for tid, vals in rows.items():
        arr = np.array(vals).reshape(-1, d + 1)
        y = arr[:, -1].astype(np.int64) if integer_labels else arr[:, -1]
        out[tid] = Dataset(arr[:, :d], y)
    return out
