"""Synthetic child/adult identities, CSV ingestion and mini-batch sampling."""

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Upper bound (inclusive) of each age group in years; the last group is open.
AGE_BIN_EDGES = (12, 18, 25, 35, 45, 55, 65)
AGE_BIN_LABELS = ("0-12", "13-18", "19-25", "26-35", "36-45", "46-55", "56-65", ">=66")
N_AGE_GROUPS = 8
CHILD_GROUP = 0
UNKNOWN_AGE = -1

# Adults are drawn from these groups (26-55 years).
_ADULT_GROUPS = (3, 4, 5)


def age_group_of(years):
    """Map an age in years to its group index 0..7."""
    if years < 0:
        raise ValueError(f"negative age {years}")
    for idx, upper in enumerate(AGE_BIN_EDGES):
        if years <= upper:
            return idx
    return N_AGE_GROUPS - 1


def age_group_range(group):
    """Inclusive (low, high) years for a group; high is None for the last one."""
    if not 0 <= group < N_AGE_GROUPS:
        raise ValueError(f"age group {group} outside 0..{N_AGE_GROUPS - 1}")
    low = 0 if group == 0 else AGE_BIN_EDGES[group - 1] + 1
    high = AGE_BIN_EDGES[group] if group < len(AGE_BIN_EDGES) else None
    return low, high


def is_child(group):
    return group == CHILD_GROUP


@dataclass(frozen=True)
class Sample:
    identity: int
    age_group: int
    age_years: int
    features: np.ndarray

    @property
    def is_child(self):
        return self.age_group == CHILD_GROUP


@dataclass
class Dataset:
    """Samples stored as parallel arrays, one row of ``features`` per sample."""

    identities: np.ndarray
    age_groups: np.ndarray
    age_years: np.ndarray
    features: np.ndarray
    n_identities: int
    labels: Optional[list] = None

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.age_groups = np.asarray(self.age_groups, dtype=np.int64)
        self.age_years = np.asarray(self.age_years, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        count = self.identities.size
        if self.features.ndim != 2 or self.features.shape[0] != count:
            raise ValueError("features must have one row per sample")
        if self.age_groups.size != count or self.age_years.size != count:
            raise ValueError("age arrays must have one entry per sample")
        if self.n_identities < 2:
            raise ValueError("a dataset needs at least 2 identities")
        if count and (self.identities.min() < 0 or self.identities.max() >= self.n_identities):
            raise ValueError("identity index outside [0, n_identities)")
        if count and (self.age_groups.min() < 0 or self.age_groups.max() >= N_AGE_GROUPS):
            raise ValueError("age group outside 0..7")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return int(self.identities.size)

    def __getitem__(self, i):
        return Sample(int(self.identities[i]), int(self.age_groups[i]),
                      int(self.age_years[i]), self.features[i])

    @property
    def dim(self):
        return int(self.features.shape[1])

    @property
    def child_mask(self):
        return self.age_groups == CHILD_GROUP

    @property
    def inputs(self):
        """Features as a ``d_in x N`` column matrix."""
        return self.features.T

    def child_ids(self):
        return child_class_index(self)

    def summary(self):
        return {
            "n": self.n_identities,
            "n_child": len(child_class_index(self)),
            "samples": len(self),
            "child_samples": int(self.child_mask.sum()),
            "adult_samples": int((~self.child_mask).sum()),
        }


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic identity world.

    ``kappa`` sets how identity-specific child samples are: 0 puts every
    child sample on one shared mode, 1 makes them as distinct as adults.
    Two specs differing only in ``identity_offset`` share the child mode
    but draw disjoint identities, which gives a held-out evaluation set.
    """

    n_identities: int = 40
    child_fraction: float = 0.3
    child_samples: int = 4
    adult_samples: int = 16
    d_in: int = 32
    kappa: float = 0.35
    sigma: float = 0.05
    seed: int = 0
    identity_offset: int = 0

    def n_child_identities(self):
        return int(math.floor(self.child_fraction * self.n_identities + 0.5))

    def validate(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n_identities < 2:
            raise ValueError("need at least 2 identities")
        if not 0.0 <= self.child_fraction <= 1.0:
            raise ValueError("child_fraction must be in [0, 1]")
        if self.n_child_identities() < 2:
            raise ValueError(
                f"child_fraction * n_identities gives {self.n_child_identities()} child identities; need >= 2")
        if self.child_samples < 1 or self.adult_samples < 1:
            raise ValueError("child_samples and adult_samples must be >= 1")
        if self.d_in < 2:
            raise ValueError("d_in must be >= 2")


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _unit(v):
    return v / np.linalg.norm(v)


def generate_synthetic(spec):
    """Draw a dataset from ``spec``; a pure function of its fields."""
    spec.validate()
    n, d = spec.n_identities, spec.d_in
    child_mode = _unit(_stream(spec.seed, 0).standard_normal(d))
    flag_rng = _stream(spec.seed, 2, spec.identity_offset, n)
    child_set = set(flag_rng.permutation(n)[: spec.n_child_identities()].tolist())

    ids, groups, years, rows = [], [], [], []
    for i in range(n):
        rng = _stream(spec.seed, 1, spec.identity_offset + i)
        latent = _unit(rng.standard_normal(d))
        if i in child_set:
            centre = _unit(spec.kappa * latent + (1.0 - spec.kappa) * child_mode)
            for _ in range(spec.child_samples):
                age = int(rng.integers(0, 13))
                ids.append(i)
                groups.append(CHILD_GROUP)
                years.append(age)
                rows.append(centre + spec.sigma * rng.standard_normal(d))
        for _ in range(spec.adult_samples):
            group = int(_ADULT_GROUPS[rng.integers(len(_ADULT_GROUPS))])
            low, high = age_group_range(group)
            ids.append(i)
            groups.append(group)
            years.append(int(rng.integers(low, high + 1)))
            rows.append(latent + spec.sigma * rng.standard_normal(d))
    return Dataset(np.array(ids), np.array(groups), np.array(years),
                   np.array(rows).reshape(len(rows), d), n)


def child_class_index(dataset):
    """Sorted identities owning at least one age-group-0 sample."""
    return np.unique(dataset.identities[dataset.child_mask])


def header_for(dim):
    return ["identity", "age_group", "age_years"] + [f"f{k}" for k in range(dim)]


def to_csv_text(dataset):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header_for(dataset.dim))
    names = dataset.labels
    for i in range(len(dataset)):
        ident = dataset.identities[i]
        writer.writerow([names[ident] if names else int(ident), int(dataset.age_groups[i]),
                         int(dataset.age_years[i])] + [repr(float(v)) for v in dataset.features[i]])
    return buf.getvalue()


def write_csv(dataset, path):
    """Write ``dataset`` atomically (temp file then rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(to_csv_text(dataset))
    os.replace(tmp, path)


def _parse_int(cell, what, line):
    try:
        return int(cell)
    except ValueError:
        raise ValueError(f"line {line}: {what} {cell!r} is not an integer") from None


def load_csv(source):
    """Parse a dataset CSV from a path, an open text file or a string of CSV text.

    The header is ``identity,age_group[,age_years],f0,...``. Identity labels
    are re-indexed densely in first-seen order; the original labels are
    kept in ``Dataset.labels``. Without an ``age_years`` column every age is
    recorded as unknown (-1).
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8", newline="") as fh:
            text = fh.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        raise FileNotFoundError(f"no such dataset file: {source}")

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("line 1: empty file") from None
    if header[:2] != ["identity", "age_group"]:
        raise ValueError("line 1: header must start with identity,age_group")
    has_years = len(header) > 2 and header[2] == "age_years"
    first_feature = 3 if has_years else 2
    dim = len(header) - first_feature
    if dim < 1 or header[first_feature:] != [f"f{k}" for k in range(dim)]:
        raise ValueError("line 1: feature columns must be f0..f{d-1}")

    index = {}
    ids, groups, years, rows = [], [], [], []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        group = _parse_int(row[1], "age_group", line)
        if not 0 <= group < N_AGE_GROUPS:
            raise ValueError(f"line {line}: age_group {group} outside 0..{N_AGE_GROUPS - 1}")
        age = _parse_int(row[2], "age_years", line) if has_years else UNKNOWN_AGE
        try:
            feats = [float(c) for c in row[first_feature:]]
        except ValueError:
            raise ValueError(f"line {line}: non-numeric feature value") from None
        if not all(math.isfinite(v) for v in feats):
            raise ValueError(f"line {line}: non-finite feature value")
        ids.append(index.setdefault(row[0], len(index)))
        groups.append(group)
        years.append(age)
        rows.append(feats)
    if len(index) < 2:
        raise ValueError(f"dataset has {len(index)} identities; need >= 2")
    return Dataset(np.array(ids), np.array(groups), np.array(years),
                   np.array(rows).reshape(len(rows), dim), len(index), labels=list(index))


@dataclass
class BatchSampler:
    """Seeded mini-batch index generator.

    Without ``rho`` every epoch is a shuffle of the whole dataset cut into
    full batches (the incomplete tail is dropped). With ``rho`` each batch
    slot is a child sample with probability ``rho / (1 + rho)``, so the
    expected child:adult ratio in a batch is ``rho``; child samples are
    drawn with replacement, adults walk a shuffled stream.
    """

    dataset: Dataset
    batch_size: int
    rho: Optional[float] = None
    seed: int = 0
    _child: np.ndarray = field(init=False, repr=False)
    _adult: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.batch_size <= len(self.dataset):
            raise ValueError(f"batch_size {self.batch_size} must be in [1, {len(self.dataset)}]")
        mask = self.dataset.child_mask
        self._child = np.flatnonzero(mask)
        self._adult = np.flatnonzero(~mask)
        if self.rho is not None:
            if self.rho < 0:
                raise ValueError("rho must be >= 0")
            if self._child.size == 0:
                raise ValueError("rho is set but the dataset has no child samples")
            if self._adult.size == 0:
                raise ValueError("rho is set but the dataset has no adult samples")

    def batches_per_epoch(self):
        return len(self.dataset) // self.batch_size

    @property
    def dropped(self):
        return len(self.dataset) - self.batches_per_epoch() * self.batch_size

    def epoch(self, epoch):
        """List of index arrays for one epoch."""
        rng = _stream(self.seed, 3, epoch)
        nb = self.batches_per_epoch()
        if self.rho is None:
            order = rng.permutation(len(self.dataset))
            return [order[k * self.batch_size:(k + 1) * self.batch_size] for k in range(nb)]
        p_child = self.rho / (1.0 + self.rho)
        adult_order = rng.permutation(self._adult)
        cursor = 0
        out = []
        for _ in range(nb):
            n_child = int(rng.binomial(self.batch_size, p_child))
            children = rng.choice(self._child, size=n_child, replace=True)
            take = self.batch_size - n_child
            adults = np.take(adult_order, np.arange(cursor, cursor + take), mode="wrap")
            cursor += take
            out.append(np.concatenate([children, adults]))
        return out

    def __iter__(self):
        return iter(self.epoch(0))


def batch_sampler(dataset, batch_size, rho=None, seed=0, epoch=0):
    """Batches of sample indices for one epoch of ``dataset``."""
    return BatchSampler(dataset, batch_size, rho=rho, seed=seed).epoch(epoch)
