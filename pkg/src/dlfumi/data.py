"""Bag-structured training data: containers, file loaders and generators.

Instances are stored row-wise in a single ``(n_instances, n_features)`` array
together with a bag index per row; bags are views over that table.
"""

from __future__ import annotations

import csv
import gzip
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

USPS_DIM = 256


class DataFormatError(ValueError):
    """Raised when an input file does not follow the expected layout."""


@dataclass
class Bag:
    instances: np.ndarray
    label: int

    def __post_init__(self):
        self.instances = np.atleast_2d(np.asarray(self.instances, dtype=float))
        if self.instances.shape[0] < 1:
            raise ValueError("a bag needs at least one instance")
        if self.label not in (0, 1):
            raise ValueError(f"bag label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)


@dataclass
class MILDataset:
    """Instances of all bags stacked row-wise.

    Attributes
    ----------
    X : ndarray of shape (n_instances, n_features)
    bag_ids : ndarray of shape (n_instances,)
        Index into ``bag_labels`` for every row.
    bag_labels : ndarray of shape (n_bags,)
        Binary bag labels.
    """

    X: np.ndarray
    bag_ids: np.ndarray
    bag_labels: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.bag_ids = np.asarray(self.bag_ids, dtype=int)
        self.bag_labels = np.asarray(self.bag_labels, dtype=int)
        if self.X.ndim != 2 or self.X.shape[1] == 0:
            raise ValueError("X must be a 2-D array with at least one feature")
        if self.bag_ids.shape != (self.X.shape[0],):
            raise ValueError("bag_ids must have one entry per instance")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("instances contain non-finite values")
        if self.bag_ids.size and (self.bag_ids.min() < 0
                                  or self.bag_ids.max() >= self.bag_labels.size):
            raise ValueError("bag_ids reference unknown bags")
        if not np.isin(self.bag_labels, (0, 1)).all():
            raise ValueError("bag labels must be 0 or 1")
        counts = np.bincount(self.bag_ids, minlength=self.bag_labels.size)
        if np.any(counts == 0):
            raise ValueError("every bag needs at least one instance")

    @classmethod
    def from_bags(cls, bags: Sequence[Bag]) -> "MILDataset":
        bags = [b if isinstance(b, Bag) else Bag(*b) for b in bags]
        if not bags:
            raise ValueError("no bags given")
        dims = {b.instances.shape[1] for b in bags}
        if len(dims) != 1:
            raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")
        X = np.vstack([b.instances for b in bags])
        ids = np.concatenate([np.full(len(b.instances), j) for j, b in enumerate(bags)])
        return cls(X, ids, np.array([b.label for b in bags]))

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_instances(self) -> int:
        return self.X.shape[0]

    @property
    def n_bags(self) -> int:
        return self.bag_labels.size

    @property
    def positive(self) -> np.ndarray:
        """Boolean mask of instances that sit in positive bags."""
        return self.bag_labels[self.bag_ids] == 1

    @property
    def bags(self) -> list[Bag]:
        return [Bag(self.X[self.bag_ids == j], int(lab))
                for j, lab in enumerate(self.bag_labels)]

    def check_trainable(self):
        if not (self.bag_labels == 1).any() or not (self.bag_labels == 0).any():
            raise ValueError("training data needs at least one positive and one negative bag")
        return self


# --------------------------------------------------------------------------
# USPS


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt")
    return open(path, "r")


def _rescale_unit(X: np.ndarray) -> np.ndarray:
    lo, hi = X.min(), X.max()
    if hi <= lo:
        return np.zeros_like(X)
    return (X - lo) / (hi - lo)


def load_usps(path, digits: Optional[Sequence[int]] = None):
    """Load USPS digits as ``(X, labels)`` with pixel values mapped to [0, 1].

    Text files hold one image per line: the digit label followed by 256 gray
    values. The ``.jf`` export (a two-field header line and a ``-1`` trailer)
    and gzip-compressed files are accepted too. HDF5 files (``.h5``/``.hdf5``)
    with ``train``/``test`` groups holding ``data`` and ``target`` datasets are
    read as the binary variant; both groups are concatenated.

    Rescaling uses the min/max over the whole file, before any digit filter.
    """
    path = Path(path)
    if path.suffix in (".h5", ".hdf5"):
        X, y = _load_usps_h5(path)
    else:
        X, y = _load_usps_text(path)
    X = _rescale_unit(X)
    if digits is not None:
        keep = np.isin(y, list(digits))
        X, y = X[keep], y[keep]
    return X, y


def _load_usps_text(path: Path):
    rows, labels = [], []
    with _open_text(path) as fh:
        lines = fh.read().splitlines()
    numbered = [(n, ln.split()) for n, ln in enumerate(lines, start=1) if ln.strip()]
    if numbered and len(numbered[0][1]) == 2:
        numbered = numbered[1:]  # .jf header "<n_classes> <dim>"
    if numbered and numbered[-1][1] == ["-1"]:
        numbered = numbered[:-1]
    for lineno, fields in numbered:
        if len(fields) != USPS_DIM + 1:
            raise DataFormatError(
                f"{path}:{lineno}: expected {USPS_DIM + 1} fields "
                f"(label + {USPS_DIM} values), got {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        labels.append(int(round(values[0])))
        rows.append(values[1:])
    if not rows:
        raise DataFormatError(f"{path}: no instances found")
    return np.array(rows), np.array(labels)


def _load_usps_h5(path: Path):
    import h5py

    parts_X, parts_y = [], []
    with h5py.File(path, "r") as fh:
        for split in ("train", "test"):
            if split in fh:
                parts_X.append(np.asarray(fh[split]["data"], dtype=float))
                parts_y.append(np.asarray(fh[split]["target"], dtype=int))
    if not parts_X:
        raise DataFormatError(f"{path}: no train/test groups")
    X = np.vstack(parts_X).reshape(-1, USPS_DIM)
    return X, np.concatenate(parts_y)


# --------------------------------------------------------------------------
# generic CSV bags


def load_instances_csv(path) -> np.ndarray:
    """Numeric CSV, one instance per row. A non-numeric first row is a header."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        return np.empty((0, 0))
    width = len(rows[0])
    for n, r in enumerate(rows, start=1):
        if len(r) != width:
            raise DataFormatError(f"{path}: row {n} has {len(r)} values, expected {width}")
    return np.array(rows, dtype=float)


def load_csv_bags(instances_path, bags_path) -> MILDataset:
    """Build a dataset from an instance CSV and a bag-assignment CSV.

    The assignment file has columns ``row_index, bag_id, bag_label``. Bag ids
    are arbitrary tokens and are renumbered in order of first appearance.
    """
    X = load_instances_csv(instances_path)
    with open(bags_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"row_index", "bag_id", "bag_label"} - set(reader.fieldnames or ())
        if missing:
            raise DataFormatError(f"{bags_path}: missing columns {sorted(missing)}")
        assign = list(reader)
    if len(assign) != X.shape[0]:
        raise DataFormatError(
            f"{bags_path}: {len(assign)} assignments for {X.shape[0]} instances")
    order = np.empty(len(assign), dtype=int)
    bag_index: dict[str, int] = {}
    labels: list[int] = []
    ids = np.empty(len(assign), dtype=int)
    for n, rec in enumerate(assign):
        order[n] = int(rec["row_index"])
        key = rec["bag_id"]
        lab = int(rec["bag_label"])
        if key not in bag_index:
            bag_index[key] = len(labels)
            labels.append(lab)
        elif labels[bag_index[key]] != lab:
            raise DataFormatError(f"{bags_path}: bag {key!r} has conflicting labels")
        ids[n] = bag_index[key]
    if sorted(order.tolist()) != list(range(X.shape[0])):
        raise DataFormatError(f"{bags_path}: row_index must be a permutation of 0..n-1")
    return MILDataset(X[order], ids, np.array(labels))


def save_csv_bags(dataset: MILDataset, instances_path, bags_path):
    np.savetxt(instances_path, dataset.X, delimiter=",", fmt="%.17g")
    with open(bags_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_index", "bag_id", "bag_label"])
        for i, b in enumerate(dataset.bag_ids):
            w.writerow([i, int(b), int(dataset.bag_labels[b])])


# --------------------------------------------------------------------------
# bag construction


def make_bags(X, labels, target_class, pos_bags=50, neg_bags=50, bag_size=4,
              targets_per_pos_bag=1, neg_bag_size=None, seed=0) -> MILDataset:
    """Sample a one-vs-rest MIL training set from a labeled instance table.

    Every positive bag holds exactly ``targets_per_pos_bag`` instances of
    ``target_class``; the remaining slots of positive bags and all slots of
    negative bags are filled from the other classes. Within a bag instances
    are drawn without replacement, across bags with replacement. Positive bags
    come first.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    neg_bag_size = bag_size if neg_bag_size is None else neg_bag_size
    if targets_per_pos_bag < 1 or bag_size < targets_per_pos_bag:
        raise ValueError("need 1 <= targets_per_pos_bag <= bag_size")
    tgt = np.flatnonzero(labels == target_class)
    other = np.flatnonzero(labels != target_class)
    if tgt.size == 0:
        raise ValueError(f"class {target_class!r} does not occur in the table")
    if tgt.size < targets_per_pos_bag:
        raise ValueError("not enough target instances to fill a positive bag")
    need_other = max(bag_size - targets_per_pos_bag, neg_bag_size if neg_bags else 0)
    if other.size < need_other:
        raise ValueError("not enough non-target instances to fill a bag")

    rng = np.random.default_rng(seed)
    rows, ids, bag_labels = [], [], []
    for j in range(pos_bags):
        picked = np.concatenate([
            rng.choice(tgt, targets_per_pos_bag, replace=False),
            rng.choice(other, bag_size - targets_per_pos_bag, replace=False)])
        rows.append(picked)
        ids.append(np.full(bag_size, j))
        bag_labels.append(1)
    for j in range(neg_bags):
        rows.append(rng.choice(other, neg_bag_size, replace=False))
        ids.append(np.full(neg_bag_size, pos_bags + j))
        bag_labels.append(0)
    idx = np.concatenate(rows)
    return MILDataset(X[idx], np.concatenate(ids), np.array(bag_labels))


# --------------------------------------------------------------------------
# synthetic problems


@dataclass
class SynthSpec:
    d: int = 20
    T_true: int = 2
    M_true: int = 5
    bags_pos: int = 10
    bags_neg: int = 10
    bag_size: int = 8
    targets_per_pos_bag: int = 2
    noise_sigma: float = 0.0
    sparsity: int = 1
    seed: int = 0

    def validate(self):
        if not 1 <= self.targets_per_pos_bag <= self.bag_size:
            raise ValueError("need 1 <= targets_per_pos_bag <= bag_size")
        if self.T_true < 1 or self.M_true < 1:
            raise ValueError("need at least one target and one background atom")
        if self.T_true + self.M_true > self.d:
            raise ValueError("T_true + M_true must not exceed d")
        if not 1 <= self.sparsity <= self.M_true:
            raise ValueError("sparsity must lie in [1, M_true]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.bags_pos < 0 or self.bags_neg < 0 or self.bag_size < 1:
            raise ValueError("bag counts must be nonnegative and bag_size positive")
        return self


@dataclass
class SynthProblem:
    dataset: MILDataset
    target_atoms: np.ndarray      # (d, T_true)
    background_atoms: np.ndarray  # (d, M_true)
    z: np.ndarray                 # (n_instances,) true target flags
    spec: SynthSpec = field(repr=False, default=None)


def synth_instances(target_atoms, background_atoms, is_target, sparsity,
                    noise_sigma, rng) -> np.ndarray:
    """Draw instances from the shared-background model.

    Each row mixes ``sparsity`` random background atoms with coefficients
    uniform on [0.5, 1.5]; rows flagged in ``is_target`` add one random target
    atom with a coefficient from the same range. Gaussian noise is added last.
    """
    is_target = np.asarray(is_target, dtype=bool)
    d, T = target_atoms.shape
    M = background_atoms.shape[1]
    n = is_target.size
    X = np.empty((n, d))
    for i in range(n):
        ks = rng.choice(M, sparsity, replace=False)
        x = background_atoms[:, ks] @ rng.uniform(0.5, 1.5, sparsity)
        if is_target[i]:
            x = x + target_atoms[:, rng.integers(T)] * rng.uniform(0.5, 1.5)
        X[i] = x
    if noise_sigma > 0:
        X = X + noise_sigma * rng.standard_normal(X.shape)
    return X


def _random_unit_atoms(d, n, rng):
    A = rng.standard_normal((d, n))
    return A / np.linalg.norm(A, axis=0)


def synth_generate(spec: SynthSpec) -> SynthProblem:
    """Random MIL problem with known atoms and instance-level target flags."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    atoms = _random_unit_atoms(spec.d, spec.T_true + spec.M_true, rng)
    D_t, D_b = atoms[:, :spec.T_true], atoms[:, spec.T_true:]

    z_parts, ids, bag_labels = [], [], []
    for j in range(spec.bags_pos):
        flags = np.zeros(spec.bag_size, dtype=bool)
        flags[rng.choice(spec.bag_size, spec.targets_per_pos_bag, replace=False)] = True
        z_parts.append(flags)
        ids.append(np.full(spec.bag_size, j))
        bag_labels.append(1)
    for j in range(spec.bags_neg):
        z_parts.append(np.zeros(spec.bag_size, dtype=bool))
        ids.append(np.full(spec.bag_size, spec.bags_pos + j))
        bag_labels.append(0)
    z = np.concatenate(z_parts) if z_parts else np.zeros(0, dtype=bool)
    X = synth_instances(D_t, D_b, z, spec.sparsity, spec.noise_sigma, rng)
    ds = MILDataset(X, np.concatenate(ids), np.array(bag_labels))
    return SynthProblem(ds, D_t, D_b, z, spec)


def synth_test_set(problem: SynthProblem, n_instances=200, target_fraction=0.5,
                   noise_sigma=None, seed=None):
    """Fresh labeled instances drawn from the atoms of ``problem``.

    Returns ``(X, z)``. The noise level defaults to the training level.
    """
    spec = problem.spec or SynthSpec()
    noise = spec.noise_sigma if noise_sigma is None else noise_sigma
    rng = np.random.default_rng(spec.seed + 1_000_003 if seed is None else seed)
    z = np.zeros(n_instances, dtype=bool)
    z[:int(round(target_fraction * n_instances))] = True
    rng.shuffle(z)
    X = synth_instances(problem.target_atoms, problem.background_atoms, z,
                        spec.sparsity, noise, rng)
    return X, z


def save_ground_truth(problem: SynthProblem, atoms_path, flags_path):
    """Atoms go to an ``.npz`` matrix file, z flags to a one-column text file."""
    np.savez(atoms_path, target_atoms=problem.target_atoms,
             background_atoms=problem.background_atoms)
    np.savetxt(flags_path, problem.z.astype(int), fmt="%d")
