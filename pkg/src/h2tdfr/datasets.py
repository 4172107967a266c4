"""Grouped datasets: synthetic spurious-correlation generators, CSV I/O,
balanced subsets and balanced batch sampling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SPLITS = ("Tr", "Val", "Te")


class DatasetError(ValueError):
    pass


def _frozen(arr, dtype) -> np.ndarray:
    arr = np.array(arr, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    """Rows ``(x_i, y_i, a_i)`` with group index ``g = y * n_attributes + a``."""

    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    n_classes: int
    n_attributes: int
    split: str = "Tr"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DatasetError(f"features must be a matrix, got shape {x.shape}")
        n = x.shape[0]
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        a = np.asarray(self.attributes, dtype=np.int64).reshape(-1)
        if y.shape != (n,) or a.shape != (n,):
            raise DatasetError(f"{n} feature rows but {y.shape[0]} labels and {a.shape[0]} attributes")
        if n and (y.min() < 0 or y.max() >= self.n_classes):
            raise DatasetError(f"labels outside [0, {self.n_classes})")
        if n and (a.min() < 0 or a.max() >= self.n_attributes):
            raise DatasetError(f"attributes outside [0, {self.n_attributes})")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split!r}")
        object.__setattr__(self, "features", _frozen(x, np.float64))
        object.__setattr__(self, "labels", _frozen(y, np.int64))
        object.__setattr__(self, "attributes", _frozen(a, np.int64))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_attributes

    @property
    def groups(self) -> np.ndarray:
        return self.labels * self.n_attributes + self.attributes

    def group_of(self, i: int) -> int:
        return int(self.labels[i] * self.n_attributes + self.attributes[i])

    def decode_group(self, g: int) -> tuple[int, int]:
        return divmod(int(g), self.n_attributes)

    def group_names(self) -> list[str]:
        return [f"{y},{a}" for y in range(self.n_classes) for a in range(self.n_attributes)]

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    def subset(self, idx, split: str | None = None) -> "GroupedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupedDataset(self.features[idx], self.labels[idx], self.attributes[idx],
                              self.n_classes, self.n_attributes, split or self.split)

    def is_balanced(self) -> bool:
        counts = self.group_counts()
        return bool(counts.min() == counts.max())


@dataclass(frozen=True)
class SpuriousGenSpec:
    """Synthetic two-class / two-attribute data.

    ``linear-spurious``: the core label is linearly readable from the first
    core coordinate. ``xor-core``: the label is the XOR of the signs of the
    first two core coordinates, so no linear readout of the raw input sees it,
    while the spurious block always separates the attribute with margin
    ``margin_sp``.
    """

    variant: str = "xor-core"
    n_train: int = 4000
    n_val: int = 2000
    n_test: int = 2000
    rho: float = 0.95
    d_core: int = 4
    d_sp: int = 2
    d_noise: int = 10
    margin_core: float = 1.0
    margin_sp: float = 1.0
    noise_std: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("linear-spurious", "xor-core"):
            raise DatasetError(f"unknown variant {self.variant!r}")
        if not 0 <= self.rho <= 1:
            raise DatasetError(f"rho must lie in [0, 1], got {self.rho}")
        if self.variant == "xor-core" and self.d_core < 2:
            raise DatasetError("xor-core needs d_core >= 2")
        if self.d_core < 1 or self.d_sp < 1 or self.d_noise < 0:
            raise DatasetError("block dimensions must be d_core >= 1, d_sp >= 1, d_noise >= 0")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")

    @property
    def dim(self) -> int:
        return self.d_core + self.d_sp + self.d_noise


def correlated_counts(n: int, rho: float) -> list[int]:
    """Group counts for binary (y, a) in group order (0,0), (0,1), (1,0), (1,1).

    Groups with y == a get ``round(n * rho / 2)`` each, the others
    ``round(n * (1 - rho) / 2)``; leftovers are settled one unit at a time in
    group order.
    """
    if n < 4:
        raise DatasetError(f"cannot split n={n} rows over 4 groups")
    major = round(n * rho / 2)
    minor = round(n * (1 - rho) / 2)
    counts = [major, minor, minor, major]
    k = 0
    while sum(counts) != n:
        step = 1 if sum(counts) < n else -1
        if counts[k % 4] + step >= 0:
            counts[k % 4] += step
        k += 1
    return counts


def balanced_counts(n: int, n_groups: int = 4) -> list[int]:
    if n < n_groups or n % n_groups:
        raise DatasetError(f"balanced split needs n divisible by {n_groups}, got n={n}")
    return [n // n_groups] * n_groups


def _sample_split(spec: SpuriousGenSpec, counts: list[int], rng: np.random.Generator, split: str) -> GroupedDataset:
    y = np.concatenate([np.full(c, g // 2) for g, c in enumerate(counts)]).astype(np.int64)
    a = np.concatenate([np.full(c, g % 2) for g, c in enumerate(counts)]).astype(np.int64)
    n = len(y)
    perm = rng.permutation(n)
    y, a = y[perm], a[perm]

    core = np.zeros((n, spec.d_core))
    if spec.variant == "xor-core":
        s0 = rng.integers(0, 2, size=n)
        s1 = s0 ^ y
        core[:, 0] = (2 * s0 - 1) * spec.margin_core
        core[:, 1] = (2 * s1 - 1) * spec.margin_core
    else:
        core[:, 0] = (2 * y - 1) * spec.margin_core
    sp = np.repeat(((2 * a - 1) * spec.margin_sp / math.sqrt(spec.d_sp))[:, None], spec.d_sp, axis=1)
    x = np.concatenate([core, sp, np.zeros((n, spec.d_noise))], axis=1)
    x = x + spec.noise_std * rng.standard_normal(x.shape)
    return GroupedDataset(x, y, a, 2, 2, split)


def generate(spec: SpuriousGenSpec) -> dict[str, GroupedDataset]:
    """Tr with correlation ``rho`` between y and a; Val and Te group-balanced."""
    counts = {
        "Tr": correlated_counts(spec.n_train, spec.rho),
        "Val": balanced_counts(spec.n_val),
        "Te": balanced_counts(spec.n_test),
    }
    out = {}
    for k, split in enumerate(SPLITS):
        rng = np.random.default_rng([spec.seed, 100 + k])
        out[split] = _sample_split(spec, counts[split], rng, split)
    return out


def balanced_subset(data: GroupedDataset, seed: int) -> GroupedDataset:
    """Keep ``min`` group count rows from every group, rows in original order."""
    counts = data.group_counts()
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise DatasetError(f"group (y,a)={data.decode_group(empty[0])} has no examples")
    m = int(counts.min())
    rng = np.random.default_rng([seed, 200])
    groups = data.groups
    keep = []
    for g in range(data.n_groups):
        members = np.flatnonzero(groups == g)
        keep.append(members if len(members) == m else rng.choice(members, size=m, replace=False))
    return data.subset(np.sort(np.concatenate(keep)))


def balanced_batches(groups: np.ndarray, n_groups: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of group-stratified batches.

    Each batch holds ``max(1, batch_size // n_groups)`` rows from every group
    (the final batch may hold fewer, still equal across groups). The epoch
    stops when the smallest group is exhausted.
    """
    per = max(1, batch_size // n_groups)
    pools = [rng.permutation(np.flatnonzero(groups == g)) for g in range(n_groups)]
    m = min(len(p) for p in pools)
    batches = []
    for start in range(0, m, per):
        stop = min(start + per, m)
        batches.append(np.concatenate([p[start:stop] for p in pools]))
    return batches


@dataclass
class GroupStats:
    names: list[str]
    counts: list[int]
    proportions: list[float]

    def as_dict(self) -> dict:
        return {name: {"count": c, "proportion": p} for name, c, p in zip(self.names, self.counts, self.proportions)}


def group_stats(data: GroupedDataset) -> GroupStats:
    counts = data.group_counts()
    n = counts.sum()
    props = counts / n if n else np.zeros(len(counts))
    return GroupStats(data.group_names(), [int(c) for c in counts], [float(p) for p in props])


# --------------------------------------------------------------------------
# CSV


def save_csv(data: GroupedDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{j}" for j in range(data.dim)] + ["y", "a"])
        for x, y, a in zip(data.features, data.labels, data.attributes):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(a)])
    return path


def load_csv(path, split: str = "Tr", n_classes: int | None = None, n_attributes: int | None = None) -> GroupedDataset:
    """Read ``x_0,...,x_{d-1},y,a``. Errors name the offending line (1-based)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        width = len(header)
        d = width - 2
        expected = [f"x_{j}" for j in range(d)] + ["y", "a"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DatasetError(f"{path}: line 1: header must be x_0,...,x_{{d-1}},y,a")
        xs, ys, as_ = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}: line {lineno}: expected {width} columns, found {len(row)}")
            try:
                xs.append([float(v) for v in row[:d]])
                y, a = float(row[d]), float(row[d + 1])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: non-numeric cell ({exc})") from None
            if y < 0 or a < 0 or y != int(y) or a != int(a):
                raise DatasetError(f"{path}: line {lineno}: y and a must be nonnegative integers")
            ys.append(int(y))
            as_.append(int(a))
    x = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    y = np.array(ys, dtype=np.int64)
    a = np.array(as_, dtype=np.int64)
    n_classes = n_classes or (int(y.max()) + 1 if len(y) else 1)
    n_attributes = n_attributes or (int(a.max()) + 1 if len(a) else 1)
    return GroupedDataset(x, y, a, n_classes, n_attributes, split)


def save_generated(splits: dict[str, GroupedDataset], spec: SpuriousGenSpec, directory) -> Path:
    """Write one CSV per split plus ``dataset.json`` (spec, seed, group counts)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, data in splits.items():
        save_csv(data, directory / f"{split.lower()}.csv")
    manifest = {
        "spec": asdict(spec),
        "seed": spec.seed,
        "files": {split: f"{split.lower()}.csv" for split in splits},
        "group_counts": {split: group_stats(d).as_dict() for split, d in splits.items()},
    }
    path = directory / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
