"""All-layer feature banks and group-lasso feature selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .datasets import GroupedDataset, balanced_batches

NORM_EPS = 1e-8


def pool_layer(tap: np.ndarray, target_size: int) -> np.ndarray:
    """Average contiguous windows; the first ``w % t`` windows are one wider."""
    tap = np.asarray(tap, dtype=np.float64)
    w = tap.shape[-1]
    if not 1 <= target_size <= w:
        raise ValueError(f"target size {target_size} must lie in [1, {w}]")
    if target_size == w:
        return tap.copy()
    base, extra = divmod(w, target_size)
    widths = np.full(target_size, base)
    widths[:extra] += 1
    starts = np.concatenate([[0], np.cumsum(widths)[:-1]])
    if tap.shape[0] == 0:
        return np.zeros((0, target_size))
    return np.add.reduceat(tap, starts, axis=-1) / widths


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # columns that were constant on the reference rows

    def transform(self, x: np.ndarray) -> np.ndarray:
        out = (x - self.mean) / (self.std + NORM_EPS)
        out[:, self.constant] = 0.0
        return out


def fit_normalizer(reference: np.ndarray) -> Normalizer:
    """Per-column mean and population std of the reference rows."""
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape[0] < 2:
        raise ValueError("normalizer needs at least 2 reference rows")
    constant = np.all(reference == reference[0], axis=0)
    return Normalizer(reference.mean(axis=0), reference.std(axis=0), constant)


@dataclass(frozen=True)
class FeatureExtractor:
    """Recipe that maps inputs to bank columns: which taps, pooled widths,
    normalization, and the retained column subset."""

    tap_positions: tuple[int, ...]
    pooled_sizes: tuple[int, ...]
    normalizer: Normalizer | None
    columns: np.ndarray | None = None

    def raw(self, model: nn.MlpModel, x: np.ndarray) -> np.ndarray:
        model = model.copy().eval()
        _, taps = nn.forward_with_taps(model, x)
        blocks = [pool_layer(taps[p], t) for p, t in zip(self.tap_positions, self.pooled_sizes)]
        return np.concatenate(blocks, axis=1)

    def transform(self, model: nn.MlpModel, x: np.ndarray) -> np.ndarray:
        z = self.raw(model, x)
        if self.normalizer is not None:
            z = self.normalizer.transform(z)
        if self.columns is not None:
            z = z[:, self.columns]
        return z


@dataclass(frozen=True)
class FeatureBank:
    features: np.ndarray
    layer_offsets: tuple[tuple[int, int, int], ...]  # (layer, start, length)
    extractor: FeatureExtractor

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def layer_of_column(self) -> np.ndarray:
        out = np.empty(self.dim, dtype=np.int64)
        for layer, start, length in self.layer_offsets:
            out[start:start + length] = layer
        return out


def _offsets(layers, sizes) -> tuple[tuple[int, int, int], ...]:
    out, start = [], 0
    for layer, size in zip(layers, sizes):
        out.append((int(layer), start, int(size)))
        start += size
    return tuple(out)


def build_bank(model: nn.MlpModel, data: GroupedDataset, target_size: int, *, taps: str = "all",
               normalize: bool = True, reference: GroupedDataset | None = None) -> FeatureBank:
    """Pool, normalize and concatenate the hidden-layer taps of ``model``.

    ``taps="all"`` uses every tapped hidden output (the logits are never
    included); ``taps="penultimate"`` keeps only the head input. Normalization
    statistics come from ``reference`` (default: ``data`` itself).
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    model = model.copy().eval()
    probe = np.zeros((1, model.in_dim))
    _, tap_out = nn.forward_with_taps(model, probe)
    hidden = list(range(len(tap_out) - 1))
    if not hidden:
        raise ValueError("model has no hidden layers to tap")
    if taps == "penultimate":
        hidden = hidden[-1:]
    elif taps != "all":
        raise ValueError(f"unknown tap policy {taps!r}")
    sizes = tuple(min(target_size, tap_out[p].shape[1]) for p in hidden)
    extractor = FeatureExtractor(tuple(hidden), sizes, None)
    raw = extractor.raw(model, data.features)
    if normalize:
        ref = raw if reference is None else extractor.raw(model, reference.features)
        norm = fit_normalizer(ref)
        extractor = replace(extractor, normalizer=norm)
        raw = norm.transform(raw)
    return FeatureBank(raw, _offsets(hidden, sizes), extractor)


# --------------------------------------------------------------------------
# group lasso head


def group_lasso_penalty(weight: np.ndarray) -> float:
    """Sum over features of the l2 norm of that feature's class weights."""
    return float(np.sqrt((weight ** 2).sum(axis=0)).sum())


def group_lasso_grad(weight: np.ndarray) -> np.ndarray:
    norms = np.sqrt((weight ** 2).sum(axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, weight / safe, 0.0)


@dataclass
class LinearHead:
    weight: np.ndarray  # (C, D)
    bias: np.ndarray
    loss_history: list

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T + self.bias

    def predict(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(z), axis=1)


def train_linear_head(z: np.ndarray, labels: np.ndarray, groups: np.ndarray, n_groups: int, n_classes: int,
                      cfg: nn.SgdConfig, *, seed: int, lam: float = 0.0,
                      init: tuple[np.ndarray, np.ndarray] | None = None, balanced: bool = True) -> LinearHead:
    """Softmax linear classifier trained by SGD on group-balanced batches
    (plain seeded shuffles when ``balanced`` is False).

    Objective: mean cross-entropy + ``lam * sum_i ||W[:, i]||`` (+ the
    optimizer's weight decay on W). The lasso subgradient at a zero column is 0.
    """
    if lam < 0:
        raise ValueError(f"group-lasso coefficient must be >= 0, got {lam}")
    z = np.asarray(z, dtype=np.float64)
    rng_init = np.random.default_rng([seed, 300])
    if init is None:
        weight, bias = nn.glorot_uniform(rng_init, n_classes, z.shape[1]), np.zeros(n_classes)
    else:
        weight, bias = init[0].copy(), init[1].copy()
    params = {"head.weight": weight, "head.bias": bias}
    rng = np.random.default_rng([seed, 301])
    state: dict = {}
    history = []
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        if balanced:
            epoch = balanced_batches(groups, n_groups, cfg.batch_size, rng)
        else:
            epoch = nn.shuffled_batches(rng, len(z), cfg.batch_size)
        for idx in epoch:
            loss, dlogits = nn.cross_entropy(z[idx] @ weight.T + bias, labels[idx])
            grads = {"head.weight": dlogits.T @ z[idx], "head.bias": dlogits.sum(axis=0)}
            if lam:
                loss += lam * group_lasso_penalty(weight)
                grads["head.weight"] = grads["head.weight"] + lam * group_lasso_grad(weight)
            nn.sgd_update(params, grads, state, cfg, params.keys())
            total += loss * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    return LinearHead(weight, bias, history)


def train_group_lasso_head(bank: FeatureBank, data: GroupedDataset, cfg: nn.SgdConfig, lam: float, *,
                           seed: int, balanced: bool = True) -> LinearHead:
    if lam < 0:
        raise ValueError(f"group-lasso coefficient must be >= 0, got {lam}")
    return train_linear_head(bank.features, data.labels, data.groups, data.n_groups, data.n_classes,
                             cfg, seed=seed, lam=lam, balanced=balanced)


# --------------------------------------------------------------------------
# scores and selection


def relevance_scores(weight: np.ndarray) -> np.ndarray:
    return np.sqrt((np.asarray(weight, dtype=np.float64) ** 2).sum(axis=0))


def n_selected(tau: float, dim: int) -> int:
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    return max(1, int(np.floor(tau * dim)))


def select_top_fraction(scores: np.ndarray, tau: float) -> np.ndarray:
    """Boolean mask of the ``max(1, floor(tau * D))`` highest scores.

    Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = n_selected(tau, scores.shape[0])
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    mask = np.zeros(scores.shape[0], dtype=bool)
    mask[order[:k]] = True
    return mask


class LayerHistogram(NamedTuple):
    layers: list
    counts: np.ndarray
    proportions: np.ndarray
    degenerate: bool


def layer_histogram(mask: np.ndarray, layer_offsets) -> LayerHistogram:
    mask = np.asarray(mask, dtype=bool)
    extent = max((start + length for _, start, length in layer_offsets), default=0)
    if mask.shape[0] != extent:
        raise ValueError(f"mask length {mask.shape[0]} does not match offsets extent {extent}")
    layers = [layer for layer, _, _ in layer_offsets]
    counts = np.array([int(mask[start:start + length].sum()) for _, start, length in layer_offsets])
    total = counts.sum()
    if total == 0:
        return LayerHistogram(layers, counts, np.zeros(len(counts)), True)
    return LayerHistogram(layers, counts, counts / total, False)


def apply_mask(bank: FeatureBank, mask: np.ndarray) -> FeatureBank:
    """Keep the selected columns (ascending index order) and recompute offsets."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != bank.dim:
        raise ValueError(f"mask length {mask.shape[0]} vs bank width {bank.dim}")
    cols = np.flatnonzero(mask)
    layers, sizes = [], []
    for layer, start, length in bank.layer_offsets:
        kept = int(mask[start:start + length].sum())
        if kept:
            layers.append(layer)
            sizes.append(kept)
    prior = bank.extractor.columns
    extractor = replace(bank.extractor, columns=cols if prior is None else prior[cols])
    return FeatureBank(bank.features[:, cols], _offsets(layers, sizes), extractor)


@dataclass
class SelectionResult:
    scores: np.ndarray
    mask: np.ndarray
    tau: float
    layer_offsets: tuple
    histogram: LayerHistogram

    @property
    def per_layer_proportion(self) -> np.ndarray:
        return self.histogram.proportions


def select_features(bank: FeatureBank, data: GroupedDataset, cfg: nn.SgdConfig, lam: float, tau: float, *,
                    seed: int, balanced: bool = True) -> tuple[SelectionResult, LinearHead]:
    head = train_group_lasso_head(bank, data, cfg, lam, seed=seed, balanced=balanced)
    scores = relevance_scores(head.weight)
    mask = select_top_fraction(scores, tau)
    return SelectionResult(scores, mask, tau, bank.layer_offsets, layer_histogram(mask, bank.layer_offsets)), head


def write_scores_csv(result: SelectionResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flat_index", "layer", "index_in_layer", "score", "selected"])
        for layer, start, length in result.layer_offsets:
            for j in range(length):
                i = start + j
                w.writerow([i, layer, j, repr(float(result.scores[i])), int(result.mask[i])])
    return path


def write_histogram_csv(hist: LayerHistogram, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "proportion"])
        for layer, p in zip(hist.layers, hist.proportions):
            w.writerow([layer, repr(float(p))])
    return path


def read_histogram_csv(path) -> dict[int, float]:
    with Path(path).open(newline="") as fh:
        return {int(row["layer"]): float(row["proportion"]) for row in csv.DictReader(fh)}
