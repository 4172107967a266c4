"""Three-phase all-layer reweighting pipeline, the DFR / Affine-DFR / ERM
baselines, and group-robust evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import nn
from . import selection as sel
from .config import RunConfig

log = logging.getLogger(__name__)


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase} failed: {cause}")
        self.phase = phase
        self.cause = cause


# --------------------------------------------------------------------------
# metrics


@dataclass
class GroupMetrics:
    per_group: dict  # "y,a" -> accuracy (None for empty groups)
    counts: dict
    worst: float
    mean_group: float
    overall: float
    empty_groups: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"per_group": self.per_group, "counts": self.counts, "worst": self.worst,
               "mean_group": self.mean_group, "overall": self.overall}
        if self.empty_groups:
            out["empty_groups"] = self.empty_groups
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GroupMetrics":
        return cls(d["per_group"], d["counts"], d["worst"], d["mean_group"], d["overall"],
                   d.get("empty_groups", []))


def metrics_from_predictions(predictions: np.ndarray, data: ds.GroupedDataset) -> GroupMetrics:
    """Per-group accuracy; worst and mean are taken over nonempty groups only."""
    predictions = np.asarray(predictions)
    if predictions.shape != (len(data),):
        raise ValueError(f"{predictions.shape[0]} predictions for {len(data)} rows")
    correct = predictions == data.labels
    groups = data.groups
    per_group, counts, empty = {}, {}, []
    for g, name in enumerate(data.group_names()):
        members = groups == g
        n = int(members.sum())
        counts[name] = n
        if n == 0:
            per_group[name] = None
            empty.append(name)
        else:
            per_group[name] = float(correct[members].sum() / n)
    accs = [v for v in per_group.values() if v is not None]
    if not accs:
        raise ValueError("evaluation set is empty")
    return GroupMetrics(per_group, counts, min(accs), float(sum(accs) / len(accs)),
                        float(correct.sum() / len(data)), empty)


def evaluate_groups(predictor, data: ds.GroupedDataset) -> GroupMetrics:
    """``predictor`` is an ``MlpModel`` or anything with ``predict(x)``."""
    if isinstance(predictor, nn.MlpModel):
        preds = nn.predict(predictor, data.features)
    else:
        preds = predictor.predict(data.features)
    return metrics_from_predictions(preds, data)


# --------------------------------------------------------------------------
# models


@dataclass
class H2TModel:
    """Frozen backbone + feature recipe (taps, pooling, normalization, selected
    columns) + linear head over the selected features."""

    backbone: nn.MlpModel
    extractor: sel.FeatureExtractor
    weight: np.ndarray
    bias: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.extractor.transform(self.backbone, x) @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def to_dict(self) -> dict:
        ex = self.extractor
        norm = ex.normalizer
        return {
            "format": "h2tdfr-h2t", "version": 1,
            "backbone": nn.model_to_dict(self.backbone),
            "tap_positions": list(ex.tap_positions), "pooled_sizes": list(ex.pooled_sizes),
            "normalizer": None if norm is None else {
                "mean": norm.mean.tolist(), "std": norm.std.tolist(), "constant": norm.constant.tolist()},
            "columns": None if ex.columns is None else ex.columns.tolist(),
            "head": {"shape": list(self.weight.shape), "weight": self.weight.ravel().tolist(),
                     "bias": self.bias.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "H2TModel":
        if d.get("format") != "h2tdfr-h2t":
            raise ValueError(f"not an H2T checkpoint (format={d.get('format')!r})")
        norm = d["normalizer"]
        normalizer = None if norm is None else sel.Normalizer(
            np.array(norm["mean"]), np.array(norm["std"]), np.array(norm["constant"], dtype=bool))
        columns = None if d["columns"] is None else np.array(d["columns"], dtype=np.int64)
        ex = sel.FeatureExtractor(tuple(d["tap_positions"]), tuple(d["pooled_sizes"]), normalizer, columns)
        c, dim = d["head"]["shape"]
        return cls(nn.model_from_dict(d["backbone"]), ex,
                   np.array(d["head"]["weight"], dtype=np.float64).reshape(c, dim),
                   np.array(d["head"]["bias"], dtype=np.float64))


def save_checkpoint(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = nn.model_to_dict(model) if isinstance(model, nn.MlpModel) else model.to_dict()
    path.write_text(nn.dumps(payload))
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    d = json.loads(path.read_text())
    if d.get("format") == "h2tdfr-h2t":
        return H2TModel.from_dict(d)
    return nn.model_from_dict(d)


# --------------------------------------------------------------------------
# phases


def erm_finetune(model: nn.MlpModel, data: ds.GroupedDataset, cfg: nn.SgdConfig, *,
                 seed: int) -> tuple[nn.MlpModel, list[float]]:
    """Train every parameter on the (unbalanced) training split."""
    model = model.copy().train()
    history = nn.train(model, data.features, data.labels, cfg, seed=seed)
    model.eval()
    model.seed_lineage = model.seed_lineage + [{"phase": "erm", "seed": seed}]
    return model, history


def _require_balanced(data: ds.GroupedDataset) -> None:
    if not data.is_balanced():
        raise ValueError(f"retraining needs a group-balanced set, got counts {data.group_counts().tolist()}")


def _fit_head(z, data: ds.GroupedDataset, cfg: nn.SgdConfig, seed: int, repeats: int = 1,
              init=None) -> sel.LinearHead:
    """Balanced-batch linear head; ``repeats > 1`` averages heads over seeds."""
    heads = [sel.train_linear_head(z, data.labels, data.groups, data.n_groups, data.n_classes, cfg,
                                   seed=seed + 7919 * r, init=init) for r in range(repeats)]
    if repeats == 1:
        return heads[0]
    return sel.LinearHead(np.mean([h.weight for h in heads], axis=0), np.mean([h.bias for h in heads], axis=0),
                          heads[0].loss_history)


def dfr_retrain(model: nn.MlpModel, data_rw: ds.GroupedDataset, cfg: nn.SgdConfig, *, seed: int,
                normalize: bool = True, repeats: int = 1) -> nn.MlpModel:
    """Freeze h, fit a fresh head on (standardized) penultimate features of the
    balanced set, and fold the standardization back into the Dense head."""
    _require_balanced(data_rw)
    model = model.copy().eval()
    z = nn.features(model, data_rw.features)
    norm = sel.fit_normalizer(z) if normalize else None
    if norm is not None:
        z = norm.transform(z)
    head = _fit_head(z, data_rw, cfg, seed, repeats)
    weight, bias = head.weight, head.bias
    if norm is not None:
        scale = np.where(norm.constant, 0.0, 1.0 / (norm.std + sel.NORM_EPS))
        weight = weight * scale
        bias = bias - weight @ np.where(norm.constant, 0.0, norm.mean)
    dense = model.layers[model.head_index]
    dense.weight = weight
    dense.bias = bias
    model.seed_lineage = model.seed_lineage + [{"phase": "dfr", "seed": seed}]
    return model


def affine_dfr(model: nn.MlpModel, data_rw: ds.GroupedDataset, cfg: nn.SgdConfig, *, seed: int) -> nn.MlpModel:
    """Retrain only BatchNorm scale/shift plus a fresh head on the balanced set.

    BatchNorm keeps its phase-1 running statistics.
    """
    if not any(isinstance(layer, nn.BatchNorm) for layer in model.layers):
        raise ValueError("affine-dfr needs a model with at least one BatchNorm layer")
    _require_balanced(data_rw)
    model = model.copy().eval()
    rng = np.random.default_rng([seed, 400])
    old = model.layers[model.head_index]
    model.layers[model.head_index] = nn.new_dense(rng, old.in_dim, old.out_dim)
    mask = nn.TrainableMask.affine(model)

    def batches(r):
        return ds.balanced_batches(data_rw.groups, data_rw.n_groups, cfg.batch_size, r)

    nn.train(model, data_rw.features, data_rw.labels, cfg, mask, seed=seed, batches=batches, update_stats=False)
    model.seed_lineage = model.seed_lineage + [{"phase": "affine-dfr", "seed": seed}]
    return model


def select_phase(model: nn.MlpModel, select_on: ds.GroupedDataset, reference: ds.GroupedDataset,
                 config: RunConfig, *, seed: int) -> tuple[sel.FeatureBank, sel.SelectionResult, sel.LinearHead]:
    """Build the all-layer bank and rank its columns by group-lasso relevance.

    Normalization is fitted on ``reference`` (the balanced validation set)."""
    s = config.selection
    bank = sel.build_bank(model, select_on, s.target_size, taps=s.taps, normalize=s.normalize,
                          reference=reference)
    result, head = sel.select_features(bank, select_on, s.sgd(), s.lam, s.tau, seed=seed,
                                       balanced=select_on.is_balanced())
    return bank, result, head


def h2t_retrain(model: nn.MlpModel, bank: sel.FeatureBank, data_rw: ds.GroupedDataset, cfg: nn.SgdConfig, *,
                seed: int, repeats: int = 1, init=None) -> H2TModel:
    _require_balanced(data_rw)
    head = _fit_head(bank.features, data_rw, cfg, seed, repeats, init)
    return H2TModel(model.copy().eval(), bank.extractor, head.weight, head.bias)


# --------------------------------------------------------------------------
# end-to-end runs


@dataclass
class Splits:
    train: ds.GroupedDataset
    val: ds.GroupedDataset
    test: ds.GroupedDataset
    val_rw: ds.GroupedDataset
    spec: ds.SpuriousGenSpec | None = None


def load_splits(config: RunConfig) -> Splits:
    d = config.data
    if d.source == "synthetic":
        spec = d.generator_spec(config.seed)
        parts = ds.generate(spec)
    else:
        missing = [k for k in ("train_csv", "val_csv", "test_csv") if getattr(d, k) is None]
        if missing:
            raise ValueError(f"csv source needs data.{', data.'.join(missing)}")
        spec = None
        parts = {"Tr": ds.load_csv(d.train_csv, "Tr"), "Val": ds.load_csv(d.val_csv, "Val"),
                 "Te": ds.load_csv(d.test_csv, "Te")}
        n_c = max(p.n_classes for p in parts.values())
        n_a = max(p.n_attributes for p in parts.values())
        parts = {k: ds.GroupedDataset(p.features, p.labels, p.attributes, n_c, n_a, k) for k, p in parts.items()}
    val = parts["Val"]
    val_rw = val if val.is_balanced() else ds.balanced_subset(val, config.seed)
    return Splits(parts["Tr"], val, parts["Te"], val_rw, spec)


def initial_model(config: RunConfig, splits: Splits) -> nn.MlpModel:
    return nn.build_mlp(splits.train.dim, config.model.hidden, splits.train.n_classes,
                        batchnorm=config.model.batchnorm, seed=config.seed)


def phase1(config: RunConfig, splits: Splits) -> tuple[nn.MlpModel, list[float]]:
    return erm_finetune(initial_model(config, splits), splits.train, config.phase1.sgd(), seed=config.seed)


@dataclass
class RunResult:
    method: str
    metrics: GroupMetrics
    model: object
    phase1_model: nn.MlpModel
    phase1_losses: list
    selection: sel.SelectionResult | None = None
    bank: sel.FeatureBank | None = None
    wall_times: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


def _phase(name: str, times: dict, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(name, exc) from exc
    finally:
        times[name] = time.perf_counter() - t0


def selection_set(config: RunConfig, splits: Splits) -> ds.GroupedDataset:
    which = config.selection.data
    if which == "balanced":
        return splits.val_rw
    if which == "train":
        return splits.train
    return splits.val


def run(config: RunConfig, *, splits: Splits | None = None, phase1_model: nn.MlpModel | None = None,
        phase1_losses: list | None = None) -> RunResult:
    """Run ``config.method`` end to end and evaluate on the test split.

    A precomputed phase-1 model can be passed in to share it across methods.
    """
    times: dict = {}
    splits = splits or _phase("data", times, load_splits, config)
    if phase1_model is None:
        phase1_model, phase1_losses = _phase("phase1", times, phase1, config, splits)
    method = config.method
    r = config.retrain
    result_sel = bank = None
    if method == "erm":
        final = phase1_model
    elif method == "dfr":
        final = _phase("retrain", times, dfr_retrain, phase1_model, splits.val_rw, r.sgd(), seed=config.seed,
                       normalize=config.selection.normalize, repeats=r.repeats)
    elif method == "affine-dfr":
        final = _phase("retrain", times, affine_dfr, phase1_model, splits.val_rw, r.sgd(), seed=config.seed)
    else:
        bank_full, result_sel, lasso_head = _phase("selection", times, select_phase, phase1_model,
                                       selection_set(config, splits), splits.val_rw, config, seed=config.seed)
        if config.selection.data != "balanced":
            # phase 3 always trains on the balanced set
            bank_full = sel.build_bank(phase1_model, splits.val_rw, config.selection.target_size,
                                       taps=config.selection.taps, normalize=config.selection.normalize)
        bank = sel.apply_mask(bank_full, result_sel.mask)
        init = (lasso_head.weight[:, result_sel.mask], lasso_head.bias) if r.warm_start else None
        final = _phase("retrain", times, h2t_retrain, phase1_model, bank, splits.val_rw, r.sgd(),
                       seed=config.seed, repeats=r.repeats, init=init)
    metrics = _phase("evaluate", times, evaluate_groups, final, splits.test)
    return RunResult(method, metrics, final, phase1_model, list(phase1_losses or []), result_sel, bank, times)


def h2t_dfr_run(config: RunConfig, **kwargs) -> RunResult:
    if config.method != "h2t-dfr":
        config = config.model_copy(update={"method": "h2t-dfr"}, deep=True)
    return run(config, **kwargs)


# --------------------------------------------------------------------------
# artifacts


def metrics_json(metrics: GroupMetrics) -> str:
    return json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"


def write_run(result: RunResult, config: RunConfig, out_dir, provenance: dict | None = None,
              splits: Splits | None = None) -> Path:
    """Write checkpoints, metrics, selection CSVs and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"phase1_checkpoint": "phase1.ckpt.json", "checkpoint": "model.ckpt.json", "metrics": "metrics.json"}
    save_checkpoint(result.phase1_model, out / paths["phase1_checkpoint"])
    save_checkpoint(result.model, out / paths["checkpoint"])
    (out / paths["metrics"]).write_text(metrics_json(result.metrics))
    if result.selection is not None:
        paths["scores"] = "scores.csv"
        paths["histogram"] = "histogram.csv"
        sel.write_scores_csv(result.selection, out / paths["scores"])
        sel.write_histogram_csv(result.selection.histogram, out / paths["histogram"])
    manifest = {
        "format": "h2tdfr-run", "version": 1,
        "method": result.method,
        "seed": config.seed,
        "preset": config.preset,
        "config": config.echo(),
        "provenance": provenance or {},
        "phase_wall_times": {k: round(v, 6) for k, v in result.wall_times.items()},
        "phase1_losses": result.phase1_losses,
        "artifacts": paths,
        "metrics": result.metrics.to_dict(),
    }
    if splits is not None:
        manifest["group_counts"] = {name: ds.group_stats(d).as_dict() for name, d in
                                    (("Tr", splits.train), ("Val", splits.val), ("Val_RW", splits.val_rw),
                                     ("Te", splits.test))}
    if result.selection is not None:
        h = result.selection.histogram
        manifest["selection"] = {"tau": result.selection.tau, "n_selected": int(result.selection.mask.sum()),
                                 "dim": int(result.selection.mask.shape[0]),
                                 "layer_proportions": {str(k): float(p) for k, p in zip(h.layers, h.proportions)}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result.artifacts = {k: str(out / v) for k, v in paths.items()}
    return out / "manifest.json"


def aggregate(values) -> tuple[float, float | None]:
    """Mean and standard error (None for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if len(arr) < 2:
        return float(arr.mean()), None
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(len(arr)))


def aggregate_metrics(metrics: list[GroupMetrics]) -> dict:
    out = {}
    for key in ("worst", "mean_group", "overall"):
        mean, se = aggregate(getattr(m, key) for m in metrics)
        out[key] = {"mean": mean, "stderr": se}
    out["n_seeds"] = len(metrics)
    return out
