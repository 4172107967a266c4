"""Small deterministic MLP core with hand-written backprop.

Everything is float64 numpy. Parameters are addressed by flat names of the
form ``"<layer index>.<tensor>"`` (``"0.weight"``, ``"1.gamma"``, ...), which
is also how trainable masks and gradients are keyed.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

CHECKPOINT_FORMAT = "h2tdfr-mlp"
CHECKPOINT_VERSION = 1

# tensors that receive weight decay; biases are excluded
DECAYED = ("weight", "gamma", "beta")


class ShapeError(ValueError):
    pass


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    kind = "dense"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNorm:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    kind = "batchnorm"

    @classmethod
    def fresh(cls, width: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNorm":
        return cls(np.zeros(width), np.ones(width), np.ones(width), np.zeros(width), eps, momentum)

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class Relu:
    kind = "relu"

    def tensors(self) -> dict[str, np.ndarray]:
        return {}


Layer = Dense | BatchNorm | Relu


@dataclass
class MlpModel:
    """Feed-forward net ``f = g(h(x))``.

    ``head_index`` points at the final Dense layer (the classifier ``g``);
    every layer before it belongs to the feature network ``h``.
    """

    layers: list
    head_index: int | None = None
    training: bool = False
    seed_lineage: list = field(default_factory=list)

    def __post_init__(self):
        dense = [i for i, layer in enumerate(self.layers) if isinstance(layer, Dense)]
        if not dense:
            raise ValueError("model needs at least one Dense layer")
        if self.head_index is None:
            self.head_index = dense[-1]
        if not isinstance(self.layers[self.head_index], Dense):
            raise ValueError(f"head_index {self.head_index} is not a Dense layer")
        self._check_dims()

    def _check_dims(self) -> None:
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.bias.shape != (layer.out_dim,):
                    raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} vs weight {layer.weight.shape}")
                if width is not None and layer.in_dim != width:
                    raise ShapeError(f"layer {i}: expects input width {layer.in_dim}, previous layer gives {width}")
                width = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if width is not None and layer.width != width:
                    raise ShapeError(f"layer {i}: batchnorm width {layer.width}, previous layer gives {width}")
                if layer.eps <= 0:
                    raise ValueError(f"layer {i}: batchnorm eps must be positive")
                if np.any(layer.running_var < 0):
                    raise ValueError(f"layer {i}: negative running variance")
                width = layer.width

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim if isinstance(self.layers[0], Dense) else self.layers[0].width

    @property
    def n_classes(self) -> int:
        return self.layers[self.head_index].out_dim

    def parameters(self) -> dict[str, np.ndarray]:
        """Ordered name -> array mapping (the arrays themselves, not copies)."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.tensors().items():
                out[f"{i}.{name}"] = arr
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def head_names(self) -> tuple[str, str]:
        return f"{self.head_index}.weight", f"{self.head_index}.bias"

    def tap_indices(self) -> list[int]:
        """Layer indices whose outputs are tapped.

        Every ReLU output, the penultimate representation (input of the head)
        and the head output itself, in depth order.
        """
        idx = {i for i, layer in enumerate(self.layers[: self.head_index]) if isinstance(layer, Relu)}
        if self.head_index > 0:
            idx.add(self.head_index - 1)
        idx.add(self.head_index)
        return sorted(idx)

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def train(self) -> "MlpModel":
        self.training = True
        return self

    def eval(self) -> "MlpModel":
        self.training = False
        return self


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def new_dense(rng: np.random.Generator, in_dim: int, out_dim: int) -> Dense:
    return Dense(glorot_uniform(rng, out_dim, in_dim), np.zeros(out_dim))


def build_mlp(in_dim: int, hidden: Iterable[int], n_classes: int, *, batchnorm: bool = True,
              seed: int = 0) -> MlpModel:
    """Dense -> [BatchNorm] -> ReLU blocks followed by a linear head."""
    rng = np.random.default_rng([seed, 1])
    layers: list = []
    width = in_dim
    for h in hidden:
        layers.append(new_dense(rng, width, h))
        if batchnorm:
            layers.append(BatchNorm.fresh(h))
        layers.append(Relu())
        width = h
    layers.append(new_dense(rng, width, n_classes))
    return MlpModel(layers, seed_lineage=[{"init_seed": seed}])


# --------------------------------------------------------------------------
# forward / backward


def _check_batch(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.in_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match model input (n, {model.in_dim})")
    return batch


def _forward(model: MlpModel, x: np.ndarray, training: bool, update_stats: bool, upto: int | None = None):
    """Run layers [0, upto] (default: through the head) and keep a backprop cache."""
    last = model.head_index if upto is None else upto
    taps_at = set(model.tap_indices())
    cache = []
    taps = []
    out = x
    for i, layer in enumerate(model.layers[: last + 1]):
        if isinstance(layer, Dense):
            cache.append(out)
            out = out @ layer.weight.T + layer.bias
        elif isinstance(layer, BatchNorm):
            n = out.shape[0]
            if training and n > 0:
                mean = out.mean(axis=0)
                var = out.var(axis=0)
                if update_stats:
                    unbiased = var * n / (n - 1) if n > 1 else var
                    m = layer.momentum
                    layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
                    layer.running_var[...] = (1 - m) * layer.running_var + m * unbiased
            else:
                mean, var = layer.running_mean, layer.running_var
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (out - mean) * inv_std
            cache.append((xhat, inv_std, training and n > 0))
            out = xhat * layer.gamma + layer.beta
        else:
            cache.append(out)
            out = np.maximum(out, 0.0)
        if i in taps_at:
            taps.append(out)
    return out, taps, cache


def forward_with_taps(model: MlpModel, batch: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the tapped layer outputs (see ``MlpModel.tap_indices``).

    In training mode BatchNorm normalizes with batch statistics and updates its
    running statistics; in inference mode it uses the running statistics.
    """
    x = _check_batch(model, batch)
    logits, taps, _ = _forward(model, x, model.training, update_stats=True)
    return logits, taps


def predict(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    x = _check_batch(model, batch)
    logits, _, _ = _forward(model, x, False, False)
    return np.argmax(logits, axis=1)


def features(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Penultimate representation h(x) in inference mode."""
    x = _check_batch(model, batch)
    if model.head_index == 0:
        return x.copy()
    out, _, _ = _forward(model, x, False, False, upto=model.head_index - 1)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def check_labels(labels, n_classes: int, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}); got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


class TrainableMask(frozenset):
    """Set of parameter names that receive updates."""

    @classmethod
    def of(cls, model: MlpModel, names: Iterable[str]) -> "TrainableMask":
        mask = cls(names)
        mask.validate(model)
        return mask

    @classmethod
    def all(cls, model: MlpModel) -> "TrainableMask":
        return cls(model.parameters())

    @classmethod
    def head(cls, model: MlpModel) -> "TrainableMask":
        return cls(model.head_names())

    @classmethod
    def affine(cls, model: MlpModel, include_head: bool = True) -> "TrainableMask":
        names = [f"{i}.{t}" for i, layer in enumerate(model.layers)
                 if isinstance(layer, BatchNorm) for t in ("gamma", "beta")]
        if include_head:
            names += model.head_names()
        return cls(names)

    def validate(self, model: MlpModel) -> None:
        if not self:
            raise ValueError("trainable mask flags no tensors")
        unknown = sorted(set(self) - set(model.parameters()))
        if unknown:
            raise ValueError(f"mask names tensors not in the model: {unknown}")


def backward(model: MlpModel, batch, labels, mask: TrainableMask | None = None,
             weight_decay: float = 0.0, update_stats: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients of mean cross-entropy + 0.5 * weight_decay * ||theta||^2.

    The decay term covers masked weights and BatchNorm affine tensors (not
    biases). Unmasked tensors get exactly-zero gradients.
    """
    x = _check_batch(model, batch)
    labels = check_labels(labels, model.n_classes, x.shape[0])
    params = model.parameters()
    mask = TrainableMask.all(model) if mask is None else mask
    mask.validate(model)

    logits, _, cache = _forward(model, x, model.training, update_stats)
    loss, delta = cross_entropy(logits, labels)
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    lowest = min(int(name.split(".")[0]) for name in mask)
    for i in range(model.head_index, lowest - 1, -1):
        layer = model.layers[i]
        inp = cache[i]
        if isinstance(layer, Dense):
            if f"{i}.weight" in mask:
                grads[f"{i}.weight"] = delta.T @ inp
            if f"{i}.bias" in mask:
                grads[f"{i}.bias"] = delta.sum(axis=0)
            if i > lowest:
                delta = delta @ layer.weight
        elif isinstance(layer, BatchNorm):
            xhat, inv_std, batch_stats = inp
            if f"{i}.gamma" in mask:
                grads[f"{i}.gamma"] = (delta * xhat).sum(axis=0)
            if f"{i}.beta" in mask:
                grads[f"{i}.beta"] = delta.sum(axis=0)
            if i > lowest:
                dxhat = delta * layer.gamma
                if batch_stats:
                    n = dxhat.shape[0]
                    delta = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    delta = dxhat * inv_std
        else:
            delta = delta * (inp > 0)

    if weight_decay:
        for name in mask:
            if name.split(".")[1] in DECAYED:
                loss += 0.5 * weight_decay * float(np.sum(params[name] ** 2))
                grads[name] = grads[name] + weight_decay * params[name]
    return loss, grads


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def sgd_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict,
               cfg: SgdConfig, names: Iterable[str]) -> dict:
    """In-place momentum SGD on ``params[name]`` for ``name`` in ``names``.

    Decay is folded into the gradient (``g + wd * theta``) before the momentum
    buffer update ``v = mu * v + g``; then ``theta -= lr * v``.
    """
    for name in sorted(names):
        theta = params[name]
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if cfg.weight_decay and name.split(".")[-1] in DECAYED:
            g = g + cfg.weight_decay * theta
        v = state.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state[name] = v
        theta -= cfg.learning_rate * v
    return state


def sgd_step(model: MlpModel, grads: Mapping[str, np.ndarray], state: dict, cfg: SgdConfig,
             mask: TrainableMask | None = None) -> tuple[MlpModel, dict]:
    mask = TrainableMask.all(model) if mask is None else mask
    sgd_update(model.parameters(), grads, state, cfg, mask)
    return model, state


def shuffled_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: MlpModel, x: np.ndarray, y: np.ndarray, cfg: SgdConfig, mask: TrainableMask | None = None,
          *, seed: int = 0, batches=None, update_stats: bool = True) -> list[float]:
    """Minibatch SGD in place; returns the mean training loss of every epoch.

    ``batches`` optionally replaces the default seeded shuffle: a callable
    ``(rng) -> list of index arrays`` invoked once per epoch.
    """
    mask = TrainableMask.all(model) if mask is None else mask
    mask.validate(model)
    rng = np.random.default_rng([seed, 2])
    state: dict = {}
    history = []
    for _ in range(cfg.epochs):
        epoch = batches(rng) if batches is not None else shuffled_batches(rng, len(x), cfg.batch_size)
        total, count = 0.0, 0
        for idx in epoch:
            loss, grads = backward(model, x[idx], y[idx], mask, update_stats=update_stats)
            sgd_step(model, grads, state, cfg, mask)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    return history


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_error: dict[str, float]
    excluded: dict[str, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_error.values(), default=0.0)


def _relu_pattern(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    _, _, cache = _forward(model, x, model.training, update_stats=False)
    return [np.sign(cache[i]) for i, layer in enumerate(model.layers[: model.head_index + 1])
            if isinstance(layer, Relu)]


def grad_check(model: MlpModel, batch, labels, tolerance: float = 1e-4, *, step: float = 1e-4,
               atol: float = 1e-6, weight_decay: float = 0.0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, atol / tolerance)``,
    i.e. relative error with an absolute floor. Coordinates whose perturbation
    moves any ReLU pre-activation across (or onto) zero are skipped.
    """
    model = model.copy()
    x = _check_batch(model, batch)
    labels = check_labels(labels, model.n_classes, x.shape[0])
    _, analytic = backward(model, x, labels, weight_decay=weight_decay, update_stats=False)
    base_pattern = _relu_pattern(model, x)
    floor = atol / tolerance

    def loss_at() -> float:
        return backward(model, x, labels, weight_decay=weight_decay, update_stats=False)[0]

    report_err: dict[str, float] = {}
    excluded: dict[str, int] = {}
    for name, theta in model.parameters().items():
        worst, skipped = 0.0, 0
        for j in np.ndindex(theta.shape):
            orig = theta[j]
            if any(np.any(p == 0) for p in base_pattern):
                skipped += 1
                continue
            theta[j] = orig + step
            plus, pat_plus = loss_at(), _relu_pattern(model, x)
            theta[j] = orig - step
            minus, pat_minus = loss_at(), _relu_pattern(model, x)
            theta[j] = orig
            if any(np.any(a != b) for a, b in zip(pat_plus, base_pattern)) or \
                    any(np.any(a != b) for a, b in zip(pat_minus, base_pattern)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * step)
            a = analytic[name][j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report_err[name] = worst
        excluded[name] = skipped
    return GradCheckReport(report_err, excluded, tolerance)


# --------------------------------------------------------------------------
# checkpoints


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Dense):
        return {"type": "dense", "shape": list(layer.weight.shape),
                "weight": layer.weight.ravel().tolist(), "bias": layer.bias.tolist()}
    if isinstance(layer, BatchNorm):
        return {"type": "batchnorm", "width": layer.width, "eps": layer.eps, "momentum": layer.momentum,
                "gamma": layer.gamma.tolist(), "beta": layer.beta.tolist(),
                "running_mean": layer.running_mean.tolist(), "running_var": layer.running_var.tolist()}
    return {"type": "relu"}


def _layer_from_dict(d: dict):
    kind = d["type"]
    if kind == "dense":
        out, inp = d["shape"]
        return Dense(np.array(d["weight"], dtype=np.float64).reshape(out, inp),
                     np.array(d["bias"], dtype=np.float64).reshape(out))
    if kind == "batchnorm":
        arr = lambda k: np.array(d[k], dtype=np.float64).reshape(d["width"])  # noqa: E731
        return BatchNorm(arr("running_mean"), arr("running_var"), arr("gamma"), arr("beta"),
                         float(d["eps"]), float(d["momentum"]))
    if kind == "relu":
        return Relu()
    raise ValueError(f"unknown layer type {kind!r}")


def model_to_dict(model: MlpModel) -> dict:
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "head_index": model.head_index, "seed_lineage": model.seed_lineage,
            "layers": [_layer_to_dict(layer) for layer in model.layers]}


def model_from_dict(d: dict) -> MlpModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not an MLP checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    return MlpModel([_layer_from_dict(x) for x in d["layers"]], head_index=d["head_index"],
                    seed_lineage=list(d.get("seed_lineage", [])))


def dumps(obj: dict) -> str:
    # repr-based float formatting in json round-trips float64 exactly
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_model(model: MlpModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(model_to_dict(model)))
    return path


def load_model(path) -> MlpModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return model_from_dict(json.loads(path.read_text()))


def diff_parameters(before: MlpModel, after: MlpModel, include_buffers: bool = True) -> list[str]:
    """Names of tensors that are not bit-identical between two models."""
    a, b = before.parameters(), after.parameters()
    if include_buffers:
        a, b = {**a, **before.buffers()}, {**b, **after.buffers()}
    changed = [k for k in a if k not in b or a[k].shape != b[k].shape or
               a[k].tobytes() != b[k].tobytes()]
    changed += [k for k in b if k not in a]
    return sorted(changed)
