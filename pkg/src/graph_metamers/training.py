"""Full-batch node-classification training with Adam and optional feature-space PGD."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .graph import Graph
from .models import Model
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.001
    weight_decay: float = 5e-4
    adversarial: bool = False
    adv_epsilon: float = 0.05
    adv_steps: int = 5
    adv_step_size: float | None = None  # defaults to adv_epsilon / 4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.adv_epsilon < 0:
            raise ConfigError("adv_epsilon must be non-negative")
        if self.adversarial and self.adv_steps < 1:
            raise ConfigError("adv_steps must be >= 1 for adversarial training")

    @property
    def step_size(self) -> float:
        return self.adv_epsilon / 4 if self.adv_step_size is None else self.adv_step_size


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, weights: dict, grads: dict, lr: float, weight_decay: float = 0.0) -> dict:
    """One bias-corrected Adam update, in place on ``weights``.

    ``weight_decay`` is added to the gradient (coupled L2), as torch's Adam does.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ConfigError(f"gradient shape {g.shape} != weight shape {w.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * w
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return weights


def accuracy(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(np.mean(pred[mask] == labels[mask]))


def pgd_features(model: Model, graph: Graph, labels, mask, epsilon: float, steps: int,
                 step_size: float, ops=None, features=None) -> np.ndarray:
    """L-inf projected gradient ascent on the training loss, starting at the clean features."""
    clean = graph.features if features is None else np.asarray(features)
    lo, hi = clean - epsilon, clean + epsilon
    if graph.feature_kind == "binary":
        lo, hi = np.maximum(lo, 0.0), np.minimum(hi, 1.0)
    x = clean.copy()
    for _ in range(steps):
        xt = Tensor(x, requires_grad=True)
        logits = model.forward(graph, xt, ops=ops).logits
        T.backward(T.log_softmax_nll(logits, labels, mask))
        x = np.clip(x + step_size * np.sign(xt.grad), lo, hi)
    return x


@dataclass
class TrainResult:
    model: Model
    train_acc: float
    test_acc: float
    loss_curve: list[float]
    log: list[dict]

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "test_acc"])
            writer.writeheader()
            writer.writerows(self.log)


def train(model: Model, graph: Graph, config: TrainConfig, features=None) -> TrainResult:
    """Train a copy of ``model`` and return it with its metrics.

    ``features`` replaces the graph's features during training only (used when
    retraining on metamer features); accuracies are always measured on the
    graph's own features.
    """
    if not graph.train_mask.any():
        raise ConfigError("empty train mask")
    model = model.copy()
    labels, mask = graph.labels, graph.train_mask
    train_x = graph.features if features is None else np.asarray(features, dtype=np.float64)
    ops = model.operators(graph.adjacency)
    state = AdamState()
    loss_curve, log = [], []

    for epoch in range(1, config.epochs + 1):
        x = train_x
        if config.adversarial:
            x = pgd_features(model, graph, labels, mask, config.adv_epsilon, config.adv_steps,
                             config.step_size, ops=ops, features=train_x)
        params = model.parameter_tensors(requires_grad=True)
        logits = model.forward(graph, x, params=params, ops=ops).logits
        loss = T.log_softmax_nll(logits, labels, mask)
        T.backward(loss)
        adam_step(state, model.params, {k: p.grad for k, p in params.items()}, config.lr,
                  config.weight_decay)
        pred = np.argmax(logits.value, axis=1)
        loss_curve.append(loss.item())
        log.append({"epoch": epoch, "loss": repr(loss.item()),
                    "train_acc": repr(accuracy(pred, labels, mask)),
                    "test_acc": repr(accuracy(pred, labels, graph.test_mask))})

    pred = model.forward(graph, ops=ops).predictions
    return TrainResult(model, accuracy(pred, labels, mask), accuracy(pred, labels, graph.test_mask),
                       loss_curve, log)
