"""Feature and structure metamer synthesis.

A metamer is found by gradient descent on the normalized activation-matching
loss at one layer of a trained model. Binary inputs are produced by a sigmoid
relaxation followed by a top-rho hard mask; the straight-through node makes
the forward pass see the hard mask while gradients flow to the soft
probabilities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateReferenceError, DimensionError, DivergenceError, NumericError
from .graph import Graph
from .models import Model, activations_at
from .tensor import Tensor
from .training import AdamState, adam_step

MODES = ("feature-binary", "feature-continuous", "structure")


@dataclass(frozen=True)
class SynthConfig:
    target_layer: int = 1
    steps: int = 2000
    lr: float = 0.0005
    slope: float = 5.0
    lambda_reg: float = 0.1
    rho_init: float | str = "auto"
    mode: str = "feature-binary"
    converge_tol: float = 1e-3
    seed: int = 0
    rho_penalty: float = 0.01
    # feature-continuous: project onto [0, 1] instead of the non-negative orthant
    clip_unit: bool = False
    structure_margin: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.target_layer < 1 or self.steps < 1:
            raise ConfigError("target_layer and steps must be >= 1")
        if self.slope <= 0 or self.lr <= 0:
            raise ConfigError("slope and lr must be positive")
        if self.rho_init != "auto" and not 0 < float(self.rho_init) < 1:
            raise ConfigError("rho_init must be 'auto' or lie in (0, 1)")


@dataclass
class MetamerResult:
    mode: str
    target_layer: int
    hard_output: np.ndarray
    soft_output: np.ndarray
    final_loss: float
    converged: bool
    activation_similarity: float
    rho_final: float | None
    loss_trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def steps_run(self) -> int:
        return self.loss_trace[-1][0] if self.loss_trace else 0

    def to_dict(self) -> dict:
        if self.mode == "structure":
            u, v = np.nonzero(np.triu(self.hard_output, 1))
            hard = [[int(a), int(b)] for a, b in zip(u, v)]
        else:
            hard = self.hard_output.tolist()
        return {
            "mode": self.mode,
            "target_layer": self.target_layer,
            "final_loss": self.final_loss,
            "activation_similarity": self.activation_similarity,
            "converged": self.converged,
            "rho_final": self.rho_final,
            "hard_output": hard,
            "loss_trace": [list(t) for t in self.loss_trace],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


# ---------------------------------------------------------------- building blocks


def activation_loss(h_prime, h_ref) -> Tensor:
    """``||h' - h||^2 / ||h||^2`` over the whole layer matrix."""
    h_ref = h_ref.value if isinstance(h_ref, Tensor) else np.asarray(h_ref, dtype=np.float64)
    h_prime = T.as_tensor(h_prime)
    if h_prime.shape != h_ref.shape:
        raise DimensionError(f"activation shapes differ: {h_prime.shape} vs {h_ref.shape}")
    denom = float(np.sum(h_ref * h_ref))
    if denom == 0:
        raise DegenerateReferenceError("reference activation is identically zero")
    return T.scale(T.sq_norm(h_prime - h_ref), 1.0 / denom)


def init_soft_features(graph_or_features, seed: int) -> np.ndarray:
    """Column-wise ``mu + tau * eps`` with standard normal ``eps``."""
    x = graph_or_features.features if isinstance(graph_or_features, Graph) else np.asarray(graph_or_features)
    if x.size == 0:
        raise ConfigError("cannot initialise from empty features")
    mu, tau = x.mean(axis=0), x.std(axis=0)
    eps = np.random.default_rng(seed).standard_normal(x.shape)
    return mu[None, :] + tau[None, :] * eps


def init_soft_adjacency(n: int, seed: int, rho: float = 0.5, slope: float = 1.0) -> np.ndarray:
    """Random symmetric zero-diagonal logits whose sigmoid averages roughly ``rho``.

    Entries are ``(logit(rho) + eps) / slope`` with standard normal ``eps``.
    """
    upper = np.triu(np.random.default_rng(seed).standard_normal((n, n)) + _logit(rho), 1) / slope
    return upper + upper.T


def soft_probabilities(soft, slope: float) -> Tensor:
    if slope <= 0:
        raise ConfigError("slope must be positive")
    return T.sigmoid(T.scale(soft, slope))


def top_rho_mask(P, rho: float, symmetric: bool = False) -> np.ndarray:
    """Ones at the ``floor(rho * eligible)`` largest entries of ``P``.

    Ties go to the lower flattened index. In symmetric mode only the strict
    upper triangle is eligible and the selection is mirrored.
    """
    P = np.asarray(P, dtype=np.float64)
    if not 0 < rho < 1:
        raise ConfigError(f"rho must lie in (0, 1), got {rho}")
    if symmetric:
        n = P.shape[0]
        iu = np.triu_indices(n, 1)
        vals = P[iu]
    else:
        vals = P.ravel()
    count = math.floor(rho * vals.size)
    chosen = np.argsort(-vals, kind="stable")[:count]
    flat = np.zeros(vals.size)
    flat[chosen] = 1.0
    if not symmetric:
        return flat.reshape(P.shape)
    out = np.zeros(P.shape)
    out[iu] = flat
    return out + out.T


def ste_combine(P, hard) -> Tensor:
    return T.ste(P, hard)


def margin_regularizer(P, lambda_reg: float = 1.0) -> Tensor:
    P = T.as_tensor(P)
    return T.scale(T.mean(P * T.sub(1.0, P)), lambda_reg)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.sum(a * b) / (na * nb))


def _resolve_rho(config: SynthConfig, ones: int, eligible: int) -> float:
    if config.rho_init != "auto":
        return float(config.rho_init)
    # half a cell above the empirical density so floor(rho * eligible) == ones
    rho = (ones + 0.5) / eligible
    return min(max(rho, 0.5 / eligible), 1 - 0.5 / eligible)


# ---------------------------------------------------------------- synthesis loops


class _Loop:
    """Shared Adam loop: evaluate, record, stop on convergence, update."""

    def __init__(self, config: SynthConfig, soft: np.ndarray, rho: float | None):
        self.config = config
        self.params = {"soft": soft}
        if rho is not None:
            self.params["rho_logit"] = np.array([[_logit(rho)]])
        self.state = AdamState()
        self.trace: list[tuple[int, float, float]] = []

    @property
    def rho(self) -> float | None:
        if "rho_logit" not in self.params:
            return None
        return float(1.0 / (1.0 + math.exp(-self.params["rho_logit"][0, 0])))

    def run(self, evaluate):
        """``evaluate(leaves) -> (total, l_act, l_margin, hard, soft_out, h_prime)``."""
        cfg = self.config
        for step in range(cfg.steps + 1):
            leaves = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
            try:
                # overflow surfaces as NumericError from the tape, not as a warning
                with np.errstate(over="ignore", invalid="ignore"):
                    total, l_act, l_margin, hard, soft_out, h_prime = evaluate(leaves)
            except NumericError as exc:
                raise DivergenceError(f"synthesis diverged at step {step}: {exc}", self.trace) from exc
            la, lm = l_act.item(), (l_margin.item() if l_margin is not None else 0.0)
            self.trace.append((step, la, lm))
            if not (math.isfinite(la) and math.isfinite(lm)):
                raise DivergenceError(f"non-finite loss at step {step}", self.trace)
            done = la < cfg.converge_tol
            if done or step == cfg.steps:
                return la, done, hard, soft_out, h_prime
            T.backward(total)
            adam_step(self.state, {"soft": self.params["soft"]}, {"soft": leaves["soft"].grad}, cfg.lr)
            if "rho_logit" in self.params:
                # plain descent: Adam would rescale the tiny surrogate gradient to a full lr step
                self.params["rho_logit"] -= cfg.lr * leaves["rho_logit"].grad
            self.project()

    def project(self):
        pass


class _ContinuousLoop(_Loop):
    def project(self):
        hi = 1.0 if self.config.clip_unit else np.inf
        np.clip(self.params["soft"], 0.0, hi, out=self.params["soft"])


def _reference(model, graph, k, ops):
    h_ref = activations_at(model, graph, k, ops=ops).value
    if not np.any(h_ref):
        raise DegenerateReferenceError(f"layer {k} activation of the reference graph is zero")
    return h_ref


def _check_layer(model: Model, config: SynthConfig):
    if not 1 <= config.target_layer <= model.config.layers:
        raise ConfigError(f"target layer {config.target_layer} outside 1..{model.config.layers}")


def synthesize_feature_metamer(model: Model, graph: Graph, config: SynthConfig,
                               initial_soft: np.ndarray | None = None) -> MetamerResult:
    """Optimise node features against layer ``config.target_layer`` with adjacency fixed."""
    if config.mode not in ("feature-binary", "feature-continuous"):
        raise ConfigError(f"feature synthesis cannot run in mode {config.mode!r}")
    _check_layer(model, config)
    k = config.target_layer
    ops = model.operators(graph.adjacency)
    h_ref = _reference(model, graph, k, ops)
    soft = (init_soft_features(graph, config.seed) if initial_soft is None
            else np.array(initial_soft, dtype=np.float64))
    if soft.shape != graph.features.shape:
        raise DimensionError("initial_soft shape does not match the graph features")

    if config.mode == "feature-continuous":
        loop = _ContinuousLoop(config, soft, None)
        loop.project()

        def evaluate(leaves):
            s = leaves["soft"]
            hard = np.maximum(s.value, 0.0)
            # ReLU in the forward pass; identity gradient so the loop is plain projected descent
            x = T.ste(s, hard)
            h = activations_at(model, graph, k, features=x, ops=ops)
            l_act = activation_loss(h, h_ref)
            return l_act, l_act, None, hard, s.value.copy(), h.value
    else:
        rho0 = _resolve_rho(config, int(np.count_nonzero(graph.features)), graph.features.size)
        loop = _Loop(config, soft, rho0)

        def evaluate(leaves):
            P = soft_probabilities(leaves["soft"], config.slope)
            rho_t = T.sigmoid(leaves["rho_logit"])
            hard = top_rho_mask(P.value, rho_t.item())
            h = activations_at(model, graph, k, features=ste_combine(P, hard), ops=ops)
            l_act = activation_loss(h, h_ref)
            l_margin = margin_regularizer(P, config.lambda_reg)
            l_rho = T.scale(T.sq_norm(T.mean(P) - rho_t), config.rho_penalty)
            return l_act + l_margin + l_rho, l_act, l_margin, hard, P.value, h.value

    final, converged, hard, soft_out, h_prime = loop.run(evaluate)
    return MetamerResult(config.mode, k, hard, soft_out, final, converged,
                         _cosine(h_prime, h_ref), loop.rho, loop.trace)


def synthesize_structure_metamer(model: Model, graph: Graph, config: SynthConfig,
                                 initial_soft: np.ndarray | None = None) -> MetamerResult:
    """Optimise a symmetric binary adjacency against layer ``config.target_layer``."""
    if config.mode != "structure":
        raise ConfigError(f"structure synthesis cannot run in mode {config.mode!r}")
    _check_layer(model, config)
    k = config.target_layer
    n = graph.n
    if n < 2:
        raise ConfigError("structure synthesis needs at least two nodes")
    h_ref = _reference(model, graph, k, model.operators(graph.adjacency))
    pairs = n * (n - 1) // 2
    rho0 = _resolve_rho(config, len(graph.edges()), pairs)
    if initial_soft is None:
        soft = init_soft_adjacency(n, config.seed, rho0, config.slope)
    else:
        soft = np.array(initial_soft, dtype=np.float64)
    if soft.shape != (n, n):
        raise DimensionError("initial_soft must be n x n")
    soft = 0.5 * (soft + soft.T)
    np.fill_diagonal(soft, 0.0)
    off_diag = 1.0 - np.eye(n)
    loop = _Loop(config, soft, rho0)

    def evaluate(leaves):
        s = leaves["soft"]
        P = soft_probabilities(T.scale(s + s.T, 0.5), config.slope)
        rho_t = T.sigmoid(leaves["rho_logit"])
        hard = top_rho_mask(P.value, rho_t.item(), symmetric=True)
        adj = ste_combine(P, hard)
        h = activations_at(model, graph, k, adjacency=adj)
        l_act = activation_loss(h, h_ref)
        off_mean = T.scale(T.sum(P * off_diag), 1.0 / (n * (n - 1)))
        total = l_act + T.scale(T.sq_norm(off_mean - rho_t), config.rho_penalty)
        l_margin = None
        if config.structure_margin:
            l_margin = margin_regularizer(P, config.lambda_reg)
            total = total + l_margin
        return total, l_act, l_margin, hard, P.value, h.value

    final, converged, hard, soft_out, h_prime = loop.run(evaluate)
    return MetamerResult("structure", k, hard, soft_out, final, converged,
                         _cosine(h_prime, h_ref), loop.rho, loop.trace)


def synthesize(model: Model, graph: Graph, config: SynthConfig, **kw) -> MetamerResult:
    if config.mode == "structure":
        return synthesize_structure_metamer(model, graph, config, **kw)
    return synthesize_feature_metamer(model, graph, config, **kw)


def metamer_graph(graph: Graph, result: MetamerResult) -> Graph:
    """The reference graph with the metamer's features or adjacency swapped in."""
    if result.mode == "structure":
        return graph.replace(adjacency=result.hard_output)
    kind = "binary" if result.mode == "feature-binary" else "continuous"
    return graph.replace(features=result.hard_output, feature_kind=kind)
