"""Message-passing node classifiers built on the autodiff tape.

All six architectures expose the per-layer outputs ``h^(1..K)``; the last
entry is the logit layer, which has no activation. Feature and adjacency
overrides may be tape tensors, which is how metamer synthesis differentiates
with respect to the input graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .graph import Graph, normalize_adjacency, scaled_laplacian, shortest_path_distances
from .tensor import Tensor

ARCHS = ("gcn", "chebnet", "sage", "gin", "gat", "graphormer")
ACTIVATIONS = ("relu", "elu")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "gcn"
    in_dim: int = 64
    num_classes: int = 4
    layers: int = 2
    hidden_dim: int = 16
    activation: str = "relu"
    residual: bool = False
    cheb_order: int = 2
    heads: int = 1
    spd_cap: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if min(self.layers, self.hidden_dim, self.cheb_order, self.heads, self.spd_cap) < 1:
            raise ConfigError("layers, hidden_dim, cheb_order, heads and spd_cap must be >= 1")
        if self.in_dim < 1 or self.num_classes < 1:
            raise ConfigError("in_dim and num_classes must be >= 1")
        if self.arch in ("gat", "graphormer") and self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")

    def dims(self) -> list[int]:
        return [self.in_dim] + [self.hidden_dim] * (self.layers - 1) + [self.num_classes]

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


@dataclass
class ActivationBundle:
    layers: list[Tensor]
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> Tensor:
        return self.layers[-1]

    @property
    def predictions(self) -> np.ndarray:
        # argmax returns the first maximal index, the lowest-index tie-break
        return np.argmax(self.logits.value, axis=1)


def _glorot(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _adjacency_tensor(adj) -> Tensor:
    return adj if isinstance(adj, Tensor) else Tensor(adj)


class GraphOperators:
    """Propagation matrices derived from one adjacency, shared by all layers."""

    def __init__(self, arch: str, adjacency, spd_cap: int):
        self.arch = arch
        differentiable = isinstance(adjacency, Tensor) and adjacency.requires_grad
        a = _adjacency_tensor(adjacency)
        n = a.shape[0]
        self.n = n
        eye = np.eye(n)
        if arch == "gcn":
            if differentiable:
                at = a + eye
                dinv = T.power(T.sum(at, axis=1), -0.5)
                self.prop = dinv * at * dinv.T
            else:
                self.prop = Tensor(normalize_adjacency(a.value))
        elif arch == "chebnet":
            if differentiable:
                deg = T.sum(a, axis=1)
                dinv = T.power(deg + (deg.value == 0).astype(float), -0.5)
                self.prop = -(dinv * a * dinv.T)
            else:
                self.prop = Tensor(scaled_laplacian(a.value))
        elif arch == "sage":
            deg = T.sum(a, axis=1)
            self.prop = a / (deg + (deg.value == 0).astype(float))
        elif arch == "gin":
            self.prop = a + eye
        elif arch == "gat":
            self.prop = a + eye
        elif arch == "graphormer":
            self.prop = None
            self.spd = shortest_path_distances(a.value, spd_cap)


class Model:
    """Weights plus the forward rule for one architecture."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    # ------------------------------------------------------------ parameters

    def _shapes(self):
        cfg = self.config
        dims = cfg.dims()
        shapes = []
        for k in range(1, cfg.layers + 1):
            din, dout = dims[k - 1], dims[k]
            last = k == cfg.layers
            p = f"layer{k}."
            if cfg.arch == "gcn":
                shapes.append((p + "weight", (din, dout)))
            elif cfg.arch == "chebnet":
                shapes += [(p + f"weight{j}", (din, dout)) for j in range(cfg.cheb_order + 1)]
            elif cfg.arch == "sage":
                shapes.append((p + "weight", (2 * din, dout)))
            elif cfg.arch == "gin":
                shapes += [(p + "mlp1.weight", (din, dout)), (p + "mlp1.bias", (1, dout)),
                           (p + "mlp2.weight", (dout, dout))]
            elif cfg.arch in ("gat", "graphormer"):
                fh = dout if last else dout // cfg.heads
                for h in range(cfg.heads):
                    q = p + f"head{h}."
                    if cfg.arch == "gat":
                        shapes += [(q + "weight", (din, fh)), (q + "att_src", (fh, 1)),
                                   (q + "att_dst", (fh, 1))]
                    else:
                        shapes += [(q + "query", (din, fh)), (q + "key", (din, fh)),
                                   (q + "value", (din, fh)), (q + "spd_bias", (1, cfg.spd_cap + 1))]
            shapes.append((p + "bias", (1, dout)))
            if cfg.residual and din != dout:
                shapes.append((p + "skip", (din, dout)))
        return shapes

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self._shapes():
            if name.endswith("spd_bias"):
                # locality prior: attention starts out favouring nearby nodes
                params[name] = -np.arange(shape[1], dtype=np.float64)[None, :]
            elif name.endswith("bias"):
                params[name] = np.zeros(shape)
            else:
                params[name] = _glorot(rng, shape[0], shape[1], shape)
        return params

    def parameter_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    # ------------------------------------------------------------ forward

    def operators(self, adjacency) -> GraphOperators:
        return GraphOperators(self.config.arch, adjacency, self.config.spd_cap)

    def _activate(self, x: Tensor) -> Tensor:
        return T.relu(x) if self.config.activation == "relu" else T.elu(x, 1.0)

    def _layer(self, k, h, ops, P, attention, pre_activation=False):
        cfg = self.config
        p = f"layer{k}."
        last = k == cfg.layers
        if cfg.arch == "gcn":
            out = ops.prop @ (h @ P[p + "weight"])
        elif cfg.arch == "chebnet":
            t_prev, t_cur = None, h
            out = h @ P[p + "weight0"]
            for j in range(1, cfg.cheb_order + 1):
                if j == 1:
                    t_next = ops.prop @ h
                else:
                    t_next = T.scale(ops.prop @ t_cur, 2.0) - t_prev
                t_prev, t_cur = t_cur, t_next
                out = out + t_cur @ P[p + f"weight{j}"]
        elif cfg.arch == "sage":
            out = T.concat_cols(h, ops.prop @ h) @ P[p + "weight"]
        elif cfg.arch == "gin":
            agg = ops.prop @ h
            mid = self._activate(agg @ P[p + "mlp1.weight"] + P[p + "mlp1.bias"])
            out = mid @ P[p + "mlp2.weight"]
        elif cfg.arch == "gat":
            heads = [self._gat_head(h, ops, P, p + f"head{i}.", attention) for i in range(cfg.heads)]
            out = _merge_heads(heads, last)
        else:
            heads = [self._attn_head(h, ops, P, p + f"head{i}.", attention) for i in range(cfg.heads)]
            out = _merge_heads(heads, last)
        out = out + P[p + "bias"]
        if cfg.residual:
            out = out + (h @ P[p + "skip"] if p + "skip" in P else h)
        return out if last or pre_activation else self._activate(out)

    def _gat_head(self, h, ops, P, q, attention):
        z = h @ P[q + "weight"]
        logits = T.leaky_relu((z @ P[q + "att_dst"]) + (z @ P[q + "att_src"]).T, 0.2)
        mask = ops.prop
        shift = np.where(mask.value > 0, logits.value, -np.inf).max(axis=1, keepdims=True)
        weights = T.exp(logits - shift) * mask
        att = weights / T.sum(weights, axis=1)
        attention.append(att.value)
        return att @ z

    def _attn_head(self, h, ops, P, q, attention):
        qv, kv, vv = h @ P[q + "query"], h @ P[q + "key"], h @ P[q + "value"]
        logits = T.scale(qv @ kv.T, 1.0 / math.sqrt(qv.shape[1])) + T.gather(P[q + "spd_bias"], ops.spd)
        att = T.softmax_rows(logits)
        attention.append(att.value)
        return att @ vv

    def forward(self, graph: Graph, features=None, adjacency=None, *, ops=None,
                params: dict[str, Tensor] | None = None, upto: int | None = None,
                pre_activation: bool = False) -> ActivationBundle:
        """Run layers ``1..upto`` (default all).

        With ``pre_activation`` the last computed layer is returned before its
        activation.
        """
        cfg = self.config
        x = graph.features if features is None else features
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape != graph.features.shape:
            raise DimensionError(f"feature override shape {x.shape} != {graph.features.shape}")
        if x.shape[1] != cfg.in_dim:
            raise DimensionError(f"model expects {cfg.in_dim} input features, got {x.shape[1]}")
        if ops is None:
            adj = graph.adjacency if adjacency is None else adjacency
            if _adjacency_tensor(adj).shape != graph.adjacency.shape:
                raise DimensionError("adjacency override shape mismatch")
            ops = self.operators(adj)
        P = params if params is not None else self.parameter_tensors()
        stop = cfg.layers if upto is None else upto
        bundle = ActivationBundle(layers=[])
        h = x
        for k in range(1, stop + 1):
            h = self._layer(k, h, ops, P, bundle.attention, pre_activation and k == stop)
            bundle.layers.append(h)
        return bundle

    # ------------------------------------------------------------ checkpoints

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        try:
            config = ModelConfig(**doc["config"])
            params = {k: np.array(w["data"], dtype=np.float64).reshape(w["shape"])
                      for k, w in doc["weights"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed checkpoint: {exc}") from exc
        model = cls(config, params)
        expected = dict(model._shapes())
        if set(expected) != set(params) or any(params[k].shape != tuple(s) for k, s in expected.items()):
            raise FormatError("checkpoint weights do not match config")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Model":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise FormatError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)


def _merge_heads(heads, last):
    if len(heads) == 1:
        return heads[0]
    if last:
        total = heads[0]
        for h in heads[1:]:
            total = total + h
        return T.scale(total, 1.0 / len(heads))
    return T.concat_cols(*heads)


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def model_forward(model: Model, graph: Graph, features=None, adjacency=None, **kw) -> ActivationBundle:
    return model.forward(graph, features, adjacency, **kw)


def activations_at(model: Model, graph: Graph, k: int, features=None, adjacency=None, **kw) -> Tensor:
    if not 1 <= k <= model.config.layers:
        raise ConfigError(f"layer {k} outside 1..{model.config.layers}")
    return model.forward(graph, features, adjacency, upto=k, **kw).layers[k - 1]


def config_for_graph(graph: Graph, **kw) -> ModelConfig:
    kw.setdefault("in_dim", graph.d)
    kw.setdefault("num_classes", graph.num_classes)
    return ModelConfig(**kw)
