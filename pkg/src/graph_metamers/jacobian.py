"""Single-node Jacobians, numerical rank and activation volume factors.

The local metamer dimension at a node is ``d - r``: the input dimension minus
the numerical rank of the layer map's Jacobian at that node's aggregated
input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .graph import Graph
from .models import Model
from .tensor import Tensor


@dataclass
class JacobianReport:
    d: int
    m: int
    singular_values: np.ndarray
    rank: int
    local_metamer_dim: int
    tolerance: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["singular_values"] = self.singular_values.tolist()
        return out


@dataclass
class VolumeReport:
    derivatives: np.ndarray
    determinant: float
    zero_count: int

    def to_dict(self) -> dict:
        return {"derivatives": self.derivatives.tolist(), "determinant": self.determinant,
                "zero_count": self.zero_count}


# ---------------------------------------------------------------- SVD


def jacobi_svd(A, tol: float = 1e-15, max_sweeps: int = 100):
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``U (m x p), s (p,), Vt (p x n)`` with ``p = min(m, n)`` and ``s``
    descending.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2:
        raise ConfigError("jacobi_svd needs a matrix")
    # work on a unit-scale copy so column dot products cannot overflow
    scale = np.abs(A).max() if A.size else 0.0
    if scale > 0:
        A = A / scale
    transposed = A.shape[0] < A.shape[1]
    B = A.T.copy() if transposed else A.copy()
    p, q = B.shape
    V = np.eye(q)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                alpha = B[:, i] @ B[:, i]
                beta = B[:, j] @ B[:, j]
                gamma = B[:, i] @ B[:, j]
                if abs(gamma) < 1e-300 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                bi, bj = B[:, i].copy(), B[:, j]
                B[:, i] = c * bi - s * bj
                B[:, j] = s * bi + c * bj
                vi, vj = V[:, i].copy(), V[:, j]
                V[:, i] = c * vi - s * vj
                V[:, j] = s * vi + c * vj
        if not rotated:
            break
    sv = np.linalg.norm(B, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, B, V = sv[order], B[:, order], V[:, order]
    U = np.zeros_like(B)
    nz = sv > 0
    U[:, nz] = B[:, nz] / sv[nz]
    if scale > 0:
        sv = sv * scale
    if transposed:
        return V, sv, U.T
    return U, sv, V.T


def numerical_rank(sv, rel_tol: float = 1e-8) -> int:
    sv = np.asarray(sv)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))


def local_metamer_dimension(jac, rel_tol: float = 1e-8) -> JacobianReport:
    if rel_tol <= 0:
        raise ConfigError("rel_tol must be positive")
    J = np.asarray(jac, dtype=np.float64)
    m, d = J.shape
    _, sv, _ = jacobi_svd(J)
    r = numerical_rank(sv, rel_tol)
    return JacobianReport(d=d, m=m, singular_values=sv, rank=r, local_metamer_dim=d - r, tolerance=rel_tol)


def null_space(jac, rel_tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis (columns) of the numerical null space of ``jac``."""
    J = np.asarray(jac, dtype=np.float64)
    d = J.shape[1]
    _, sv, Vt = jacobi_svd(J)
    r = numerical_rank(sv, rel_tol)
    Vr = Vt[:r].T
    # the complement projector has eigenvalue 1 on exactly the null directions
    U, s, _ = jacobi_svd(np.eye(d) - Vr @ Vr.T)
    return U[:, : d - r]


# ---------------------------------------------------------------- Jacobians


def jacobian_reverse(f, x0) -> np.ndarray:
    """One backward pass per output coordinate."""
    x = Tensor(np.asarray(x0, dtype=np.float64).reshape(1, -1), requires_grad=True)
    y = f(x)
    m = y.value.size
    rows = []
    for i in range(m):
        sel = np.zeros(y.shape)
        sel.flat[i] = 1.0
        T.backward(T.sum(y * sel))
        rows.append(x.grad.ravel().copy())
    return np.array(rows).reshape(m, x.shape[1])


def jacobian_fd(f, x0, step: float = 1e-5) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    cols = []
    for j in range(x0.shape[1]):
        e = np.zeros_like(x0)
        e[0, j] = step
        cols.append((f(Tensor(x0 + e)).value - f(Tensor(x0 - e)).value).ravel() / (2 * step))
    return np.array(cols).T


def jacobian(f, x0, step: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-8) -> np.ndarray:
    """Reverse-mode Jacobian, cross-checked row by row against central differences.

    A mismatch usually means ``x0`` sits on an activation kink.
    """
    J = jacobian_reverse(f, x0)
    J_fd = jacobian_fd(f, x0, step)
    for i, (a, b) in enumerate(zip(J, J_fd)):
        err = np.linalg.norm(a - b)
        if err > rtol * max(np.linalg.norm(a), np.linalg.norm(b)) + atol:
            raise NumericError(f"Jacobian row {i}: reverse-mode and finite differences disagree ({err:.3g})")
    return J


# ---------------------------------------------------------------- layer maps


def aggregate_node_input(graph_or_features, v: int, alpha) -> np.ndarray:
    """``sum_u alpha[v, u] x_u`` as a length-d vector."""
    X = graph_or_features.features if isinstance(graph_or_features, Graph) else np.asarray(graph_or_features)
    alpha = np.asarray(alpha, dtype=np.float64)
    if not 0 <= v < X.shape[0]:
        raise ConfigError(f"node {v} out of range")
    return alpha[v] @ X


def _activation(model: Model, pre_activation: bool):
    if pre_activation or model.config.layers == 1:
        return lambda z: z
    return model._activate


def node_map(model: Model, graph: Graph, v: int, variant: str = "aggregation",
             pre_activation: bool = False):
    """The first-layer map at node ``v`` and the point to linearise it at.

    ``variant="aggregation"`` takes the aggregated neighbourhood input as the
    variable with the node's own row held fixed (gcn, sage, gin, chebnet).
    ``variant="concat"`` (sage) takes ``[x_v || x~_v]``. ``variant="node"``
    varies node ``v``'s own feature row and recomputes the whole layer, so
    learned attention weights are differentiated too; gat and graphormer
    always use it.
    """
    cfg = model.config
    arch = cfg.arch
    if variant not in ("aggregation", "concat", "node"):
        raise ConfigError(f"unknown variant {variant!r}")
    if arch in ("gat", "graphormer"):
        variant = "node"
    if variant == "concat" and arch != "sage":
        raise ConfigError("the concat variant applies to sage only")
    P = model.params
    X = graph.features
    act = _activation(model, pre_activation)
    ops = model.operators(graph.adjacency)
    prop = None if ops.prop is None else ops.prop.value
    skip = 0.0
    if cfg.residual:
        skip = X[v:v + 1] @ P["layer1.skip"] if "layer1.skip" in P else X[v:v + 1]

    if variant == "node":
        onehot = np.zeros((graph.n, 1))
        onehot[v, 0] = 1.0
        base = X.copy()
        base[v] = 0.0

        def f(x):
            feats = T.matmul(onehot, x) + base
            if pre_activation:
                h = model.forward(graph, feats, ops=ops, upto=1, pre_activation=True).layers[0]
            else:
                h = model.forward(graph, feats, ops=ops, upto=1).layers[0]
            return T.matmul(onehot.T, h)

        return f, X[v].copy()

    if arch == "gcn":
        x0 = aggregate_node_input(X, v, prop)
        return (lambda x: act(x @ P["layer1.weight"] + P["layer1.bias"] + skip)), x0
    if arch == "gin":
        x0 = aggregate_node_input(X, v, prop)

        def f(x):
            mid = model._activate(x @ P["layer1.mlp1.weight"] + P["layer1.mlp1.bias"])
            return act(mid @ P["layer1.mlp2.weight"] + P["layer1.bias"] + skip)

        return f, x0
    if arch == "sage":
        x0 = aggregate_node_input(X, v, prop)
        W = P["layer1.weight"]
        if variant == "concat":
            return (lambda z: act(z @ W + P["layer1.bias"] + skip)), np.concatenate([X[v], x0])
        own = X[v:v + 1] @ W[: X.shape[1]] + P["layer1.bias"] + skip
        return (lambda x: act(x @ W[X.shape[1]:] + own)), x0
    if arch == "chebnet":
        # the first-order term is the variable; other Chebyshev terms stay fixed
        x0 = aggregate_node_input(X, v, prop)
        fixed = X[v:v + 1] @ P["layer1.weight0"] + P["layer1.bias"] + skip
        t_prev, t_cur = X, prop @ X
        for j in range(2, cfg.cheb_order + 1):
            t_prev, t_cur = t_cur, 2 * prop @ t_cur - t_prev
            fixed = fixed + t_cur[v:v + 1] @ P[f"layer1.weight{j}"]
        return (lambda x: act(x @ P["layer1.weight1"] + fixed)), x0
    raise ConfigError(f"no aggregation map for {arch}")


def node_preactivation(model: Model, graph: Graph, v: int) -> np.ndarray:
    h = model.forward(graph, upto=1, pre_activation=True).layers[0]
    return h.value[v].copy()


# ---------------------------------------------------------------- activation volume


def activation_derivative(z, activation: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if activation == "relu":
        return (z > 0).astype(np.float64)
    if activation == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if activation == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 - s)
    raise ConfigError(f"unknown activation {activation!r}")


def activation_volume(z, activation: str = "relu") -> VolumeReport:
    deriv = activation_derivative(np.ravel(z), activation)
    return VolumeReport(deriv, float(np.prod(deriv)), int(np.count_nonzero(deriv == 0)))


# ---------------------------------------------------------------- batch analysis


def analyze_node(model: Model, graph: Graph, v: int, variant: str = "aggregation",
                 rel_tol: float = 1e-8, pre_activation: bool = False) -> dict:
    f, x0 = node_map(model, graph, v, variant, pre_activation)
    J = jacobian(f, x0)
    report = local_metamer_dimension(J, rel_tol)
    z = node_preactivation(model, graph, v)
    act = model.config.activation if model.config.layers > 1 else "identity"
    out = {"node": int(v), "variant": variant, **report.to_dict()}
    if act != "identity":
        out["volume"] = activation_volume(z, act).to_dict()
    return out


def mean_rank(model: Model, graph: Graph, nodes, variant: str = "aggregation") -> float:
    return float(np.mean([analyze_node(model, graph, v, variant)["rank"] for v in nodes]))
