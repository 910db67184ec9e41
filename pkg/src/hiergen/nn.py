"""Small neural-net building blocks on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_std(fan_in: int) -> float:
    """Gaussian init scaled by fan-in so activations keep O(1) magnitude
    through the recursive stacks (no batch norm anywhere)."""
    return 1.0 / np.sqrt(max(fan_in, 1))


class Module:
    """Base class providing dotted-name parameter discovery."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[attr] = value
            elif isinstance(value, Module):
                for sub, p in value.parameters().items():
                    out[f"{attr}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{attr}.{i}.{sub}"] = p
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        """Copy arrays into parameters; every parameter must be covered."""
        params = self.parameters()
        missing = [n for n in params if prefix + n not in arrays]
        if missing:
            raise KeyError(f"checkpoint missing parameters: {missing[:5]}")
        for name, p in params.items():
            src = arrays[prefix + name]
            if tuple(src.shape) != p.data.shape:
                raise T.ShapeError("load_state", p.data.shape, src.shape)
            p.data = np.asarray(src, dtype=np.float64).copy()

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 std: float | None = None):
        std = init_std(in_dim) if std is None else std
        self.weight = Tensor(rng.normal(0.0, std, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of Linear layers with leaky-ReLU between them; final layer linear
    unless `final_activation` is set."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 final_activation: bool = False, std: float | None = None):
        self.layers = [Linear(dims[i], dims[i + 1], rng, std) for i in range(len(dims) - 1)]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = T.leaky_relu(x)
        return x


class GraphMessagePassing(Module):
    """Edge-conditioned message rounds over a small sibling graph.

    Each round computes, per node i,
        h_i' = leaky_relu(W_self h_i + b + mean_{(i,j) in E} MLP([h_i; h_j; kind]))
    where `kind` is a one-hot over the relation-edge taxonomy.  The message
    MLP and self weights are shared across rounds (weight tying).
    """

    def __init__(self, dim: int, n_kinds: int, rng: np.random.Generator,
                 rounds: int = 2):
        self.self_op = Linear(dim, dim, rng)
        self.message_op = MLP([2 * dim + n_kinds, dim, dim], rng)
        self.rounds = rounds
        self.n_kinds = n_kinds

    def __call__(self, feats: Tensor, edges: list[tuple[int, int, int]]) -> Tensor:
        """feats: (N, dim); edges: (a, b, kind_index) undirected pairs."""
        n = feats.shape[0]
        if edges:
            src = np.array([e[0] for e in edges] + [e[1] for e in edges], dtype=np.intp)
            dst = np.array([e[1] for e in edges] + [e[0] for e in edges], dtype=np.intp)
            kind_onehot = np.zeros((2 * len(edges), self.n_kinds))
            kinds = [e[2] for e in edges] * 2
            kind_onehot[np.arange(2 * len(edges)), kinds] = 1.0
            kind_const = Tensor(kind_onehot)
            counts = np.bincount(dst, minlength=n).astype(np.float64)
            inv_counts = Tensor(np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None])
        for _ in range(self.rounds):
            h = self.self_op(feats)
            if edges:
                msg_in = T.concat([T.take_rows(feats, src), T.take_rows(feats, dst), kind_const], axis=1)
                msgs = self.message_op(msg_in)
                h = h + T.scatter_add_rows(msgs, dst, n) * inv_counts
            feats = T.leaky_relu(h)
        return feats
