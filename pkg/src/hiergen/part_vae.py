"""Conditional part geometry VAE: one shared encoder/decoder for every leaf
part, conditioned on the part's structure code.

The encoder runs two mesh graph convolutions over the (V, 9) deformation
feature, mean-pools to a global vector, folds in the part center and the
structure condition, and emits a 128-d Gaussian posterior.  The decoder
mirrors it: a fully-connected expansion to per-vertex features, two graph
convolutions (the last one linear, it is the regression head), plus a linear
center head.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .mesh import Mesh, mesh_graph_conv
from .nn import MLP, Linear, Module, init_std
from .tensor import GaussianParams, Tensor, gaussian_kl, sum_squares

GEO_DIM = 128


class GraphConvLayer(Module):
    def __init__(self, mesh: Mesh, in_dim: int, out_dim: int,
                 rng: np.random.Generator, activation: bool = True):
        std = init_std(2 * in_dim)  # self and neighbor terms sum
        self.w_self = Tensor(rng.normal(0.0, std, (in_dim, out_dim)),
                             requires_grad=True)
        self.w_neigh = Tensor(rng.normal(0.0, std, (in_dim, out_dim)),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.mesh = mesh
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return mesh_graph_conv(x, self.mesh, self.w_self, self.w_neigh,
                               self.bias, self.activation)


class PartVae(Module):
    """Shared conditional geometry codec for all leaf parts."""

    def __init__(self, mesh: Mesh, cond_dim: int, geo_dim: int = GEO_DIM,
                 hidden: int = 64, lambda1: float = 100.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc_conv1 = GraphConvLayer(mesh, 9, hidden, rng)
        self.enc_conv2 = GraphConvLayer(mesh, hidden, hidden, rng)
        self.enc_global = Linear(hidden, hidden, rng)
        self.enc_mu = Linear(hidden + 3 + cond_dim, geo_dim, rng)
        self.enc_logvar = Linear(hidden + 3 + cond_dim, geo_dim, rng)
        self.dec_expand = Linear(geo_dim + cond_dim, mesh.n_vertices * hidden, rng)
        self.dec_conv1 = GraphConvLayer(mesh, hidden, hidden, rng)
        self.dec_conv2 = GraphConvLayer(mesh, hidden, 9, rng, activation=False)
        self.dec_center = MLP([geo_dim + cond_dim, hidden, 3], rng)
        self.mesh = mesh
        self.cond_dim = cond_dim
        self.geo_dim = geo_dim
        self.hidden = hidden
        self.lambda1 = lambda1

    def enc_pg(self, per_vertex, center, cond: Tensor) -> GaussianParams:
        """Posterior over the 128-d part geometry code."""
        x = per_vertex if isinstance(per_vertex, Tensor) else Tensor(per_vertex)
        if x.shape[0] != self.mesh.n_vertices:
            raise T.ShapeError("enc_pg", x.shape, (self.mesh.n_vertices, 9))
        c = center if isinstance(center, Tensor) else Tensor(center)
        h = self.enc_conv2(self.enc_conv1(x))
        pooled = T.leaky_relu(self.enc_global(h.mean(axis=0)))
        joint = T.concat([pooled, c, cond])
        return GaussianParams(self.enc_mu(joint), self.enc_logvar(joint))

    def dec_pg(self, code: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Decode (per-vertex feature rows, center); regression heads are linear."""
        joint = T.concat([code, cond])
        h = T.leaky_relu(self.dec_expand(joint)).reshape(self.mesh.n_vertices, self.hidden)
        per_vertex = self.dec_conv2(self.dec_conv1(h))
        center = self.dec_center(joint)
        return per_vertex, center

    def loss(self, per_vertex, center, pred_vertex: Tensor, pred_center: Tensor,
             posterior: GaussianParams) -> Tensor:
        """lambda1 * (feature + center sum-of-squares) + KL."""
        x = per_vertex if isinstance(per_vertex, Tensor) else Tensor(per_vertex)
        c = center if isinstance(center, Tensor) else Tensor(center)
        recon = sum_squares(pred_vertex, x) + sum_squares(pred_center, c)
        return recon * self.lambda1 + gaussian_kl(posterior)
