"""Geometry VAE: recursive aggregation of leaf geometry codes along the
structure hierarchy's edges, and structure-conditioned recursive decoding.

Internal nodes never carry registered geometry; they aggregate their
children's codes.  The decoder mirrors the structure decoder's slot layout so
the bijection between the two trees holds by index during generation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .hierarchy import GeometryNode, PartHierarchy
from .nn import MLP, GraphMessagePassing, Linear, Module
from .part_vae import PartVae
from .struct_vae import (MAX_CHILDREN, N_EDGE_KINDS, DecodedNode, StructVae,
                         edges_as_tuples)
from .tensor import ContractError, GaussianParams, Tensor, reparameterize


class GeomVae(Module):
    def __init__(self, s_dim: int = 256, g_dim: int = 128, z_dim: int = 256,
                 rounds: int = 2, use_edges: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc_mp = GraphMessagePassing(g_dim, N_EDGE_KINDS, rng, rounds)
        self.enc_merge = Linear(g_dim, g_dim, rng)
        self.enc_mu = Linear(g_dim, z_dim, rng)
        self.enc_logvar = Linear(g_dim, z_dim, rng)
        self.dec_root = Linear(z_dim, g_dim, rng)
        self.dec_slots = MLP([g_dim + s_dim, g_dim, MAX_CHILDREN * g_dim], rng)
        self.dec_mp = GraphMessagePassing(g_dim, N_EDGE_KINDS, rng, rounds)
        self.s_dim = s_dim
        self.g_dim = g_dim
        self.z_dim = z_dim
        self.use_edges = use_edges

    # -- encoding ----------------------------------------------------------

    def enc_rvg(self, child_feats: list[Tensor],
                edges: list[tuple[int, int, int]]) -> Tensor:
        """Aggregate children geometry codes: message rounds, max-pool, FC."""
        if not child_feats:
            raise ContractError("enc_rvg needs at least one child")
        stacked = T.stack(child_feats, axis=0)
        if self.use_edges:
            stacked = self.enc_mp(stacked, edges)
        pooled = T.max_reduce(stacked, axis=0)
        return T.leaky_relu(self.enc_merge(pooled))

    def encode_geometry(self, h: PartHierarchy, struct_feats: dict,
                        part_vae: PartVae,
                        noise_rng: np.random.Generator | None = None
                        ) -> tuple[GaussianParams, list[GaussianParams]]:
        """Bottom-up pass over the geometry tree.

        Leaves are encoded by the shared conditional part codec (conditioned
        on the matching structure feature); internal nodes aggregate.  With a
        noise generator the leaf codes are sampled (training); without, the
        posterior means are used (inference).  Returns the root posterior and
        the per-leaf posteriors (for the part-level KL terms).
        """
        leaf_posteriors: list[GaussianParams] = []

        def rec(s_node, g_node) -> Tensor:
            if g_node.is_leaf:
                if g_node.feature is None:
                    raise ContractError(f"leaf {s_node.node_id} is missing geometry")
                posterior = part_vae.enc_pg(g_node.feature.per_vertex,
                                            g_node.feature.center,
                                            struct_feats[s_node.node_id])
                leaf_posteriors.append(posterior)
                if noise_rng is not None:
                    return reparameterize(posterior,
                                          noise_rng.standard_normal(part_vae.geo_dim))
                return posterior.mu
            children = [rec(sc, gc) for sc, gc in zip(s_node.children, g_node.children)]
            return self.enc_rvg(children, edges_as_tuples(s_node))

        root_feat = rec(h.structure_root, h.geometry_root)
        posterior = GaussianParams(self.enc_mu(root_feat), self.enc_logvar(root_feat))
        return posterior, leaf_posteriors

    # -- decoding ----------------------------------------------------------

    def root_feature(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        return T.leaky_relu(self.dec_root(z))

    def dec_rvg(self, parent_geo: Tensor, parent_struct: Tensor,
                edges: list[tuple[int, int, int]]) -> Tensor:
        """10 slot geometry features, message-passed along the given relation
        edges (the structure decoder's predictions, or ground truth while
        teacher forcing)."""
        slots = self.dec_slots(T.concat([parent_geo, parent_struct]))
        slots = slots.reshape(MAX_CHILDREN, self.g_dim)
        if self.use_edges:
            slots = self.dec_mp(slots, edges)
        return slots

    def decode_geometry(self, z, decoded_root: DecodedNode,
                        part_vae: PartVae) -> GeometryNode:
        """Mirror an already-decoded structure tree into a geometry tree.

        Slot alignment implements the bijection: geometry slot k realizes
        structure child k.  Leaves are realized through the conditional part
        decoder, conditioned on the structure-side feature.
        """
        from .mesh import AcapFeature

        def rec(geo_feat: Tensor, s_node: DecodedNode) -> GeometryNode:
            if s_node.is_leaf:
                per_vertex, center = part_vae.dec_pg(geo_feat, s_node.feature)
                return GeometryNode(AcapFeature(per_vertex.data, center.data))
            if len(s_node.children) == 0:
                raise ContractError("structure decoder expanded a node with no children")
            out = GeometryNode()
            slots = self.dec_rvg(geo_feat, s_node.feature, s_node.slot_edges)
            for slot, child in zip(s_node.child_slots, s_node.children):
                out.children.append(rec(slots[slot], child))
            return out

        return rec(self.root_feature(z), decoded_root)
