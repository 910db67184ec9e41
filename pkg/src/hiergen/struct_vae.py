"""Structure VAE: recursive symbolic encoding of (labels, instance ids,
hierarchy, relation edges) and recursive decoding with existence, semantic,
leaf and edge heads over 10 child slots per node.

The decoded topology is a function of the structure latent alone; geometry
never feeds back into these heads, which is what makes the two latent spaces
separable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .hierarchy import (EDGE_KINDS, PartHierarchy, RelationEdge,
                        SemanticTemplate, StructureNode)
from .nn import MLP, GraphMessagePassing, Linear, Module
from .tensor import ContractError, GaussianParams, Tensor

MAX_CHILDREN = 10
N_EDGE_KINDS = len(EDGE_KINDS)
EDGE_KIND_INDEX = {k: i for i, k in enumerate(EDGE_KINDS)}

# all 45 unordered slot pairs, fixed order
SLOT_PAIRS = [(a, b) for a in range(MAX_CHILDREN) for b in range(a + 1, MAX_CHILDREN)]


def edges_as_tuples(node: StructureNode) -> list[tuple[int, int, int]]:
    return [(e.a, e.b, EDGE_KIND_INDEX[e.kind]) for e in node.edges]


@dataclass
class SlotDecode:
    """Everything one expansion step predicts for a parent node."""

    slots_pre: Tensor          # (10, s) before edge message passing
    slots_final: Tensor        # (10, s) after message passing
    exist_logits: Tensor       # (10,)
    sem_logits: Tensor         # (10, n_labels)
    leaf_logits: Tensor        # (10,)
    edge_logits: Tensor        # (45,)
    type_logits: Tensor        # (45, 4)
    existing: np.ndarray       # bool (10,), existence prob >= 0.5
    retained_edges: list = field(default_factory=list)  # (a, b, kind) slot pairs

    @property
    def k_existing(self) -> int:
        return int(self.existing.sum())


@dataclass
class DecodedNode:
    """Free-running decoder output, mirrored later into StructureNode trees."""

    feature: Tensor
    label_index: int
    is_leaf: bool
    children: list = field(default_factory=list)
    edges: list = field(default_factory=list)        # (a, b, kind), child indices
    child_slots: list = field(default_factory=list)  # slot index per child
    slot_edges: list = field(default_factory=list)   # (a, b, kind), slot indices
    truncated: bool = False


class StructVae(Module):
    def __init__(self, n_labels: int, s_dim: int = 256, z_dim: int = 256,
                 rounds: int = 2, use_edges: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = s_dim
        self.enc_ps_fc = Linear(n_labels + MAX_CHILDREN, s_dim, rng)
        self.enc_mp = GraphMessagePassing(s_dim, N_EDGE_KINDS, rng, rounds)
        self.enc_merge = Linear(s_dim + n_labels + MAX_CHILDREN, s_dim, rng)
        self.enc_mu = Linear(s_dim, z_dim, rng)
        self.enc_logvar = Linear(s_dim, z_dim, rng)
        self.dec_root = Linear(z_dim, s_dim, rng)
        self.dec_slots = MLP([s_dim, hidden, MAX_CHILDREN * s_dim], rng)
        self.exist_head = Linear(s_dim, 1, rng)
        self.sem_head = Linear(s_dim, n_labels, rng)
        self.leaf_head = Linear(s_dim, 1, rng)
        self.edge_exist = MLP([2 * s_dim, hidden, 1], rng)
        self.edge_type = MLP([2 * s_dim, hidden, N_EDGE_KINDS], rng)
        self.dec_mp = GraphMessagePassing(s_dim, N_EDGE_KINDS, rng, rounds)
        self.dec_ps_fc = MLP([s_dim, hidden, n_labels], rng)
        self.n_labels = n_labels
        self.s_dim = s_dim
        self.z_dim = z_dim
        self.use_edges = use_edges

    # -- encoding ---------------------------------------------------------

    def _ld_onehot(self, label_index: int, instance_id: int) -> np.ndarray:
        if not 0 <= instance_id < MAX_CHILDREN:
            raise ContractError(f"instance id {instance_id} out of range [0, {MAX_CHILDREN})")
        v = np.zeros(self.n_labels + MAX_CHILDREN)
        v[label_index] = 1.0
        v[self.n_labels + instance_id] = 1.0
        return v

    def enc_ps(self, label_index: int, instance_id: int) -> Tensor:
        """Leaf encoder: one fully-connected layer over the [l; d] one-hots."""
        return self.enc_ps_fc(Tensor(self._ld_onehot(label_index, instance_id)))

    def enc_rvs(self, child_feats: list[Tensor], edges: list[tuple[int, int, int]],
                label_index: int, instance_id: int) -> Tensor:
        """Internal-node encoder: message passing, max-pool, merge with [l; d]."""
        if not child_feats:
            raise ContractError("enc_rvs needs at least one child (leaves use enc_ps)")
        stacked = T.stack(child_feats, axis=0)
        if self.use_edges:
            stacked = self.enc_mp(stacked, edges)
        pooled = T.max_reduce(stacked, axis=0)
        merged = T.concat([pooled, Tensor(self._ld_onehot(label_index, instance_id))])
        return T.leaky_relu(self.enc_merge(merged))

    def encode_structure(self, h: PartHierarchy) -> tuple[GaussianParams, dict]:
        """Post-order recursion to the root posterior; also returns every
        node's structure feature keyed by node_id (the conditioning codes)."""
        template = h.template
        feats: dict[int, Tensor] = {}

        def rec(node: StructureNode) -> Tensor:
            label_index = template.label_index(node.label)
            if node.is_leaf:
                f = self.enc_ps(label_index, node.instance_id)
            else:
                children = [rec(c) for c in node.children]
                f = self.enc_rvs(children, edges_as_tuples(node),
                                 label_index, node.instance_id)
            feats[node.node_id] = f
            return f

        root_feat = rec(h.structure_root)
        return GaussianParams(self.enc_mu(root_feat), self.enc_logvar(root_feat)), feats

    # -- decoding ---------------------------------------------------------

    def root_feature(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        return T.leaky_relu(self.dec_root(z))

    def dec_rvs(self, feature: Tensor,
                edges_override: list[tuple[int, int, int]] | None = None) -> SlotDecode:
        """Expand a parent feature into 10 slots plus all prediction heads.

        With `edges_override` (teacher forcing) message passing runs along the
        given slot edges instead of the retained predicted ones.
        """
        slots = self.dec_slots(feature).reshape(MAX_CHILDREN, self.s_dim)
        exist_logits = self.exist_head(slots).reshape(MAX_CHILDREN)
        sem_logits = self.sem_head(slots)
        leaf_logits = self.leaf_head(slots).reshape(MAX_CHILDREN)
        idx_a = np.array([p[0] for p in SLOT_PAIRS])
        idx_b = np.array([p[1] for p in SLOT_PAIRS])
        ab = T.concat([T.take_rows(slots, idx_a), T.take_rows(slots, idx_b)], axis=1)
        ba = T.concat([T.take_rows(slots, idx_b), T.take_rows(slots, idx_a)], axis=1)
        edge_logits = (self.edge_exist(ab) + self.edge_exist(ba)).reshape(len(SLOT_PAIRS))
        type_logits = self.edge_type(ab) + self.edge_type(ba)

        existing = exist_logits.data >= 0.0  # sigmoid >= 0.5, ties positive
        retained = []
        edge_probs = 1.0 / (1.0 + np.exp(-edge_logits.data))
        for p, (a, b) in enumerate(SLOT_PAIRS):
            if existing[a] and existing[b] and edge_probs[p] >= 0.5:
                retained.append((a, b, int(type_logits.data[p].argmax())))

        mp_edges = edges_override if edges_override is not None else retained
        slots_final = self.dec_mp(slots, mp_edges) if self.use_edges else slots
        return SlotDecode(slots, slots_final, exist_logits, sem_logits,
                          leaf_logits, edge_logits, type_logits,
                          existing, retained)

    def dec_ps(self, feature: Tensor) -> Tensor:
        """Leaf semantic logits (argmax ties break to the lowest label index)."""
        return self.dec_ps_fc(feature)

    def decode_structure(self, z, max_depth: int) -> DecodedNode:
        """Free-running recursive decode; nodes at max_depth are forced leaves
        and flagged truncated."""
        root_feat = self.root_feature(z)
        root = DecodedNode(root_feat, -1, is_leaf=False)
        self._expand(root, depth=0, max_depth=max_depth)
        return root

    def _expand(self, node: DecodedNode, depth: int, max_depth: int):
        decode = self.dec_rvs(node.feature)
        slot_of_child = [k for k in range(MAX_CHILDREN) if decode.existing[k]]
        if not slot_of_child:
            # an expanded node must produce children: keep the likeliest slot
            slot_of_child = [int(decode.exist_logits.data.argmax())]
        child_index = {slot: i for i, slot in enumerate(slot_of_child)}
        node.child_slots = slot_of_child
        node.slot_edges = decode.retained_edges
        node.edges = [(child_index[a], child_index[b], kind)
                      for a, b, kind in decode.retained_edges]
        for slot in slot_of_child:
            feat = decode.slots_final[slot]
            is_leaf = decode.leaf_logits.data[slot] >= 0.0  # ties count as leaf
            truncated = False
            if not is_leaf and depth + 1 >= max_depth:
                is_leaf, truncated = True, True
            if is_leaf:
                label_index = int(self.dec_ps(feat).data.argmax())
            else:
                label_index = int(decode.sem_logits.data[slot].argmax())
            child = DecodedNode(feat, label_index, is_leaf, truncated=truncated)
            if not is_leaf:
                self._expand(child, depth + 1, max_depth)
            node.children.append(child)


def to_structure_tree(root: DecodedNode, template: SemanticTemplate
                      ) -> tuple[StructureNode, bool]:
    """Materialize a decoded tree as StructureNodes; instance ids are assigned
    by slot order within each label.  Returns (tree, hit_depth_truncation)."""
    truncated = [False]

    def rec(node: DecodedNode, label: str) -> StructureNode:
        if node.truncated:
            truncated[0] = True
        out = StructureNode(label, 0)
        counts: dict[str, int] = {}
        for child in node.children:
            child_label = template.labels[child.label_index]
            s = rec(child, child_label)
            s.instance_id = counts.get(child_label, 0)
            counts[child_label] = s.instance_id + 1
            out.children.append(s)
        out.edges = [RelationEdge(EDGE_KINDS[kind], a, b)
                     for a, b, kind in node.edges]
        return out

    tree = rec(root, template.root_label)
    return tree, truncated[0]
