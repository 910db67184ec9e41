"""Joint training of the three VAEs and the inference pipelines.

Training is teacher forced: the ground-truth tree drives the recursion while
every prediction head is supervised.  Decoded child slots are matched to
ground-truth children by Hungarian assignment on OBB proxies decoded from the
geometry side, which is the channel that lets the symbolic structure decoder
learn without concrete geometry of its own.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import zipfile
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .geom_vae import GeomVae
from .hierarchy import (PartHierarchy, assembled_mesh, canonicalize,
                        get_template, leaf_meshes)
from .mesh import OBB, Mesh, compute_obb, make_box_template
from .nn import MLP, Module
from .part_vae import PartVae
from .struct_vae import (EDGE_KIND_INDEX, MAX_CHILDREN, SLOT_PAIRS, StructVae,
                         edges_as_tuples, to_structure_tree)
from .tensor import (AdamState, GaussianParams, NumericalError, Tensor,
                     adam_step, gaussian_kl, reparameterize, sum_squares,
                     zero_grads)

_PAIR_INDEX = {pair: i for i, pair in enumerate(SLOT_PAIRS)}


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.001
    decay_every: int = 100
    decay_rate: float = 0.9
    lambda1: float = 100.0
    w_exist: float = 1.0
    w_sem: float = 1.0
    w_edge: float = 1.0
    w_leaf: float = 1.0
    w_box: float = 1.0
    w_kl_struct: float = 0.05
    w_kl_geo: float = 0.05
    max_epochs: int = 200
    max_shape_iters: int = 0  # 0 = no cap
    seed: int = 0
    template: str = "synthetic_chair"
    dataset_dir: str = ""
    s_dim: int = 256
    z_struct: int = 256
    z_geo: int = 256
    geo_dim: int = 128
    conv_hidden: int = 64
    segments: int = 6
    use_edges: bool = True
    checkpoint_every: int = 0  # steps; 0 = final only
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("w_exist", "w_sem", "w_edge", "w_leaf", "w_box",
                     "w_kl_struct", "w_kl_geo", "lambda1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @staticmethod
    def desk_preset(**overrides) -> "TrainConfig":
        base = dict(s_dim=128, z_struct=64, z_geo=64, conv_hidden=64, segments=6)
        base.update(overrides)
        return TrainConfig(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ObbProxy:
    """10-real box decoded from slot features, used for node matching."""

    center: np.ndarray
    extents: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if (self.extents <= 0).any():
            raise ValueError("ObbProxy extents must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("ObbProxy quaternion must be unit norm")


class ObbHead(Module):
    """Regresses (center, extents, quaternion) from paired slot features."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.mlp = MLP([in_dim, 64, 10], rng)

    def __call__(self, slots_s: Tensor, slots_g: Tensor
                 ) -> tuple[Tensor, Tensor, Tensor]:
        raw = self.mlp(T.concat([slots_s, slots_g], axis=1))
        center = raw[:, 0:3]
        extents = T.softplus(raw[:, 3:6]) + 1e-4
        quat_raw = raw[:, 6:10]
        norm = T.sqrt(T.sum_(quat_raw * quat_raw, axis=1) + 1e-12)
        quat = quat_raw / norm.reshape(quat_raw.shape[0], 1)
        return center, extents, quat


class ShapeModel(Module):
    """The three VAEs plus the OBB matching head, as one checkpointable unit."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        template = get_template(cfg.template)
        mesh = make_box_template(cfg.segments)
        self.part_vae = PartVae(mesh, cond_dim=cfg.s_dim, geo_dim=cfg.geo_dim,
                                hidden=cfg.conv_hidden, lambda1=cfg.lambda1, rng=rng)
        self.struct_vae = StructVae(len(template.labels), cfg.s_dim, cfg.z_struct,
                                    use_edges=cfg.use_edges, rng=rng)
        self.geom_vae = GeomVae(cfg.s_dim, cfg.geo_dim, cfg.z_geo,
                                use_edges=cfg.use_edges, rng=rng)
        self.obb_head = ObbHead(cfg.s_dim + cfg.geo_dim, rng)
        self.cfg = cfg
        self.template = template
        self.mesh = mesh


def predict_obb(model: ShapeModel, f_s: Tensor, f_g: Tensor) -> ObbProxy:
    """Single-slot OBB proxy (normalized quaternion)."""
    center, extents, quat = model.obb_head(f_s.reshape(1, -1), f_g.reshape(1, -1))
    return ObbProxy(center.data[0], extents.data[0], quat.data[0])


# -- matching -------------------------------------------------------------------


def match_cost(pred_center, pred_extents, pred_label, gt: OBB, gt_label) -> float:
    cost = float(((pred_center - gt.center) ** 2).sum())
    cost += 0.1 * float(((pred_extents - gt.extents) ** 2).sum())
    if pred_label != gt_label:
        cost += 1.0
    return cost


@dataclass
class Matching:
    pairs: list  # (pred_index, gt_index)
    unmatched_pred: list
    unmatched_gt: list
    cost: float


def match_children(predicted: list[tuple[ObbProxy, object]],
                   gt_parts: list[tuple[OBB, object]]) -> Matching:
    """Minimum-cost assignment of predicted (ObbProxy, label) slots to ground
    truth (OBB, label) parts."""
    if not predicted or not gt_parts:
        return Matching([], list(range(len(predicted))), list(range(len(gt_parts))), 0.0)
    cost = np.zeros((len(predicted), len(gt_parts)))
    for i, (proxy, plabel) in enumerate(predicted):
        for j, (gt, glabel) in enumerate(gt_parts):
            cost[i, j] = match_cost(proxy.center, proxy.extents, plabel, gt, glabel)
    rows, cols = linear_sum_assignment(cost)
    pairs = list(zip(rows.tolist(), cols.tolist()))
    unmatched_pred = sorted(set(range(len(predicted))) - set(rows.tolist()))
    unmatched_gt = sorted(set(range(len(gt_parts))) - set(cols.tolist()))
    return Matching(pairs, unmatched_pred, unmatched_gt, float(cost[rows, cols].sum()))


# -- ground-truth targets (cached per hierarchy) -----------------------------------


@dataclass
class NodeTargets:
    labels: list
    label_idx: np.ndarray
    is_leaf: np.ndarray
    obbs: list  # OBB per child
    edges: list  # (a, b, kind_index)


def shape_targets(h: PartHierarchy, mesh: Mesh) -> dict[int, NodeTargets]:
    """Per internal node: children labels, leaf flags, OBBs and edges.
    Computed once and cached on the hierarchy."""
    cached = getattr(h, "_targets_cache", None)
    if cached is not None:
        return cached
    parts = leaf_meshes(h, mesh)

    def vertices_below(s_node) -> np.ndarray:
        if s_node.node_id in parts:
            return parts[s_node.node_id].vertices
        return np.vstack([vertices_below(c) for c in s_node.children])

    targets: dict[int, NodeTargets] = {}
    template = h.template
    for s, _ in h.pairs():
        if s.is_leaf:
            continue
        labels = [c.label for c in s.children]
        targets[s.node_id] = NodeTargets(
            labels=labels,
            label_idx=np.array([template.label_index(l) for l in labels]),
            is_leaf=np.array([c.is_leaf for c in s.children]),
            obbs=[compute_obb(vertices_below(c)) for c in s.children],
            edges=edges_as_tuples(s),
        )
    h._targets_cache = targets
    return targets


# -- loss ---------------------------------------------------------------------------

LOSS_TERMS = ("geo_recon", "obb", "exist", "semantic", "leaf", "edge",
              "kl_struct", "kl_geo", "kl_part")


def total_loss(model: ShapeModel, h: PartHierarchy, cfg: TrainConfig,
               noise_rng: np.random.Generator | None
               ) -> tuple[Tensor, dict[str, float]]:
    """Teacher-forced forward pass; returns the scalar loss and a per-term
    breakdown (term values after their weights)."""
    sv, gv, pv = model.struct_vae, model.geom_vae, model.part_vae
    struct_post, struct_feats = sv.encode_structure(h)
    geo_post, leaf_posts = gv.encode_geometry(h, struct_feats, pv, noise_rng)
    if noise_rng is not None:
        z_s = reparameterize(struct_post, noise_rng.standard_normal(sv.z_dim))
        z_g = reparameterize(geo_post, noise_rng.standard_normal(gv.z_dim))
    else:
        z_s, z_g = struct_post.mu, geo_post.mu

    targets = shape_targets(h, model.mesh)
    terms: dict[str, Tensor] = {name: Tensor(0.0) for name in LOSS_TERMS}
    terms["kl_struct"] = gaussian_kl(struct_post) * cfg.w_kl_struct
    terms["kl_geo"] = gaussian_kl(geo_post) * cfg.w_kl_geo
    for post in leaf_posts:
        terms["kl_part"] = terms["kl_part"] + gaussian_kl(post)

    def recurse(s_node, g_node, f_s: Tensor, f_g: Tensor):
        if s_node.is_leaf:
            pred_x, pred_c = pv.dec_pg(f_g, f_s)
            recon = (sum_squares(pred_x, Tensor(g_node.feature.per_vertex))
                     + sum_squares(pred_c, Tensor(g_node.feature.center)))
            terms["geo_recon"] = terms["geo_recon"] + recon * cfg.lambda1
            return
        tgt = targets[s_node.node_id]
        decode = sv.dec_rvs(f_s, edges_override=[])
        slots_s = decode.slots_pre
        slots_g = gv.dec_slots(T.concat([f_g, f_s])).reshape(MAX_CHILDREN, gv.g_dim)

        centers, extents, quats = model.obb_head(slots_s, slots_g)
        pred_labels = decode.sem_logits.data.argmax(axis=1)
        cost = np.zeros((len(tgt.obbs), MAX_CHILDREN))
        for j, gt in enumerate(tgt.obbs):
            for k in range(MAX_CHILDREN):
                cost[j, k] = match_cost(centers.data[k], extents.data[k],
                                        int(pred_labels[k]), gt, tgt.label_idx[j])
        gt_idx, slot_idx = linear_sum_assignment(cost)
        slot_of = np.full(len(tgt.obbs), -1, dtype=np.int64)
        slot_of[gt_idx] = slot_idx

        exist_target = np.zeros(MAX_CHILDREN)
        exist_target[slot_of] = 1.0
        terms["exist"] = terms["exist"] + T.binary_cross_entropy(
            decode.exist_logits, exist_target) * cfg.w_exist
        for j in range(len(tgt.obbs)):
            k = slot_of[j]
            terms["semantic"] = terms["semantic"] + T.softmax_cross_entropy(
                decode.sem_logits[int(k)], int(tgt.label_idx[j])) * cfg.w_sem
        leaf_logits = T.take_rows(decode.leaf_logits.reshape(MAX_CHILDREN, 1), slot_of)
        terms["leaf"] = terms["leaf"] + T.binary_cross_entropy(
            leaf_logits.reshape(len(tgt.obbs)),
            tgt.is_leaf.astype(np.float64)) * cfg.w_leaf

        # box regression on matched slots (quaternion via chordal double cover)
        gt_centers = np.array([o.center for o in tgt.obbs])
        gt_extents = np.array([o.extents for o in tgt.obbs])
        gt_quats = np.array([o.quaternion() for o in tgt.obbs])
        m_centers = T.take_rows(centers, slot_of)
        m_extents = T.take_rows(extents, slot_of)
        m_quats = T.take_rows(quats, slot_of)
        sign = np.where((m_quats.data * gt_quats).sum(axis=1) >= 0, 1.0, -1.0)
        box = (sum_squares(m_centers, Tensor(gt_centers))
               + sum_squares(m_extents, Tensor(gt_extents))
               + sum_squares(m_quats, Tensor(gt_quats * sign[:, None])))
        terms["obb"] = terms["obb"] + box * cfg.w_box

        # edges over matched slot pairs; type CE on true edges
        gt_edge_kind = {(min(a, b), max(a, b)): kind for a, b, kind in tgt.edges}
        if cfg.w_edge > 0 and len(tgt.obbs) > 1:
            pair_rows, pair_targets = [], []
            for a in range(len(tgt.obbs)):
                for b in range(a + 1, len(tgt.obbs)):
                    sa, sb = int(slot_of[a]), int(slot_of[b])
                    pair_rows.append(_PAIR_INDEX[(min(sa, sb), max(sa, sb))])
                    pair_targets.append(1.0 if (a, b) in gt_edge_kind else 0.0)
            pair_logits = T.take_rows(decode.edge_logits.reshape(-1, 1),
                                      np.array(pair_rows))
            edge_term = T.binary_cross_entropy(
                pair_logits.reshape(len(pair_rows)), np.array(pair_targets))
            for (a, b), kind in gt_edge_kind.items():
                sa, sb = int(slot_of[a]), int(slot_of[b])
                row = _PAIR_INDEX[(min(sa, sb), max(sa, sb))]
                edge_term = edge_term + T.softmax_cross_entropy(
                    decode.type_logits[row], kind)
            terms["edge"] = terms["edge"] + edge_term * cfg.w_edge

        # teacher forcing: message passing along ground-truth edges mapped to slots
        slot_edges = [(int(slot_of[a]), int(slot_of[b]), kind)
                      for a, b, kind in tgt.edges] if cfg.use_edges else []
        slots_s_final = sv.dec_mp(slots_s, slot_edges) if cfg.use_edges else slots_s
        slots_g_final = gv.dec_mp(slots_g, slot_edges) if cfg.use_edges else slots_g
        for j, (sc, gc) in enumerate(zip(s_node.children, g_node.children)):
            k = int(slot_of[j])
            recurse(sc, gc, slots_s_final[k], slots_g_final[k])

    recurse(h.structure_root, h.geometry_root,
            sv.root_feature(z_s), gv.root_feature(z_g))
    total = Tensor(0.0)
    for name in LOSS_TERMS:
        total = total + terms[name]
    return total, {name: float(terms[name].data) for name in LOSS_TERMS}


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    shape_iters: int
    checkpoint_path: str
    log_path: str
    aborted: bool = False
    final_loss: float = float("nan")


def save_model(path, model: ShapeModel, step_count: int = 0):
    """Checkpoint archive plus an embedded config for self-contained reloads."""
    T.save_checkpoint(path, model.parameters(),
                      config_hash=model.cfg.config_hash(), step_count=step_count)
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("config.json", json.dumps(model.cfg.to_dict(), sort_keys=True))


def load_model(path) -> tuple[ShapeModel, dict]:
    arrays, header = T.load_checkpoint(path)
    with zipfile.ZipFile(path) as zf:
        cfg = TrainConfig.from_dict(json.loads(zf.read("config.json")))
    model = ShapeModel(cfg)
    model.load_state(arrays)
    return model, header


def train(cfg: TrainConfig, dataset: list[PartHierarchy], out_dir) -> TrainResult:
    """Per-batch gradient accumulation, one Adam step per batch, stepped lr
    decay, CSV loss log, periodic checkpoints, NaN abort."""
    if not dataset:
        raise ValueError("train: empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    model = ShapeModel(cfg, rng)
    params = model.parameters()
    adam = AdamState(lr=cfg.lr, decay_every=cfg.decay_every,
                     decay_rate=cfg.decay_rate)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    log_path = os.path.join(out_dir, "loss_log.csv")
    log = open(log_path, "w", newline="")
    writer = csv.writer(log)
    writer.writerow(["step", "lr", "total", *LOSS_TERMS])

    step = 0
    shape_iters = 0
    have_checkpoint = False
    stop = False
    batch_total = float("nan")
    try:
        for _ in range(cfg.max_epochs):
            if stop:
                break
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                zero_grads(params)
                batch_total = 0.0
                batch_terms = np.zeros(len(LOSS_TERMS))
                try:
                    for idx in batch:
                        loss, terms = total_loss(model, dataset[int(idx)], cfg, rng)
                        loss.backward()
                        batch_total += float(loss.data)
                        batch_terms += [terms[k] for k in LOSS_TERMS]
                        shape_iters += 1
                except NumericalError:
                    if have_checkpoint:
                        arrays, _ = T.load_checkpoint(ckpt_path)
                        model.load_state(arrays)
                    return TrainResult(step, shape_iters, ckpt_path, log_path,
                                       aborted=True)
                lr = adam_step(adam, params)
                step += 1
                if step % cfg.log_every == 0:
                    writer.writerow([step, f"{lr:.10g}", f"{batch_total:.10g}",
                                     *[f"{v:.10g}" for v in batch_terms]])
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_model(ckpt_path, model, step)
                    have_checkpoint = True
                if cfg.max_shape_iters and shape_iters >= cfg.max_shape_iters:
                    stop = True
                    break
    finally:
        log.close()
    save_model(ckpt_path, model, step)
    return TrainResult(step, shape_iters, ckpt_path, log_path,
                       final_loss=batch_total)


# -- inference pipelines ----------------------------------------------------------------


@dataclass
class LatentPair:
    structure: GaussianParams
    geometry: GaussianParams

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        return self.structure.mu.data.copy(), self.geometry.mu.data.copy()


def full_encode(model: ShapeModel, h: PartHierarchy) -> LatentPair:
    struct_post, struct_feats = model.struct_vae.encode_structure(h)
    geo_post, _ = model.geom_vae.encode_geometry(h, struct_feats, model.part_vae,
                                                 noise_rng=None)
    return LatentPair(struct_post, geo_post)


def full_decode(model: ShapeModel, z_s, z_g) -> tuple[PartHierarchy, Mesh]:
    """Structure decode, geometry decode along it, mesh realization."""
    decoded = model.struct_vae.decode_structure(z_s, model.template.max_depth)
    geo_root = model.geom_vae.decode_geometry(z_g, decoded, model.part_vae)
    s_root, truncated = to_structure_tree(decoded, model.template)
    h = PartHierarchy(s_root, geo_root, model.template, truncated=truncated)
    canonicalize(h)
    return h, assembled_mesh(h, model.mesh)


def reconstruct(model: ShapeModel, h: PartHierarchy) -> tuple[PartHierarchy, Mesh]:
    z_s, z_g = full_encode(model, h).means()
    return full_decode(model, z_s, z_g)


def recombine(model: ShapeModel, structure_from: PartHierarchy,
              geometry_from: PartHierarchy) -> tuple[PartHierarchy, Mesh]:
    z_s, _ = full_encode(model, structure_from).means()
    _, z_g = full_encode(model, geometry_from).means()
    return full_decode(model, z_s, z_g)


def sample_shapes(model: ShapeModel, count: int, seed: int = 0
                  ) -> list[tuple[PartHierarchy, Mesh]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        z_s = rng.standard_normal(model.struct_vae.z_dim)
        z_g = rng.standard_normal(model.geom_vae.z_dim)
        out.append(full_decode(model, z_s, z_g))
    return out


INTERP_MODES = ("joint", "structure_only", "geometry_only")


def interpolate(model: ShapeModel, h_a: PartHierarchy, h_b: PartHierarchy,
                steps: int, mode: str = "joint"
                ) -> list[tuple[PartHierarchy, Mesh]]:
    """Linear latent interpolation; endpoints equal the reconstructions in
    joint mode, the appropriate mixtures otherwise."""
    if steps < 2:
        raise ValueError("interpolate needs steps >= 2")
    if mode not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    zs_a, zg_a = full_encode(model, h_a).means()
    zs_b, zg_b = full_encode(model, h_b).means()
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        if mode == "joint":
            z_s = (1 - t) * zs_a + t * zs_b
            z_g = (1 - t) * zg_a + t * zg_b
        elif mode == "structure_only":
            z_s = (1 - t) * zs_a + t * zs_b
            z_g = zg_a
        else:
            z_s = zs_a
            z_g = (1 - t) * zg_a + t * zg_b
        out.append(full_decode(model, z_s, z_g))
    return out
