"""Disentangled part representation: a symbolic structure tree and a geometry
tree with a bijective node mapping, sibling relation edges, semantic
templates, and canonical JSON serialization."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import AcapFeature, Mesh, acap_reconstruct

EDGE_KINDS = ("adjacency", "translational_symmetry", "reflective_symmetry",
              "rotational_symmetry")
UP_AXIS = np.array([0.0, 0.0, 1.0])  # +z is up in shape coordinates


class SchemaError(ValueError):
    """Hierarchy document violates the schema; message carries a JSON pointer."""


@dataclass(frozen=True)
class SemanticTemplate:
    name: str
    labels: tuple[str, ...]
    root_label: str
    allowed: frozenset  # (parent_label, child_label) pairs
    max_children: int = 10
    max_depth: int = 6

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("template labels must be unique")
        if self.root_label not in self.labels:
            raise ValueError("root label missing from vocabulary")

    def label_index(self, label: str) -> int:
        return self.labels.index(label)


_TEMPLATES: dict[str, SemanticTemplate] = {}


def register_template(template: SemanticTemplate):
    _TEMPLATES[template.name] = template


def get_template(name: str) -> SemanticTemplate:
    if name not in _TEMPLATES:
        raise KeyError(f"unknown semantic template {name!r}")
    return _TEMPLATES[name]


@dataclass
class RelationEdge:
    kind: str
    a: int  # sibling index under the shared parent
    b: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")

    def reversed(self) -> "RelationEdge":
        params = dict(self.params)
        if "translation" in params:
            params["translation"] = [-v for v in params["translation"]]
        if "angle" in params:
            params["angle"] = -params["angle"]
        return RelationEdge(self.kind, self.b, self.a, params)


@dataclass
class StructureNode:
    label: str
    instance_id: int = 0
    children: list = field(default_factory=list)
    edges: list = field(default_factory=list)  # RelationEdge among children
    node_id: int = -1
    geometry_ref: int = -1

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class GeometryNode:
    feature: AcapFeature | None = None  # leaves only
    children: list = field(default_factory=list)
    node_id: int = -1
    structure_ref: int = -1

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class PartHierarchy:
    structure_root: StructureNode
    geometry_root: GeometryNode
    template: SemanticTemplate
    source_meshes: dict = field(default_factory=dict)  # node_id -> OBJ path
    truncated: bool = False  # decoder hit max_depth

    def pairs(self):
        """Paired pre-order traversal of the two trees."""
        stack = [(self.structure_root, self.geometry_root)]
        while stack:
            s, g = stack.pop()
            yield s, g
            for sc, gc in zip(reversed(s.children), reversed(g.children)):
                stack.append((sc, gc))

    def structure_nodes(self):
        stack = [self.structure_root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def node_count(self) -> int:
        return sum(1 for _ in self.structure_nodes())

    def depth(self) -> int:
        def rec(node, d):
            return max([d] + [rec(c, d + 1) for c in node.children])
        return rec(self.structure_root, 0)


def assign_ids(h: PartHierarchy):
    """Pre-order ids over both trees and mutual refs (the bijection)."""
    for i, (s, g) in enumerate(h.pairs()):
        s.node_id = i
        g.node_id = i
        s.geometry_ref = i
        g.structure_ref = i


def canonicalize(h: PartHierarchy) -> PartHierarchy:
    """Sort children by (label, instance_id) everywhere, remap edges, and
    renumber ids pre-order.  Mutates and returns h."""

    def rec(s: StructureNode, g: GeometryNode):
        if not s.children:
            return
        order = sorted(range(len(s.children)),
                       key=lambda i: (s.children[i].label, s.children[i].instance_id))
        old_to_new = {old: new for new, old in enumerate(order)}
        s.children = [s.children[i] for i in order]
        g.children = [g.children[i] for i in order]
        edges = []
        for e in s.edges:
            e2 = RelationEdge(e.kind, old_to_new[e.a], old_to_new[e.b], dict(e.params))
            if e2.a > e2.b:
                e2 = e2.reversed()
            edges.append(e2)
        s.edges = sorted(edges, key=lambda e: (e.a, e.b, e.kind))
        for sc, gc in zip(s.children, g.children):
            rec(sc, gc)

    rec(h.structure_root, h.geometry_root)
    assign_ids(h)
    return h


# -- validation ---------------------------------------------------------------


def validate(h: PartHierarchy) -> list[str]:
    """Invariant violations as strings; empty list means the hierarchy is valid."""
    errs: list[str] = []
    template = h.template
    s_nodes = list(h.structure_nodes())
    g_nodes = [g for _, g in h.pairs()]
    pairs = list(h.pairs())
    if len(s_nodes) != len(g_nodes):
        errs.append(f"node count mismatch: {len(s_nodes)} structure vs {len(g_nodes)} geometry")
    for s, g in pairs:
        if s.geometry_ref != g.node_id or g.structure_ref != s.node_id:
            errs.append(f"node {s.node_id}: structure/geometry refs are not mutual inverses")
        if s.is_leaf != g.is_leaf:
            errs.append(f"node {s.node_id}: leaf status differs between trees")
        if g.is_leaf and g.feature is None:
            errs.append(f"node {s.node_id}: leaf without geometry feature")
        if not g.is_leaf and g.feature is not None:
            errs.append(f"node {s.node_id}: non-leaf carries a geometry feature")
        if s.label not in template.labels:
            errs.append(f"node {s.node_id}: unknown label {s.label!r}")
        if len(s.children) > template.max_children:
            errs.append(f"node {s.node_id}: {len(s.children)} children exceeds "
                        f"max {template.max_children}")
        seen = set()
        for c in s.children:
            key = (c.label, c.instance_id)
            if key in seen:
                errs.append(f"node {s.node_id}: duplicate sibling {key}")
            seen.add(key)
        for e in s.edges:
            k = len(s.children)
            if not (0 <= e.a < k and 0 <= e.b < k):
                errs.append(f"node {s.node_id}: edge endpoint out of range ({e.a}, {e.b})")
            elif e.a == e.b:
                errs.append(f"node {s.node_id}: edge endpoints must be distinct siblings")
            errs.extend(_edge_param_errors(s.node_id, e))
    if h.structure_root.label != template.root_label:
        errs.append(f"root label {h.structure_root.label!r} != template root "
                    f"{template.root_label!r}")
    if h.depth() > template.max_depth:
        errs.append(f"depth {h.depth()} exceeds max {template.max_depth}")
    return errs


def _edge_param_errors(node_id: int, e: RelationEdge) -> list[str]:
    errs = []
    if e.kind == "reflective_symmetry" and "plane_normal" in e.params:
        n = np.asarray(e.params["plane_normal"], dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            errs.append(f"node {node_id}: mirror plane normal is not unit length")
    if e.kind == "rotational_symmetry" and "axis" in e.params:
        ax = np.asarray(e.params["axis"], dtype=np.float64)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-6:
            errs.append(f"node {node_id}: rotation axis is not unit length")
    return errs


# -- serialization ---------------------------------------------------------------


def save_hierarchy(h: PartHierarchy, path) -> str:
    """Write canonical JSON plus float32 feature sidecars next to it.

    Sidecars are content-addressed so equal hierarchies serialize
    byte-identically regardless of the output filename.
    """
    path = os.fspath(path)
    canonicalize(h)
    directory = os.path.dirname(path) or "."
    id_of = {}
    for s, _ in h.pairs():
        id_of[s.node_id] = s
    parent_of: dict[int, int | None] = {h.structure_root.node_id: None}
    edge_entries: dict[int, list] = {s.node_id: [] for s, _ in h.pairs()}
    for s, _ in h.pairs():
        for c in s.children:
            parent_of[c.node_id] = s.node_id
        for e in s.edges:
            a_id = s.children[e.a].node_id
            b_id = s.children[e.b].node_id
            low, high = (a_id, b_id) if a_id < b_id else (b_id, a_id)
            entry_edge = e if a_id < b_id else e.reversed()
            edge_entries[low].append({"kind": entry_edge.kind, "other": high,
                                      "params": entry_edge.params})
    nodes = []
    for s, g in h.pairs():
        leaf_feature = None
        if g.feature is not None:
            payload = g.feature.per_vertex.astype("<f4").tobytes()
            acap_name = f"{hashlib.sha256(payload).hexdigest()[:16]}.acap"
            sidecar = os.path.join(directory, acap_name)
            if not os.path.exists(sidecar):
                with open(sidecar, "wb") as fh:
                    fh.write(payload)
            leaf_feature = {"center": [float(x) for x in g.feature.center],
                            "acap_path": acap_name}
        nodes.append({
            "id": s.node_id,
            "label": s.label,
            "instance_id": s.instance_id,
            "parent": parent_of[s.node_id],
            "edges": sorted(edge_entries[s.node_id], key=lambda d: (d["other"], d["kind"])),
            "leaf_feature": leaf_feature,
        })
    doc = {"template": h.template.name, "nodes": nodes}
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(payload)
    return payload


def load_hierarchy(path) -> PartHierarchy:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("template", "nodes"):
        if key not in doc:
            raise SchemaError(f"/: missing {key!r}")
    template = get_template(doc["template"])
    by_id: dict[int, dict] = {}
    for i, raw in enumerate(doc["nodes"]):
        ptr = f"/nodes/{i}"
        for key in ("id", "label", "instance_id", "parent", "edges", "leaf_feature"):
            if key not in raw:
                raise SchemaError(f"{ptr}: missing {key!r}")
        if raw["id"] in by_id:
            raise SchemaError(f"{ptr}: duplicate id {raw['id']}")
        by_id[raw["id"]] = raw

    s_nodes: dict[int, StructureNode] = {}
    g_nodes: dict[int, GeometryNode] = {}
    roots = []
    for nid, raw in by_id.items():
        s_nodes[nid] = StructureNode(raw["label"], raw["instance_id"],
                                     node_id=nid, geometry_ref=nid)
        feature = None
        if raw["leaf_feature"] is not None:
            lf = raw["leaf_feature"]
            if "center" not in lf or "acap_path" not in lf:
                raise SchemaError(f"/nodes/{nid}/leaf_feature: missing center or acap_path")
            payload = np.fromfile(os.path.join(directory, lf["acap_path"]), dtype="<f4")
            feature = AcapFeature(payload.astype(np.float64).reshape(-1, 9),
                                  np.asarray(lf["center"], dtype=np.float64))
        g_nodes[nid] = GeometryNode(feature, node_id=nid, structure_ref=nid)
    for nid, raw in by_id.items():
        if raw["parent"] is None:
            roots.append(nid)
        elif raw["parent"] not in by_id:
            raise SchemaError(f"/nodes/{nid}: parent {raw['parent']} does not exist")
        else:
            s_nodes[raw["parent"]].children.append(s_nodes[nid])
            g_nodes[raw["parent"]].children.append(g_nodes[nid])
    if len(roots) != 1:
        raise SchemaError(f"/nodes: expected exactly one root, found {len(roots)}")

    # edges: stored on the lower-id endpoint, endpoints must be siblings
    for nid, raw in by_id.items():
        parent = raw["parent"]
        for k, entry in enumerate(raw["edges"]):
            ptr = f"/nodes/{nid}/edges/{k}"
            if "kind" not in entry or "other" not in entry:
                raise SchemaError(f"{ptr}: missing kind or other")
            other = entry["other"]
            if other not in by_id:
                raise SchemaError(f"{ptr}: endpoint {other} does not exist")
            if by_id[other]["parent"] != parent or parent is None:
                raise SchemaError(f"{ptr}: endpoints {nid} and {other} are not siblings")
            siblings = [c.node_id for c in s_nodes[parent].children]
            s_nodes[parent].edges.append(RelationEdge(
                entry["kind"], siblings.index(nid), siblings.index(other),
                dict(entry.get("params") or {})))

    h = PartHierarchy(s_nodes[roots[0]], g_nodes[roots[0]], template)
    canonicalize(h)
    errs = validate(h)
    if errs:
        raise SchemaError("; ".join(errs))
    return h


def structure_equal(a: StructureNode, b: StructureNode,
                    with_edges: bool = True) -> bool:
    """Exact equality of labels, instance ids, topology and edge kinds."""
    if a.label != b.label or a.instance_id != b.instance_id:
        return False
    if len(a.children) != len(b.children):
        return False
    if with_edges:
        ea = sorted((e.kind, e.a, e.b) for e in a.edges)
        eb = sorted((e.kind, e.a, e.b) for e in b.edges)
        if ea != eb:
            return False
    return all(structure_equal(ca, cb, with_edges)
               for ca, cb in zip(a.children, b.children))


# -- mesh realization --------------------------------------------------------------


def leaf_meshes(h: PartHierarchy, template_mesh: Mesh) -> dict[int, Mesh]:
    """Reconstruct every leaf part mesh at its stored center."""
    out = {}
    for s, g in h.pairs():
        if g.feature is not None:
            out[s.node_id] = acap_reconstruct(template_mesh, g.feature)
    return out


def assembled_mesh(h: PartHierarchy, template_mesh: Mesh) -> Mesh:
    from .mesh import merge_meshes
    parts = leaf_meshes(h, template_mesh)
    if not parts:
        raise ValueError("hierarchy has no leaf geometry")
    return merge_meshes([parts[k] for k in sorted(parts)])


# -- relation detection ---------------------------------------------------------------


def detect_relations(meshes: list[Mesh], tol_adj: float = 0.02,
                     tol_sym: float = 1e-3) -> list[RelationEdge]:
    """Relation edges among sibling leaf parts, detected from their meshes.

    Symmetries are tested about canonical axis planes / the vertical axis
    through the origin of the (normalized, origin-centered) shape frame.
    When several kinds fit, reflective wins over rotational over translational;
    one edge per unordered pair.
    """
    from .metrics import chamfer
    edges: list[RelationEdge] = []
    pts = [m.vertices for m in meshes]
    centroids = [p.mean(axis=0) for p in pts]
    for i in range(len(meshes)):
        for j in range(i + 1, len(meshes)):
            edge = None
            for normal in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                           np.array([0, 0, 1.0])):
                mirrored = pts[i] - 2.0 * np.outer(pts[i] @ normal, normal)
                if chamfer(mirrored, pts[j]) < tol_sym:
                    edge = RelationEdge("reflective_symmetry", i, j,
                                        {"plane_normal": normal.tolist()})
                    break
            if edge is None:
                edge = _rotational_edge(pts[i], pts[j], centroids[i], centroids[j],
                                        i, j, tol_sym)
            if edge is None:
                shifted = pts[i] + (centroids[j] - centroids[i])
                if chamfer(shifted, pts[j]) < tol_sym:
                    edge = RelationEdge(
                        "translational_symmetry", i, j,
                        {"translation": (centroids[j] - centroids[i]).tolist()})
            if edge is None and _surface_distance(meshes[i], meshes[j]) < tol_adj:
                edge = RelationEdge("adjacency", i, j)
            if edge is not None:
                edges.append(edge)
    return edges


def _rotational_edge(pa, pb, ca, cb, i, j, tol):
    from .metrics import chamfer
    ra = np.linalg.norm(ca[:2])
    rb = np.linalg.norm(cb[:2])
    if abs(ra - rb) > 0.05 or ra < 1e-6:
        return None
    angle = np.arctan2(cb[1], cb[0]) - np.arctan2(ca[1], ca[0])
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    if chamfer(pa @ rot.T, pb) < tol:
        return RelationEdge("rotational_symmetry", i, j,
                            {"axis": UP_AXIS.tolist(), "angle": float(angle)})
    return None


def _surface_distance(a: Mesh, b: Mesh) -> float:
    from .mesh import closest_points_on_mesh
    d_ab = closest_points_on_mesh(a.vertices, b)
    d_ba = closest_points_on_mesh(b.vertices, a)
    return float(min(np.linalg.norm(d_ab - a.vertices, axis=1).min(),
                     np.linalg.norm(d_ba - b.vertices, axis=1).min()))
