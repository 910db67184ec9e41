"""Shared fixtures: a tiny semantic template, a 2-level 3-leaf shape on the
26-vertex box template, and small model configurations."""

import numpy as np

from hiergen import hierarchy as H
from hiergen.hierarchy import (GeometryNode, PartHierarchy, RelationEdge,
                               SemanticTemplate, StructureNode, canonicalize)
from hiergen.mesh import Mesh, acap_extract, make_box_template
from hiergen.trainer import TrainConfig

TINY_TEMPLATE = SemanticTemplate(
    name="tiny_chair",
    labels=("chair", "base", "seat", "leg"),
    root_label="chair",
    allowed=frozenset({("chair", "base"), ("chair", "seat"), ("base", "leg")}),
    max_children=10,
    max_depth=3,
)
H.register_template(TINY_TEMPLATE)

SEGMENTS = 2  # 26-vertex template


def part_feature(scale, offset, rng=None):
    t = make_box_template(SEGMENTS)
    verts = t.vertices * np.asarray(scale) + np.asarray(offset)
    if rng is not None:
        verts = verts + rng.normal(0, 0.002, verts.shape)
    return acap_extract(t, Mesh(verts, t.faces))


def tiny_shape(seed: int = 0, jitter: bool = False) -> PartHierarchy:
    """chair -> {seat leaf, base -> {leg0, leg1}}: 2 levels, 3 leaves."""
    rng = np.random.default_rng(seed) if jitter else None
    width = 0.3 + 0.02 * (seed % 5)
    leg_h = 0.2 + 0.01 * (seed % 3)
    seat = StructureNode("seat", 0)
    seat_g = GeometryNode(part_feature((width, width, 0.05), (0, 0, leg_h + 0.025), rng))
    legs = [StructureNode("leg", d) for d in range(2)]
    leg_g = [GeometryNode(part_feature((0.05, 0.05, leg_h),
                                       (x, 0, leg_h / 2), rng))
             for x in (-width / 2 + 0.025, width / 2 - 0.025)]
    base = StructureNode("base", 0, children=legs,
                         edges=[RelationEdge("reflective_symmetry", 0, 1,
                                             {"plane_normal": [1.0, 0.0, 0.0]})])
    base_g = GeometryNode(children=leg_g)
    root = StructureNode("chair", 0, children=[seat, base],
                         edges=[RelationEdge("adjacency", 0, 1)])
    root_g = GeometryNode(children=[seat_g, base_g])
    return canonicalize(PartHierarchy(root, root_g, TINY_TEMPLATE))


def tiny_config(**overrides) -> TrainConfig:
    base = dict(template="tiny_chair", s_dim=16, z_struct=8, z_geo=8,
                geo_dim=12, conv_hidden=8, segments=SEGMENTS, seed=0)
    base.update(overrides)
    return TrainConfig(**base)
