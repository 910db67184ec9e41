"""Hierarchy model: validation, canonical serialization, relation detection."""

import numpy as np
import pytest

from hiergen import hierarchy as H
from hiergen.hierarchy import (GeometryNode, PartHierarchy, RelationEdge,
                               SchemaError, SemanticTemplate, StructureNode,
                               canonicalize, detect_relations, load_hierarchy,
                               save_hierarchy, structure_equal, validate)
from hiergen.mesh import Mesh, acap_extract, make_box_template

TEMPLATE = SemanticTemplate(
    name="test_chair",
    labels=("chair", "back", "seat", "base", "leg", "back_panel"),
    root_label="chair",
    allowed=frozenset({("chair", "back"), ("chair", "seat"), ("chair", "base"),
                       ("back", "back_panel"), ("base", "leg")}),
    max_children=10,
    max_depth=4,
)
H.register_template(TEMPLATE)


def box_part(scale, offset):
    t = make_box_template(2)
    return Mesh(t.vertices * np.asarray(scale) + np.asarray(offset), t.faces)


def leaf_feature(scale=(0.2, 0.2, 0.2), offset=(0, 0, 0)):
    t = make_box_template(2)
    return acap_extract(t, box_part(scale, offset))


def build_chair(n_legs=4, leg_order=None):
    legs = leg_order if leg_order is not None else list(range(n_legs))
    base_s = StructureNode("base", 0,
                           children=[StructureNode("leg", d) for d in legs])
    base_g = GeometryNode(children=[
        GeometryNode(leaf_feature(offset=(0.1 * d, 0, 0))) for d in legs])
    for i in range(len(legs)):
        for j in range(i + 1, len(legs)):
            base_s.edges.append(RelationEdge("adjacency", i, j))
    root_s = StructureNode("chair", 0, children=[
        StructureNode("back", 0, children=[StructureNode("back_panel", 0)]),
        StructureNode("seat", 0),
        base_s,
    ])
    root_g = GeometryNode(children=[
        GeometryNode(children=[GeometryNode(leaf_feature((0.4, 0.05, 0.3)))]),
        GeometryNode(leaf_feature((0.4, 0.4, 0.05))),
        base_g,
    ])
    h = PartHierarchy(root_s, root_g, TEMPLATE)
    canonicalize(h)
    return h


class TestValidate:
    def test_valid_chair(self):
        assert validate(build_chair()) == []

    def test_duplicate_sibling_key(self):
        h = build_chair(leg_order=[0, 0, 1, 2])
        errs = validate(h)
        assert len([e for e in errs if "duplicate sibling" in e]) == 1

    def test_eleven_children_violates_max(self):
        h = build_chair(n_legs=11)
        assert any("exceeds max 10" in e for e in validate(h))

    def test_broken_bijection_detected(self):
        h = build_chair()
        h.structure_root.children[0].geometry_ref = 99
        assert any("mutual inverses" in e for e in validate(h))

    def test_leaf_without_feature(self):
        h = build_chair()
        for _, g in h.pairs():
            if g.is_leaf:
                g.feature = None
                break
        assert any("leaf without geometry feature" in e for e in validate(h))

    def test_edge_out_of_range(self):
        h = build_chair()
        h.structure_root.edges.append(RelationEdge("adjacency", 0, 9))
        assert any("out of range" in e for e in validate(h))

    def test_bad_mirror_normal(self):
        h = build_chair()
        h.structure_root.children[0].label  # base sorted first
        base = next(s for s in h.structure_nodes() if s.label == "base")
        base.edges.append(RelationEdge("reflective_symmetry", 0, 1,
                                       {"plane_normal": [1.0, 1.0, 0.0]}))
        assert any("not unit length" in e for e in validate(h))


class TestSerialization:
    def test_round_trip_structural_equality(self, tmp_path):
        h = build_chair()
        path = tmp_path / "chair.json"
        save_hierarchy(h, path)
        loaded = load_hierarchy(path)
        assert structure_equal(h.structure_root, loaded.structure_root)
        for (s1, g1), (s2, g2) in zip(h.pairs(), loaded.pairs()):
            assert s1.label == s2.label
            if g1.feature is not None:
                np.testing.assert_allclose(g1.feature.center, g2.feature.center, atol=1e-7)
                np.testing.assert_allclose(g1.feature.per_vertex,
                                           g2.feature.per_vertex, atol=1e-6)

    def test_canonical_serialization_byte_identical(self, tmp_path):
        h1 = build_chair(leg_order=[0, 1, 2, 3])
        h2 = build_chair(leg_order=[3, 2, 1, 0])
        # same semantic content, children constructed in different order
        bytes1 = save_hierarchy(h1, tmp_path / "a.json")
        bytes2 = save_hierarchy(h2, tmp_path / "b.json")
        assert bytes1 == bytes2

    def test_save_load_save_is_identity(self, tmp_path):
        h = build_chair()
        first = save_hierarchy(h, tmp_path / "a.json")
        loaded = load_hierarchy(tmp_path / "a.json")
        second = save_hierarchy(loaded, tmp_path / "a2.json")
        assert first == second

    def test_missing_node_key_is_schema_error(self, tmp_path):
        import json
        h = build_chair()
        path = tmp_path / "chair.json"
        save_hierarchy(h, path)
        doc = json.loads(path.read_text())
        del doc["nodes"][3]["leaf_feature"]
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="/nodes/3"):
            load_hierarchy(path)

    def test_edge_to_non_sibling_rejected(self, tmp_path):
        import json
        h = build_chair()
        path = tmp_path / "chair.json"
        save_hierarchy(h, path)
        doc = json.loads(path.read_text())
        # attach an edge from a base leg to the seat (different parents)
        seat = next(n for n in doc["nodes"] if n["label"] == "seat")
        leg = next(n for n in doc["nodes"] if n["label"] == "leg")
        low = min(seat["id"], leg["id"])
        high = max(seat["id"], leg["id"])
        next(n for n in doc["nodes"] if n["id"] == low)["edges"].append(
            {"kind": "adjacency", "other": high, "params": {}})
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="not siblings"):
            load_hierarchy(path)


class TestDetectRelations:
    def test_mirrored_pair_reflective(self):
        left = box_part((0.05, 0.05, 0.3), (-0.3, 0.0, 0.0))
        right = box_part((0.05, 0.05, 0.3), (0.3, 0.0, 0.0))
        edges = detect_relations([left, right])
        assert len(edges) == 1
        assert edges[0].kind == "reflective_symmetry"
        np.testing.assert_allclose(edges[0].params["plane_normal"], [1, 0, 0])

    def test_seat_touching_leg_adjacency(self):
        leg = box_part((0.05, 0.05, 0.2), (0.0, 0.0, 0.0))  # top at z=0.1
        seat = box_part((0.3, 0.3, 0.02), (0.0, 0.0, 0.11))  # bottom at z=0.1
        edges = detect_relations([leg, seat])
        assert [e.kind for e in edges] == ["adjacency"]

    def test_four_legs_cover_all_pairs(self):
        legs = [box_part((0.05, 0.05, 0.3), (sx, sy, 0.0))
                for sx in (-0.3, 0.3) for sy in (-0.3, 0.3)]
        edges = detect_relations(legs)
        assert len(edges) == 6  # one edge per unordered pair
        kinds = {(e.a, e.b): e.kind for e in edges}
        # side pairs mirror about canonical planes; diagonals rotate about +z
        assert kinds[(0, 2)] == "reflective_symmetry"
        assert kinds[(1, 3)] == "reflective_symmetry"
        assert kinds[(0, 1)] == "reflective_symmetry"
        assert kinds[(2, 3)] == "reflective_symmetry"
        assert kinds[(0, 3)] in ("rotational_symmetry", "translational_symmetry")
        assert kinds[(1, 2)] in ("rotational_symmetry", "translational_symmetry")

    def test_translational_bars(self):
        bars = [box_part((0.02, 0.02, 0.2), (0.77 + 0.2 * i, 0.4, 0.0))
                for i in range(2)]
        edges = detect_relations(bars)
        assert [e.kind for e in edges] == ["translational_symmetry"]
        np.testing.assert_allclose(edges[0].params["translation"], [0.2, 0, 0],
                                   atol=1e-9)

    def test_deterministic_and_symmetric(self):
        parts = [box_part((0.05, 0.05, 0.3), (sx, 0.0, 0.0)) for sx in (-0.3, 0.3)]
        e1 = detect_relations(parts)
        e2 = detect_relations(parts)
        assert [(e.kind, e.a, e.b) for e in e1] == [(e.kind, e.a, e.b) for e in e2]
        swapped = detect_relations(parts[::-1])
        assert [e.kind for e in swapped] == [e.kind for e in e1]

    def test_distant_unrelated_parts_no_edge(self):
        a = box_part((0.05, 0.05, 0.05), (-0.4, 0.0, 0.0))
        b = box_part((0.11, 0.02, 0.07), (0.4, 0.2, 0.3))
        assert detect_relations([a, b]) == []


class TestCanonicalize:
    def test_children_sorted_and_edges_remapped(self):
        h = build_chair()
        labels = [c.label for c in h.structure_root.children]
        assert labels == sorted(labels)
        base = next(s for s in h.structure_nodes() if s.label == "base")
        for e in base.edges:
            assert e.a < e.b

    def test_ids_are_preorder(self):
        h = build_chair()
        ids = [s.node_id for s in h.structure_nodes()]
        assert ids == list(range(len(ids)))
