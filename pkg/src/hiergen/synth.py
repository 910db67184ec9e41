"""Procedural chair benchmark: 54 enumerable structures crossed with a shared
bank of geometric variations, so recombination targets have exact ground
truth.

Coordinate frame: +z up, +x is chair width, +y points backward (the back
sits at +y).  Every chair is laid out in absolute sizes drawn from the
parameter ranges and then recentered so its bounding box midpoint is the
origin; the ranges guarantee the assembly fits the unit cube.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .hierarchy import (GeometryNode, PartHierarchy, RelationEdge,
                        SemanticTemplate, StructureNode, assembled_mesh,
                        canonicalize, register_template, save_hierarchy)
from .mesh import Mesh, acap_extract, make_box_template, register_box_to_part


class GeneratorError(ValueError):
    pass


CHAIR_TEMPLATE = SemanticTemplate(
    name="synthetic_chair",
    labels=("chair", "arm", "back", "base", "seat", "back_bar", "back_panel",
            "back_post", "back_rail", "leg", "base_plate", "column", "stretcher"),
    root_label="chair",
    allowed=frozenset({
        ("chair", "arm"), ("chair", "back"), ("chair", "base"), ("chair", "seat"),
        ("back", "back_bar"), ("back", "back_panel"), ("back", "back_post"),
        ("back", "back_rail"),
        ("base", "leg"), ("base", "base_plate"), ("base", "column"),
        ("base", "stretcher"),
    }),
    max_children=10,
    max_depth=3,
)
register_template(CHAIR_TEMPLATE)

BACK_TYPES = ("solid", "vertical_bars", "horizontal_bars")
LEG_STYLES = ("four_straight", "four_with_stretchers", "pedestal")
BAR_COUNTS = (2, 3, 4, 5)


@dataclass(frozen=True)
class ChairStructureSpec:
    back_type: str
    back_bars: int  # 0 for solid backs
    leg_style: str
    has_arms: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ChairStructureSpec":
        return ChairStructureSpec(d["back_type"], d["back_bars"],
                                  d["leg_style"], d["has_arms"])


def enumerate_structures() -> list[ChairStructureSpec]:
    """The 54 chair structures: 9 back options x 3 leg styles x 2 arm options."""
    backs = [("solid", 0)]
    backs += [("vertical_bars", n) for n in BAR_COUNTS]
    backs += [("horizontal_bars", n) for n in BAR_COUNTS]
    out = []
    for back_type, bars in backs:
        for leg_style in LEG_STYLES:
            for has_arms in (False, True):
                out.append(ChairStructureSpec(back_type, bars, leg_style, has_arms))
    assert len(out) == 54
    return out


PARAM_RANGES = {
    "seat_width": (0.50, 0.80),
    "seat_depth": (0.45, 0.70),
    "seat_thickness": (0.04, 0.08),
    "leg_width": (0.04, 0.08),
    "leg_height": (0.18, 0.32),
    "back_height": (0.30, 0.45),
    "back_tilt": (0.00, 0.20),
    "bar_thickness": (0.025, 0.05),
    "arm_height": (0.12, 0.20),
}


@dataclass(frozen=True)
class ChairGeomParams:
    seat_width: float
    seat_depth: float
    seat_thickness: float
    leg_width: float
    leg_height: float
    back_height: float
    back_tilt: float
    bar_thickness: float
    arm_height: float

    def __post_init__(self):
        for name, (lo, hi) in PARAM_RANGES.items():
            v = getattr(self, name)
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise GeneratorError(f"{name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ChairGeomParams":
        return ChairGeomParams(**d)


def sample_geometry_params(seed: int) -> ChairGeomParams:
    rng = np.random.default_rng(seed)
    values = {name: float(rng.uniform(lo, hi))
              for name, (lo, hi) in sorted(PARAM_RANGES.items())}
    return ChairGeomParams(**values)


# -- part layout ---------------------------------------------------------------


def _cuboid(lo, hi) -> Mesh:
    t = make_box_template(1)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if (hi <= lo).any():
        raise GeneratorError(f"degenerate cuboid {lo} .. {hi}")
    return Mesh((t.vertices + 0.5) * (hi - lo) + lo, t.faces)


def _tilt_backward(mesh: Mesh, pivot_y: float, pivot_z: float, tilt: float) -> Mesh:
    """Rotate about the x-aligned line (y=pivot_y, z=pivot_z) leaning +y."""
    c, s = np.cos(tilt), np.sin(tilt)
    v = mesh.vertices.copy()
    y = v[:, 1] - pivot_y
    z = v[:, 2] - pivot_z
    v[:, 1] = pivot_y + y * c + z * s
    v[:, 2] = pivot_z - y * s + z * c
    return Mesh(v, mesh.faces)


@dataclass
class _Part:
    label: str
    instance: int
    mesh: Mesh


def _layout_parts(spec: ChairStructureSpec, p: ChairGeomParams):
    """Returns (groups, root_edges); groups maps group label to
    (parts, in-group edges)."""
    w, d = p.seat_width, p.seat_depth
    lw, lh = p.leg_width, p.leg_height
    seat_top = lh + p.seat_thickness
    bt = p.bar_thickness
    groups: dict[str, tuple[list[_Part], list[tuple[str, int, int, dict]]]] = {}

    seat = _Part("seat", 0, _cuboid([-w / 2, -d / 2, lh], [w / 2, d / 2, seat_top]))

    # base group
    base_parts: list[_Part] = []
    base_edges: list[tuple[str, int, int, dict]] = []
    if spec.leg_style in ("four_straight", "four_with_stretchers"):
        xs = (-(w / 2 - lw), w / 2 - lw)
        ys = (-(d / 2 - lw), d / 2 - lw)
        # legs 0..3: front-left, front-right, back-left, back-right
        positions = [(xs[0], ys[0]), (xs[1], ys[0]), (xs[0], ys[1]), (xs[1], ys[1])]
        for k, (x0, y0) in enumerate(positions):
            base_parts.append(_Part("leg", k, _cuboid([x0, y0, 0], [x0 + lw, y0 + lw, lh])))
        base_edges += [
            ("reflective_symmetry", 0, 1, {"plane_normal": [1.0, 0.0, 0.0]}),
            ("reflective_symmetry", 2, 3, {"plane_normal": [1.0, 0.0, 0.0]}),
            ("translational_symmetry", 0, 2, {"translation": [0.0, ys[1] - ys[0], 0.0]}),
            ("translational_symmetry", 1, 3, {"translation": [0.0, ys[1] - ys[0], 0.0]}),
            ("translational_symmetry", 0, 3,
             {"translation": [xs[1] - xs[0], ys[1] - ys[0], 0.0]}),
            ("translational_symmetry", 1, 2,
             {"translation": [xs[0] - xs[1], ys[1] - ys[0], 0.0]}),
        ]
        if spec.leg_style == "four_with_stretchers":
            z0 = 0.35 * lh
            y_in = d / 2 - lw
            left = _Part("stretcher", 0, _cuboid([xs[0], -y_in, z0],
                                                 [xs[0] + bt, y_in, z0 + bt]))
            right = _Part("stretcher", 1, _cuboid([xs[1] + lw - bt, -y_in, z0],
                                                  [xs[1] + lw, y_in, z0 + bt]))
            cross = _Part("stretcher", 2, _cuboid([xs[0] + bt, -bt / 2, z0],
                                                  [xs[1] + lw - bt, bt / 2, z0 + bt]))
            base_parts += [left, right, cross]
            i_l, i_r, i_c = 4, 5, 6
            base_edges.append(("reflective_symmetry", i_l, i_r,
                               {"plane_normal": [1.0, 0.0, 0.0]}))
            base_edges += [("adjacency", 0, i_l, {}), ("adjacency", 2, i_l, {}),
                           ("adjacency", 1, i_r, {}), ("adjacency", 3, i_r, {}),
                           ("adjacency", i_l, i_c, {}), ("adjacency", i_r, i_c, {})]
    else:  # pedestal
        plate_t = 0.04
        col = 2 * lw
        base_parts.append(_Part("column", 0, _cuboid([-col / 2, -col / 2, plate_t],
                                                     [col / 2, col / 2, lh])))
        base_parts.append(_Part("base_plate", 0, _cuboid([-0.3 * w, -0.3 * d, 0],
                                                         [0.3 * w, 0.3 * d, plate_t])))
        base_edges.append(("adjacency", 0, 1, {}))
    groups["base"] = (base_parts, base_edges)

    # back group (constructed upright, tilted afterwards about its rear base edge)
    back_parts: list[_Part] = []
    back_edges: list[tuple[str, int, int, dict]] = []
    bw = 0.45 * w
    y1 = d / 2
    y0 = y1 - bt
    z0, z1 = seat_top, seat_top + p.back_height
    if spec.back_type == "solid":
        back_parts.append(_Part("back_panel", 0, _cuboid([-bw, y0, z0], [bw, y1, z1])))
    elif spec.back_type == "vertical_bars":
        n = spec.back_bars
        back_parts.append(_Part("back_rail", 0, _cuboid([-bw, y0, z1 - bt], [bw, y1, z1])))
        span = 2 * bw - bt
        step = span / (n - 1)
        for k in range(n):
            x0 = -bw + k * step
            back_parts.append(_Part("back_bar", k, _cuboid([x0, y0, z0],
                                                           [x0 + bt, y1, z1 - bt])))
            back_edges.append(("adjacency", 0, 1 + k, {}))
        for k in range(n - 1):
            back_edges.append(("translational_symmetry", 1 + k, 2 + k,
                               {"translation": [step, 0.0, 0.0]}))
    else:  # horizontal_bars
        n = spec.back_bars
        back_parts.append(_Part("back_post", 0, _cuboid([-bw, y0, z0], [-bw + bt, y1, z1])))
        back_parts.append(_Part("back_post", 1, _cuboid([bw - bt, y0, z0], [bw, y1, z1])))
        back_edges.append(("reflective_symmetry", 0, 1, {"plane_normal": [1.0, 0.0, 0.0]}))
        height = p.back_height
        for k in range(n):
            zc = z0 + (k + 1) * height / (n + 1)
            back_parts.append(_Part("back_bar", k,
                                    _cuboid([-bw + bt, y0, zc - bt / 2],
                                            [bw - bt, y1, zc + bt / 2])))
            back_edges += [("adjacency", 0, 2 + k, {}), ("adjacency", 1, 2 + k, {})]
        for k in range(n - 1):
            back_edges.append(("translational_symmetry", 2 + k, 3 + k,
                               {"translation": [0.0, 0.0, height / (n + 1)]}))
    if p.back_tilt > 0:
        for part in back_parts:
            part.mesh = _tilt_backward(part.mesh, y1, z0, p.back_tilt)
    groups["back"] = (back_parts, back_edges)

    # arms sit on the seat sides
    arm_parts: list[_Part] = []
    if spec.has_arms:
        for k, sign in enumerate((-1, 1)):
            x_out = sign * w / 2
            x_in = sign * (w / 2 - lw)
            lo_x, hi_x = min(x_out, x_in), max(x_out, x_in)
            arm_parts.append(_Part("arm", k, _cuboid(
                [lo_x, -0.25 * d, seat_top], [hi_x, 0.25 * d, seat_top + p.arm_height])))

    root_children = {"seat": seat, "arms": arm_parts}
    return groups, root_children


def _aabb_overlap_depth(a: Mesh, b: Mesh) -> float:
    lo = np.maximum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.minimum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    return float((hi - lo).min())


def build_chair(spec: ChairStructureSpec, params: ChairGeomParams,
                segments: int = 6, register_iters: int = 8) -> PartHierarchy:
    """Deterministic chair assembly with registered, feature-encoded leaves."""
    groups, root_children = _layout_parts(spec, params)
    all_parts = ([root_children["seat"]] + root_children["arms"]
                 + groups["base"][0] + groups["back"][0])
    # interpenetration guard (beyond-touching overlap of axis-aligned boxes)
    if params.back_tilt == 0:
        for i in range(len(all_parts)):
            for j in range(i + 1, len(all_parts)):
                if _aabb_overlap_depth(all_parts[i].mesh, all_parts[j].mesh) > 0.02:
                    raise GeneratorError(
                        f"parts {all_parts[i].label} and {all_parts[j].label} interpenetrate")
    # recenter the assembly bounding box onto the origin
    lo = np.min([part.mesh.vertices.min(axis=0) for part in all_parts], axis=0)
    hi = np.max([part.mesh.vertices.max(axis=0) for part in all_parts], axis=0)
    if (hi - lo).max() > 1.0 + 1e-9:
        raise GeneratorError(f"assembly does not fit the unit cube: {hi - lo}")
    shift = -(lo + hi) / 2.0
    template = make_box_template(segments)

    def leaf(part: _Part) -> tuple[StructureNode, GeometryNode]:
        target = part.mesh.translated(shift)
        reg = register_box_to_part(make_box_template(segments), target,
                                   iters=register_iters)
        feature = acap_extract(template, reg.mesh)
        return (StructureNode(part.label, part.instance),
                GeometryNode(feature))

    def group(label: str, parts: list[_Part], edges) -> tuple[StructureNode, GeometryNode]:
        s_children, g_children = zip(*[leaf(p) for p in parts])
        s = StructureNode(label, 0, children=list(s_children),
                          edges=[RelationEdge(k, a, b, dict(prm)) for k, a, b, prm in edges])
        return s, GeometryNode(children=list(g_children))

    base_s, base_g = group("base", *groups["base"])
    back_s, back_g = group("back", *groups["back"])
    seat_s, seat_g = leaf(root_children["seat"])
    s_children = [back_s, base_s, seat_s]
    g_children = [back_g, base_g, seat_g]
    for part in root_children["arms"]:
        s, g = leaf(part)
        s_children.append(s)
        g_children.append(g)

    idx = {id(s): i for i, s in enumerate(s_children)}
    root_edges = [
        RelationEdge("adjacency", idx[id(back_s)], idx[id(seat_s)]),
        RelationEdge("adjacency", idx[id(base_s)], idx[id(seat_s)]),
    ]
    if root_children["arms"]:
        arm_a = len(s_children) - 2
        arm_b = len(s_children) - 1
        root_edges += [
            RelationEdge("reflective_symmetry", arm_a, arm_b,
                         {"plane_normal": [1.0, 0.0, 0.0]}),
            RelationEdge("adjacency", arm_a, idx[id(seat_s)]),
            RelationEdge("adjacency", arm_b, idx[id(seat_s)]),
        ]
    root_s = StructureNode("chair", 0, children=s_children, edges=root_edges)
    root_g = GeometryNode(children=g_children)
    h = PartHierarchy(root_s, root_g, CHAIR_TEMPLATE)
    return canonicalize(h)


# -- dataset generation ------------------------------------------------------------


@dataclass
class SynthConfig:
    structures: list[int] | None = None  # indices into enumerate_structures()
    n_geoms: int = 200
    seed: int = 0
    split_ratio: float = 0.75
    segments: int = 6
    register_iters: int = 8

    @staticmethod
    def desk_preset() -> "SynthConfig":
        return SynthConfig(structures=[0, 7, 14, 25, 32, 49], n_geoms=20)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        return SynthConfig(**d)


def geometry_bank(cfg: SynthConfig) -> list[ChairGeomParams]:
    """Shared parameter bank: variation k is the same across all structures."""
    return [sample_geometry_params(cfg.seed * 100003 + k) for k in range(cfg.n_geoms)]


def build_manifest(cfg: SynthConfig) -> dict:
    """Deterministic shape list and 3:1 split; no meshes are built."""
    specs = enumerate_structures()
    indices = cfg.structures if cfg.structures is not None else list(range(len(specs)))
    shape_keys = [(si, gi) for si in indices for gi in range(cfg.n_geoms)]
    order = np.random.default_rng(cfg.seed).permutation(len(shape_keys))
    n_train = round(cfg.split_ratio * len(shape_keys))
    split = {}
    for rank, idx in enumerate(order):
        split[shape_keys[idx]] = "train" if rank < n_train else "test"
    shapes = []
    for si, gi in shape_keys:
        sid = f"s{si:02d}_g{gi:03d}"
        shapes.append({"id": sid, "structure": si, "geom": gi,
                       "split": split[(si, gi)], "path": f"shapes/{sid}.json"})
    return {
        "dataset": "synthetic_chairs",
        "config": cfg.to_dict(),
        "structures": [{"index": i, **specs[i].to_dict()} for i in indices],
        "counts": {
            "total": len(shapes),
            "train": sum(1 for s in shapes if s["split"] == "train"),
            "test": sum(1 for s in shapes if s["split"] == "test"),
        },
        "shapes": shapes,
    }


def generate_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Materialize hierarchy JSON + feature sidecars + OBJ per shape."""
    from .mesh import save_obj
    out_dir = os.fspath(out_dir)
    manifest = build_manifest(cfg)
    specs = enumerate_structures()
    bank = geometry_bank(cfg)
    shape_dir = os.path.join(out_dir, "shapes")
    os.makedirs(shape_dir, exist_ok=True)
    template = make_box_template(cfg.segments)
    for entry in manifest["shapes"]:
        h = build_chair(specs[entry["structure"]], bank[entry["geom"]],
                        cfg.segments, cfg.register_iters)
        save_hierarchy(h, os.path.join(out_dir, entry["path"]))
        save_obj(os.path.join(shape_dir, entry["id"] + ".obj"),
                 assembled_mesh(h, template))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
