"""Center optimization: fixed points, gap closing, symmetry repair,
objective monotonicity, translation-only edits."""

import copy

import numpy as np
import pytest

from fixtures import SEGMENTS, tiny_shape
from hiergen.hierarchy import leaf_meshes
from hiergen.mesh import make_box_template
from hiergen.postproc import PostprocConfig, optimize_centers


def perturb(h, seed, magnitude=0.05):
    out = copy.deepcopy(h)
    out.template = h.template
    rng = np.random.default_rng(seed)
    applied = {}
    for s, g in out.pairs():
        if g.feature is not None:
            offset = rng.uniform(-magnitude, magnitude, 3)
            g.feature.center = g.feature.center + offset
            applied[s.node_id] = offset
    return out, applied


def min_gap(h, node_pair):
    template = make_box_template(SEGMENTS)
    parts = leaf_meshes(h, template)
    a, b = parts[node_pair[0]], parts[node_pair[1]]
    d = ((a.vertices[:, None, :] - b.vertices[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d.min()))


def test_connected_shape_is_fixed_point():
    h = tiny_shape(0)
    result, info = optimize_centers(h, PostprocConfig(iters=50))
    worst = max(np.abs(o).max() for o in info.offsets.values())
    assert worst < 1e-4


def test_floated_part_pulled_back():
    h = tiny_shape(0)
    floated = copy.deepcopy(h)
    floated.template = h.template
    seat_id = next(s.node_id for s, g in floated.pairs()
                   if g.feature is not None and s.label == "seat")
    for s, g in floated.pairs():
        if s.node_id == seat_id:
            g.feature.center = g.feature.center + np.array([0.0, 0.0, 0.05])
    result, info = optimize_centers(floated, PostprocConfig())
    # adjacency gap between the seat and a leg after optimization
    leg_id = next(s.node_id for s, g in result.pairs()
                  if g.feature is not None and s.label == "leg")
    assert min_gap(result, (seat_id, leg_id)) < 1e-2
    assert info.converged


def test_symmetry_residual_reduced_10x():
    h = tiny_shape(0)
    displaced = copy.deepcopy(h)
    displaced.template = h.template
    legs = [g for s, g in displaced.pairs()
            if g.feature is not None and s.label == "leg"]
    legs[0].feature.center = legs[0].feature.center + np.array([0.03, 0.02, 0.0])
    _, info = optimize_centers(displaced, PostprocConfig())
    before = max(info.initial_residuals["symmetry"])
    after = max(info.final_residuals["symmetry"])
    assert before > 0.01
    assert after <= before / 10.0
    worst = max(np.abs(o).max() for o in info.offsets.values())
    assert worst <= 0.05 + 1e-9  # bounded by the perturbation magnitude


def test_objective_non_increasing():
    h, _ = perturb(tiny_shape(0), seed=3)
    _, info = optimize_centers(h, PostprocConfig())
    trace = info.objective_trace
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_only_translations_change():
    h, _ = perturb(tiny_shape(0), seed=4)
    result, info = optimize_centers(h, PostprocConfig(iters=50))
    template = make_box_template(SEGMENTS)
    before = leaf_meshes(h, template)
    after = leaf_meshes(result, template)
    for lid in before:
        delta = after[lid].vertices - before[lid].vertices
        np.testing.assert_allclose(delta, delta[0], atol=1e-9)
        np.testing.assert_allclose(delta[0], info.offsets[lid], atol=1e-9)


def test_identity_term_bounds_drift():
    h, _ = perturb(tiny_shape(0), seed=5)
    cfg = PostprocConfig()
    _, info = optimize_centers(h, cfg)
    bound = np.sqrt(info.objective_trace[0] / cfg.w_identity)
    for offset in info.offsets.values():
        assert np.linalg.norm(offset) <= bound + 1e-9


def test_weights_validated():
    with pytest.raises(ValueError):
        PostprocConfig(w_structure=-1.0)
