"""Mesh kernel: template construction, OBB, registration, deformation
features and their round trips, graph convolution gradients."""

import numpy as np
import pytest

from conftest import check_gradient
from hiergen import mesh as M
from hiergen import metrics
from hiergen import tensor as T
from hiergen.mesh import (AcapFeature, Mesh, MeshError, acap_extract,
                          acap_reconstruct, compute_obb, make_box_template,
                          mesh_graph_conv, register_box_to_part, rotation_exp,
                          rotation_log)
from hiergen.tensor import Tensor


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestBoxTemplate:
    @pytest.mark.parametrize("segments,expected", [(1, 8), (2, 26), (30, 5402)])
    def test_vertex_counts(self, segments, expected):
        assert make_box_template(segments).n_vertices == expected

    def test_zero_segments_rejected(self):
        with pytest.raises(MeshError):
            make_box_template(0)

    @pytest.mark.parametrize("segments", list(range(1, 33)))
    def test_closed_manifold(self, segments):
        mesh = make_box_template(segments)
        assert mesh.euler_characteristic() == 2
        assert mesh.is_edge_manifold()

    def test_vertices_on_unit_cube(self):
        mesh = make_box_template(4)
        assert np.abs(mesh.vertices).max() == pytest.approx(0.5)
        on_surface = (np.abs(np.abs(mesh.vertices) - 0.5) < 1e-12).any(axis=1)
        assert on_surface.all()

    def test_cache_returns_same_object(self):
        assert make_box_template(3) is make_box_template(3)


class TestObb:
    def test_axis_aligned_cube(self):
        corners = np.array([[sx, sy, sz] for sx in (-0.5, 0.5)
                            for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)])
        obb = compute_obb(corners)
        np.testing.assert_allclose(obb.center, 0, atol=1e-12)
        np.testing.assert_allclose(sorted(obb.extents), [0.5, 0.5, 0.5], atol=1e-12)

    def test_rotated_cuboid_recovers_frame(self):
        # corners of a distinct-extent cuboid rotated 45 degrees about z
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                            for sz in (-1, 1)]) * np.array([2.0, 1.0, 0.4])
        rot = rotation_z(np.pi / 4)
        obb = compute_obb(corners @ rot.T)
        # recovered axes match the rotated frame up to permutation/sign
        match = np.abs(obb.axes.T @ rot)
        assert np.allclose(np.sort(match.max(axis=0)), 1.0, atol=1e-6)
        np.testing.assert_allclose(sorted(obb.extents), [0.4, 1.0, 2.0], atol=1e-9)

    def test_symmetric_cube_gets_world_axes(self):
        # isotropic point sets have no preferred PCA frame; the canonical
        # choice is the world frame
        obb = compute_obb(make_box_template(4).vertices)
        np.testing.assert_allclose(np.abs(obb.axes), np.eye(3), atol=1e-9)

    def test_coplanar_square_clamps_third_extent(self):
        square = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        obb = compute_obb(square)
        assert obb.extents.min() == pytest.approx(M.MIN_EXTENT)
        assert (obb.extents > 0).all()

    def test_axes_orthonormal(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            obb = compute_obb(rng.normal(size=(50, 3)))
            np.testing.assert_allclose(obb.axes.T @ obb.axes, np.eye(3), atol=1e-6)

    def test_empty_input_rejected(self):
        with pytest.raises(MeshError):
            compute_obb(np.zeros((0, 3)))

    def test_quaternion_unit_norm(self):
        rng = np.random.default_rng(5)
        obb = compute_obb(rng.normal(size=(40, 3)))
        assert np.linalg.norm(obb.quaternion()) == pytest.approx(1.0)


class TestClosestPoint:
    def test_points_on_surface_project_to_themselves(self):
        mesh = make_box_template(2)
        proj = M.closest_points_on_mesh(mesh.vertices, mesh)
        np.testing.assert_allclose(proj, mesh.vertices, atol=1e-12)

    def test_point_above_face(self):
        mesh = make_box_template(1)
        proj = M.closest_points_on_mesh(np.array([[0.0, 0.0, 2.0]]), mesh)
        np.testing.assert_allclose(proj[0], [0, 0, 0.5], atol=1e-12)

    def test_point_outside_corner(self):
        mesh = make_box_template(1)
        proj = M.closest_points_on_mesh(np.array([[2.0, 2.0, 2.0]]), mesh)
        np.testing.assert_allclose(proj[0], [0.5, 0.5, 0.5], atol=1e-12)


class TestRegistration:
    def test_fixed_point_on_self(self):
        template = make_box_template(3)
        result = register_box_to_part(template, template, iters=10)
        assert result.converged
        np.testing.assert_allclose(result.mesh.vertices, template.vertices, atol=1e-8)

    def test_anisotropic_scale_target(self):
        template = make_box_template(4)
        scale = np.array([2.0, 1.0, 0.5])
        target = Mesh(template.vertices * scale, template.faces)
        result = register_box_to_part(template, target, iters=30)
        rmse = np.sqrt(((result.mesh.vertices - target.vertices) ** 2).sum(axis=1).mean())
        assert rmse < 1e-3

    def test_synthetic_leg_chamfer(self):
        template = make_box_template(4)
        leg = Mesh(make_box_template(1).vertices * np.array([0.05, 0.05, 0.4])
                   + np.array([0.2, 0.2, 0.2]), make_box_template(1).faces)
        result = register_box_to_part(template, leg, iters=30)
        a = metrics.sample_surface(result.mesh, 2000, seed=0)
        b = metrics.sample_surface(leg, 2000, seed=1)
        assert metrics.chamfer(a, b) < 1e-3

    def test_empty_target_rejected(self):
        template = make_box_template(2)
        with pytest.raises(MeshError):
            register_box_to_part(template, Mesh(np.zeros((1, 3)), np.zeros((0, 3))), 5)


class TestDeformationFeature:
    def test_rest_state_is_identity_encoding(self):
        template = make_box_template(3)
        feat = acap_extract(template, template)
        np.testing.assert_allclose(feat.per_vertex[:, :3], 0, atol=1e-9)
        expected = np.tile([1, 1, 1, 0, 0, 0], (template.n_vertices, 1))
        np.testing.assert_allclose(feat.per_vertex[:, 3:], expected, atol=1e-9)

    def test_uniform_scale_two(self):
        template = make_box_template(3)
        feat = acap_extract(template, Mesh(template.vertices * 2.0, template.faces))
        np.testing.assert_allclose(feat.per_vertex[:, :3], 0, atol=1e-9)
        expected = np.tile([2, 2, 2, 0, 0, 0], (template.n_vertices, 1))
        np.testing.assert_allclose(feat.per_vertex[:, 3:], expected, atol=1e-9)

    def test_rotation_90_about_z(self):
        template = make_box_template(3)
        rot = rotation_z(np.pi / 2)
        feat = acap_extract(template, Mesh(template.vertices @ rot.T, template.faces))
        expected = np.array([0.0, 0.0, np.pi / 2])
        np.testing.assert_allclose(feat.per_vertex[:, :3],
                                   np.tile(expected, (template.n_vertices, 1)), atol=1e-6)

    def test_translation_moves_only_center(self):
        template = make_box_template(3)
        deformed = Mesh(template.vertices * np.array([1.5, 0.8, 1.1]), template.faces)
        feat_a = acap_extract(template, deformed)
        feat_b = acap_extract(template, deformed.translated([0.3, -0.2, 0.7]))
        assert np.abs(feat_a.per_vertex - feat_b.per_vertex).max() < 1e-9
        np.testing.assert_allclose(feat_b.center - feat_a.center, [0.3, -0.2, 0.7], atol=1e-9)

    def test_reconstruct_rest_state_recenters(self):
        template = make_box_template(3)
        feat = acap_extract(template, template)
        feat.center = np.zeros(3)
        mesh = acap_reconstruct(template, feat)
        rmse = np.sqrt(((mesh.vertices - template.vertices) ** 2).sum(axis=1).mean())
        assert rmse < 1e-9

    @pytest.mark.parametrize("scale", [(2.0, 1.0, 0.5), (0.3, 3.0, 1.0)])
    def test_round_trip_anisotropic_scale(self, scale):
        template = make_box_template(4)
        deformed = Mesh(template.vertices * np.array(scale), template.faces)
        mesh = acap_reconstruct(template, acap_extract(template, deformed))
        rmse = np.sqrt(((mesh.vertices - deformed.vertices) ** 2).sum(axis=1).mean())
        assert rmse < 1e-6

    def test_round_trip_170_degree_rotation(self):
        template = make_box_template(4)
        rot = rotation_z(np.deg2rad(170))
        deformed = Mesh(template.vertices @ rot.T, template.faces)
        mesh = acap_reconstruct(template, acap_extract(template, deformed))
        rmse = np.sqrt(((mesh.vertices - deformed.vertices) ** 2).sum(axis=1).mean())
        assert rmse < 1e-6

    def test_round_trip_rotation_beyond_180(self):
        # global 190-degree rotation: consistency propagation keeps one branch
        template = make_box_template(3)
        rot = rotation_z(np.deg2rad(190))
        deformed = Mesh(template.vertices @ rot.T, template.faces)
        feat = acap_extract(template, deformed)
        spread = np.abs(feat.per_vertex[:, :3] - feat.per_vertex[0, :3]).max()
        assert spread < 1e-6
        mesh = acap_reconstruct(template, feat)
        rmse = np.sqrt(((mesh.vertices - deformed.vertices) ** 2).sum(axis=1).mean())
        assert rmse < 1e-6

    def test_round_trip_random_rotation_scale(self, rng):
        template = make_box_template(4)
        for _ in range(5):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0, np.deg2rad(179))
            rot = rotation_exp(axis * angle)
            scale = np.diag(rng.uniform(0.3, 3.0, 3))
            deformed = Mesh(template.vertices @ (rot @ scale).T + rng.normal(size=3),
                            template.faces)
            mesh = acap_reconstruct(template, acap_extract(template, deformed))
            rmse = np.sqrt(((mesh.vertices - deformed.vertices) ** 2).sum(axis=1).mean())
            assert rmse < 1e-6

    def test_vertex_count_mismatch(self):
        with pytest.raises(MeshError):
            acap_extract(make_box_template(2), make_box_template(3))


class TestRotationHelpers:
    def test_log_exp_round_trip(self, rng):
        for _ in range(20):
            v = rng.normal(size=3)
            v = v / np.linalg.norm(v) * rng.uniform(0, np.pi - 1e-3)
            np.testing.assert_allclose(rotation_log(rotation_exp(v)), v, atol=1e-8)

    def test_log_near_pi(self):
        v = np.array([0.0, 0.0, np.pi - 1e-9])
        recovered = rotation_log(rotation_exp(v))
        assert abs(np.linalg.norm(recovered) - np.linalg.norm(v)) < 1e-6


class TestMeshGraphConv:
    def test_identity_weights_pass_positive_input(self, rng):
        mesh = make_box_template(2)
        x = Tensor(rng.uniform(0.5, 1.5, (mesh.n_vertices, 4)))
        out = mesh_graph_conv(x, mesh, Tensor(np.eye(4)), Tensor(np.zeros((4, 4))),
                              Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data)

    def test_constant_field(self, rng):
        mesh = make_box_template(2)
        c = rng.uniform(-1, 1, 4)
        ws = rng.normal(size=(4, 3))
        wn = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        x = Tensor(np.tile(c, (mesh.n_vertices, 1)))
        out = mesh_graph_conv(x, mesh, Tensor(ws), Tensor(wn), Tensor(b))
        expected = c @ ws + c @ wn + b
        expected = np.where(expected >= 0, expected, 0.2 * expected)
        np.testing.assert_allclose(out.data, np.tile(expected, (mesh.n_vertices, 1)),
                                   atol=1e-12)

    def test_gradient_matches_fd(self, rng):
        mesh = make_box_template(2)  # 26 vertices
        x0 = rng.uniform(-1, 1, (mesh.n_vertices, 3))

        def loss(x, ws, wn, b):
            return (mesh_graph_conv(x, mesh, ws, wn, b) ** 2).sum()

        check_gradient(loss, [x0, rng.normal(size=(3, 2)),
                              rng.normal(size=(3, 2)), rng.normal(size=2)],
                       sample=40)


class TestObjIO:
    def test_round_trip(self, tmp_path):
        mesh = make_box_template(2)
        path = tmp_path / "box.obj"
        M.save_obj(path, mesh)
        loaded = M.load_obj(path)
        np.testing.assert_allclose(loaded.vertices, mesh.vertices, atol=1e-8)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)
