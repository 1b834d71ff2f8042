# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import os
import shutil
import tempfile
import unittest

import numpy as np

from lattice_servo import io as lattice_io
from lattice_servo.exceptions import (
    DegenerateGeometryError,
    DimensionMismatchError,
    DisconnectedLatticeError,
    EmbeddingError,
    EmptyInputError,
)
from lattice_servo.geometry import PointCloud, RigidTransform
from lattice_servo.lattice import (
    BARYCENTRIC_TOL,
    Lattice,
    barycentric,
    build_lattice,
    deformation_gradients,
    embed,
    export_lattice,
    nearest_nodes,
    prune_nonconvex,
    reconstruct,
    tetrahedralize,
    transport_normals,
)

from tests._helpers import box_corners, random_rotation


class TestBuildLattice(unittest.TestCase):
    def test_spacing_and_origin(self):
        cloud = PointCloud(box_corners((0.1, 0.05, 0.02)))
        lattice = build_lattice(cloud, (3, 3, 2), margin=0.01)
        np.testing.assert_allclose(lattice.spacing, [0.06, 0.035, 0.04])
        np.testing.assert_allclose(
            lattice.rest_nodes[0], [-0.06, -0.035, -0.02]
        )
        np.testing.assert_allclose(lattice.extent, [0.12, 0.07, 0.04])
        self.assertEqual(lattice.n_nodes, 18)
        self.assertEqual(lattice.node_index(2, 2, 1), 17)

    def test_oriented_box(self):
        cloud = PointCloud(box_corners((0.1, 0.05, 0.02)))
        turn = RigidTransform.from_rotvec((0, 0, 90), degrees=True)
        lattice = build_lattice(
            PointCloud(turn.apply(cloud.points)),
            (3, 3, 2),
            margin=0.0,
            orientation=turn,
        )
        np.testing.assert_allclose(lattice.spacing, [0.05, 0.025, 0.02])
        grid = lattice.to_grid(turn.apply(cloud.points))
        self.assertTrue(np.all(grid > -1e-9))
        self.assertTrue(np.all(grid < np.array(lattice.dims) - 1 + 1e-9))

    def test_flat_cloud_without_margin(self):
        flat = box_corners((0.1, 0.1, 0.0))
        with self.assertRaisesRegex(DegenerateGeometryError, "degenerate"):
            build_lattice(PointCloud(flat), (3, 3, 3), margin=0.0)

    def test_too_few_nodes(self):
        with self.assertRaises(ValueError):
            build_lattice(PointCloud(box_corners((1, 1, 1))), (1, 3, 3))

    def test_empty_cloud(self):
        with self.assertRaises(EmptyInputError):
            build_lattice(PointCloud(np.zeros((0, 3))), (3, 3, 3))

    def test_zero_spacing(self):
        with self.assertRaises(DegenerateGeometryError):
            Lattice((3, 3, 3), (0.1, 0.0, 0.1), RigidTransform.identity())


class TestTetrahedralize(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.lattice = build_lattice(
            PointCloud(box_corners((0.1, 0.1, 0.1))), (3, 3, 3), margin=0.0
        )
        cls.mesh = tetrahedralize(cls.lattice)

    def test_counts(self):
        self.assertEqual(self.mesh.n_tets, 6 * 8)
        self.assertEqual(self.mesh.n_nodes, 27)
        np.testing.assert_array_equal(
            self.mesh.tet_cells, np.repeat(np.arange(8), 6)
        )

    def test_volumes_positive_and_fill_box(self):
        volumes = self.mesh.tet_volumes()
        self.assertTrue(np.all(volumes > 0))
        self.assertAlmostEqual(volumes.sum(), 0.1**3)

    def test_edges_sorted_and_unique(self):
        edges = self.mesh.edges
        self.assertTrue(np.all(edges[:, 0] < edges[:, 1]))
        self.assertEqual(len(np.unique(edges, axis=0)), len(edges))

    def test_neighbor_sets_symmetric(self):
        for node, neighbors in enumerate(self.mesh.neighbor_sets):
            np.testing.assert_array_equal(neighbors, np.sort(neighbors))
            for other in neighbors:
                self.assertIn(node, self.mesh.neighbor_sets[other])


class TestEmbedding(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.lattice = build_lattice(
            PointCloud(box_corners((0.1, 0.1, 0.1))), (3, 3, 3), margin=0.0
        )
        cls.mesh = tetrahedralize(cls.lattice)

    def test_reconstructs_interior_points(self):
        rng = np.random.default_rng(0)
        points = rng.uniform(-0.05, 0.05, size=(10000, 3))
        embedding = embed(PointCloud(points), self.lattice, self.mesh)
        np.testing.assert_allclose(
            reconstruct(embedding, self.mesh.rest_nodes), points, atol=1e-9
        )
        np.testing.assert_allclose(embedding.weights.sum(axis=1), 1.0)
        self.assertTrue(np.all(embedding.weights >= -BARYCENTRIC_TOL))
        np.testing.assert_allclose(
            embedding.matrix() @ self.mesh.rest_nodes, points, atol=1e-9
        )

    def test_nodes_embed_exactly(self):
        nodes = self.mesh.rest_nodes
        embedding = embed(PointCloud(nodes), self.lattice, self.mesh)
        np.testing.assert_allclose(
            reconstruct(embedding, nodes), nodes, atol=1e-12
        )

    def test_shared_faces_go_to_lowest_tet(self):
        nodes = self.mesh.rest_nodes
        tets = self.mesh.tets
        face_centers = nodes[tets[:, :3]].mean(axis=1)
        points = np.concatenate([nodes, face_centers])
        embedding = embed(PointCloud(points), self.lattice, self.mesh)
        every_tet = np.arange(self.mesh.n_tets)
        for index, point in enumerate(points):
            weights = barycentric(
                tets,
                nodes,
                every_tet,
                np.tile(point, (self.mesh.n_tets, 1)),
            )
            inside = np.flatnonzero(weights.min(axis=1) >= -BARYCENTRIC_TOL)
            self.assertEqual(embedding.tet_index[index], inside.min())

    def test_outside_point(self):
        points = [[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]]
        with self.assertRaises(EmbeddingError) as raised:
            embed(PointCloud(points), self.lattice, self.mesh)
        self.assertEqual(raised.exception.index, 1)

    def test_affine_equivariance(self):
        rng = np.random.default_rng(1)
        points = rng.uniform(-0.05, 0.05, size=(100, 3))
        embedding = embed(PointCloud(points), self.lattice, self.mesh)
        linear = random_rotation(rng) @ np.diag([1.5, 0.7, 1.1])
        offset = rng.normal(size=3)
        moved = self.mesh.rest_nodes @ linear.T + offset
        np.testing.assert_allclose(
            reconstruct(embedding, moved),
            points @ linear.T + offset,
            atol=1e-9,
        )

    def test_shape_mismatch(self):
        cloud = PointCloud(np.zeros((1, 3)))
        embedding = embed(cloud, self.lattice, self.mesh)
        with self.assertRaises(DimensionMismatchError):
            reconstruct(embedding, np.zeros((5, 3)))

    def test_empty_cloud(self):
        cloud = PointCloud(np.zeros((0, 3)))
        embedding = embed(cloud, self.lattice, self.mesh)
        self.assertEqual(len(embedding), 0)


class TestPruning(unittest.TestCase):
    def test_diagonal_object(self):
        line = np.outer(np.linspace(0.0, 1.0, 101), [0.2, 0.2, 0.2])
        cloud = PointCloud(line)
        lattice = build_lattice(cloud, (6, 6, 6), margin=0.0)
        mesh = tetrahedralize(lattice)
        reduced, keep = prune_nonconvex(lattice, mesh, cloud)
        self.assertLess(reduced.n_tets, mesh.n_tets)
        self.assertEqual(np.count_nonzero(keep), reduced.n_nodes)
        np.testing.assert_array_equal(
            reduced.rest_nodes, lattice.rest_nodes[reduced.node_ids]
        )
        embedding = embed(cloud, lattice, reduced)
        np.testing.assert_allclose(
            reconstruct(embedding, reduced.rest_nodes), line, atol=1e-9
        )

    def test_two_clusters_disconnect(self):
        cloud = PointCloud(
            [
                [0.0, 0.0, 0.0],
                [0.005, 0.0, 0.0],
                [0.0, 0.005, 0.0],
                [0.2, 0.2, 0.2],
                [0.195, 0.2, 0.2],
                [0.2, 0.195, 0.2],
            ]
        )
        lattice = build_lattice(cloud, (6, 6, 6), margin=0.0)
        with self.assertRaisesRegex(DisconnectedLatticeError, "disconnected"):
            prune_nonconvex(lattice, tetrahedralize(lattice), cloud)


class TestNodeQueries(unittest.TestCase):
    def test_nearest_nodes_ties_to_lower_index(self):
        lattice = Lattice((3, 3, 3), (1.0, 1.0, 1.0), RigidTransform())
        np.testing.assert_array_equal(
            nearest_nodes(lattice.rest_nodes, (1.0, 1.0, 1.0), 7),
            [13, 4, 10, 12, 14, 16, 22],
        )

    def test_nearest_nodes_too_many(self):
        with self.assertRaises(ValueError):
            nearest_nodes(np.zeros((3, 3)), (0, 0, 0), 4)


class TestDeformation(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.lattice = build_lattice(
            PointCloud(box_corners((0.1, 0.1, 0.1))), (3, 3, 3), margin=0.0
        )
        cls.mesh = tetrahedralize(cls.lattice)

    def test_rigid_motion_gradients(self):
        rotation = random_rotation(np.random.default_rng(2))
        shape = self.mesh.rest_nodes @ rotation.T + [0.1, 0.2, 0.3]
        gradients = deformation_gradients(self.mesh, shape)
        np.testing.assert_allclose(
            gradients, np.tile(rotation, (self.mesh.n_tets, 1, 1)), atol=1e-12
        )

    def test_normals_under_stretch(self):
        cloud = PointCloud([[0.01, 0.02, 0.0], [-0.02, 0.01, 0.01]])
        embedding = embed(cloud, self.lattice, self.mesh)
        normals = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        shape = self.mesh.rest_nodes * [2.0, 1.0, 1.0]
        moved = transport_normals(embedding, self.mesh, shape, normals)
        np.testing.assert_allclose(
            moved,
            [[1.0, 0.0, 0.0], [1.0 / np.sqrt(5), 2.0 / np.sqrt(5), 0.0]],
            atol=1e-12,
        )

    def test_export_lattice(self):
        tmp = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp, "lattice.ply")
            shape = self.mesh.rest_nodes + 0.01
            export_lattice(path, self.mesh, shape)
            np.testing.assert_allclose(
                lattice_io.read_lattice_nodes(path), shape, atol=1e-9
            )
        finally:
            shutil.rmtree(tmp)
