# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Regular lattices, their tetrahedral meshes and barycentric embeddings."""

import itertools
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from lattice_servo import io as lattice_io
from lattice_servo.exceptions import (
    DegenerateGeometryError,
    DimensionMismatchError,
    DisconnectedLatticeError,
    EmbeddingError,
    EmptyInputError,
)
from lattice_servo.geometry import PointCloud, RigidTransform

_logger = logging.getLogger(__name__)

BARYCENTRIC_TOL = 1e-9

# Corner offsets of a hexahedral cell, indexed by (a, b, c) bits.
_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)))


def _kuhn_paths():
    """Corner indices of the six tets sharing the (0,0,0)-(1,1,1) diagonal.

    Each tet walks from the origin corner to the opposite one adding one
    unit axis at a time; odd permutations swap two vertices so that every
    tet has positive signed volume.
    """
    paths = []
    for permutation in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=int)
        vertices = [corner.copy()]
        for axis in permutation:
            corner[axis] = 1
            vertices.append(corner.copy())
        ordered = np.array(vertices)
        edges = ordered[1:] - ordered[0]
        if np.linalg.det(edges) < 0:
            ordered[[1, 2]] = ordered[[2, 1]]
        paths.append([int(a * 4 + b * 2 + c) for a, b, c in ordered])
    return np.array(paths)


_KUHN_TETS = _kuhn_paths()
TETS_PER_CELL = len(_KUHN_TETS)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Regular node grid placed in the world by ``origin_pose``.

    Node ``(i, j, k)`` sits at ``origin_pose.apply((i, j, k) * spacing)``
    and has flat index ``numpy.ravel_multi_index((i, j, k), dims)``.
    """

    dims: Tuple[int, int, int]
    spacing: np.ndarray
    origin_pose: RigidTransform

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError("lattice needs at least 2 nodes per axis")
        spacing = np.array(self.spacing, dtype=float).reshape(3)
        if np.any(spacing <= 0):
            raise DegenerateGeometryError("degenerate extent")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        grid = np.indices(dims).reshape(3, -1).T
        object.__setattr__(self, "grid_coords", grid)
        object.__setattr__(
            self, "rest_nodes", self.origin_pose.apply(grid * spacing)
        )

    @property
    def n_nodes(self):
        return int(np.prod(self.dims))

    @property
    def cell_dims(self):
        return tuple(d - 1 for d in self.dims)

    @property
    def extent(self):
        return self.spacing * (np.array(self.dims) - 1)

    def to_grid(self, points):
        """Continuous grid coordinates of world ``points``."""
        local = self.origin_pose.inverse().apply(points)
        return local / self.spacing

    def node_index(self, i, j, k):
        return int(np.ravel_multi_index((i, j, k), self.dims))


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Tetrahedral mesh over (a subset of) the nodes of a lattice.

    ``node_ids`` maps mesh nodes to lattice nodes; ``tet_cells`` and
    ``tet_kinds`` locate every tet in the lattice as (cell, Kuhn tet) pairs.
    """

    tets: np.ndarray
    edges: np.ndarray
    edge_weights: np.ndarray
    neighbor_sets: tuple
    rest_nodes: np.ndarray
    node_ids: np.ndarray
    tet_cells: np.ndarray
    tet_kinds: np.ndarray

    @property
    def n_nodes(self):
        return len(self.rest_nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    def cell_lookup(self, n_cells):
        """``(n_cells, 6)`` table of tet indices, ``-1`` where pruned."""
        table = np.full((n_cells, TETS_PER_CELL), -1, dtype=np.int64)
        table[self.tet_cells, self.tet_kinds] = np.arange(self.n_tets)
        return table

    def tet_volumes(self, shape=None):
        shape = self.rest_nodes if shape is None else shape
        return np.linalg.det(edge_matrices(self.tets, shape)) / 6.0


@dataclass(frozen=True, eq=False)
class Embedding:
    """Per-point tet index and barycentric weights.

    ``node_index[j]`` lists the four mesh nodes of tet ``tet_index[j]`` in the
    order matching ``weights[j]``.
    """

    tet_index: np.ndarray
    node_index: np.ndarray
    weights: np.ndarray
    n_nodes: int

    def __len__(self):
        return len(self.tet_index)

    def matrix(self, rows=None):
        """Sparse barycentric matrix ``B`` with ``B @ shape == points``.

        :type rows: :class:`numpy.ndarray`
        :param rows: (Optional) point indices to keep, in order.
        """
        node_index, weights = self.node_index, self.weights
        if rows is not None:
            node_index, weights = node_index[rows], weights[rows]
        count = len(node_index)
        return sparse.csr_matrix(
            (
                weights.reshape(-1),
                (np.repeat(np.arange(count), 4), node_index.reshape(-1)),
            ),
            shape=(count, self.n_nodes),
        )


def edge_matrices(tets, shape):
    """``(T, 3, 3)`` matrices whose columns are ``v1-v0, v2-v0, v3-v0``."""
    corners = np.asarray(shape)[tets]
    return np.transpose(corners[:, 1:] - corners[:, :1], (0, 2, 1))


def build_lattice(cloud, dims, margin=0.01, orientation=None):
    """Lattice enclosing ``cloud`` with ``margin`` added on every face.

    :type cloud: :class:`~lattice_servo.geometry.PointCloud`
    :param cloud: Object cloud.

    :type dims: tuple
    :param dims: Node counts per lattice axis, each at least 2.

    :type margin: float
    :param margin: Growth of the oriented bounding box per face, meters.

    :type orientation: :class:`~lattice_servo.geometry.RigidTransform`
    :param orientation: (Optional) lattice frame; the box is axis-aligned in
                        this frame. Defaults to the world frame.

    :rtype: :class:`Lattice`
    """
    if len(cloud) == 0:
        raise EmptyInputError()
    orientation = orientation or RigidTransform.identity()
    local = orientation.inverse().apply(cloud.points)
    lower = local.min(axis=0) - margin
    upper = local.max(axis=0) + margin
    extent = upper - lower
    if np.any(extent <= 0):
        raise DegenerateGeometryError("degenerate extent")
    dims = np.array(dims, dtype=int)
    if dims.shape != (3,) or np.any(dims < 2):
        raise ValueError("lattice needs at least 2 nodes per axis")
    origin = RigidTransform(orientation.rotation, orientation.apply(lower)[0])
    return Lattice(tuple(dims), extent / (dims - 1), origin)


def _unique_edges(tets):
    pairs = tets[:, list(itertools.combinations(range(4), 2))].reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _neighbor_sets(edges, n_nodes):
    adjacency = sparse.coo_matrix(
        (np.ones(2 * len(edges)), (edges.ravel(), edges[:, ::-1].ravel())),
        shape=(n_nodes, n_nodes),
    ).tocsr()
    adjacency.sort_indices()
    return tuple(
        adjacency.indices[adjacency.indptr[i] : adjacency.indptr[i + 1]]
        for i in range(n_nodes)
    )


def _assemble_mesh(tets, rest_nodes, node_ids, tet_cells, tet_kinds, weight):
    edges = _unique_edges(tets)
    return TetMesh(
        tets=tets,
        edges=edges,
        edge_weights=np.full(len(edges), float(weight)),
        neighbor_sets=_neighbor_sets(edges, len(rest_nodes)),
        rest_nodes=rest_nodes,
        node_ids=node_ids,
        tet_cells=tet_cells,
        tet_kinds=tet_kinds,
    )


def tetrahedralize(lattice, edge_weight=1.0):
    """Split every lattice cell into six Kuhn tets along one diagonal.

    Tets are numbered cell by cell, cells in ``ravel_multi_index`` order.
    """
    cells = np.indices(lattice.cell_dims).reshape(3, -1).T
    corners = cells[:, None, :] + _CORNERS[None, :, :]
    corner_ids = np.ravel_multi_index(
        tuple(corners.reshape(-1, 3).T), lattice.dims
    ).reshape(len(cells), 8)
    tets = corner_ids[:, _KUHN_TETS].reshape(-1, 4)
    return _assemble_mesh(
        tets,
        lattice.rest_nodes,
        np.arange(lattice.n_nodes),
        np.repeat(np.arange(len(cells)), TETS_PER_CELL),
        np.tile(np.arange(TETS_PER_CELL), len(cells)),
        edge_weight,
    )


def _candidate_cells(lattice, grid):
    """Up to eight cells per point, covering points on cell boundaries."""
    upper = np.array(lattice.cell_dims) - 1
    low = np.clip(np.floor(grid - BARYCENTRIC_TOL), 0, upper).astype(int)
    high = np.clip(np.floor(grid + BARYCENTRIC_TOL), 0, upper).astype(int)
    options = []
    for pick in itertools.product((0, 1), repeat=3):
        cell = np.where(np.array(pick, dtype=bool), high, low)
        options.append(np.ravel_multi_index(tuple(cell.T), lattice.cell_dims))
    return np.stack(options, axis=1)


def barycentric(tets, rest_nodes, tet_ids, points):
    """Barycentric coordinates of ``points[j]`` in tet ``tet_ids[j]``."""
    corners = rest_nodes[tets[tet_ids]]
    local = np.linalg.solve(
        np.transpose(corners[:, 1:] - corners[:, :1], (0, 2, 1)),
        (points - corners[:, 0])[..., None],
    )[..., 0]
    return np.column_stack([1.0 - local.sum(axis=1), local])


def embed(cloud, lattice, mesh):
    """Locate every point of ``cloud`` in a tet of ``mesh``.

    Points on shared faces go to the containing tet with the lowest index.

    :rtype: :class:`Embedding`
    :raises: :class:`~lattice_servo.exceptions.EmbeddingError` naming the
             first point outside every tet.
    """
    points = cloud.points
    count = len(points)
    if count == 0:
        return Embedding(
            np.zeros(0, dtype=np.int64),
            np.zeros((0, 4), dtype=np.int64),
            np.zeros((0, 4)),
            mesh.n_nodes,
        )
    lookup = mesh.cell_lookup(int(np.prod(lattice.cell_dims)))
    cells = _candidate_cells(lattice, lattice.to_grid(points))
    candidates = lookup[cells].reshape(count, -1)

    valid = candidates >= 0
    rows, slots = np.nonzero(valid)
    weights = barycentric(
        mesh.tets, mesh.rest_nodes, candidates[rows, slots], points[rows]
    )
    inside = np.zeros_like(valid)
    inside[rows, slots] = weights.min(axis=1) >= -BARYCENTRIC_TOL

    ranked = np.where(inside, candidates, np.iinfo(np.int64).max)
    best = ranked.argmin(axis=1)
    found = inside[np.arange(count), best]
    if not np.all(found):
        index = int(np.flatnonzero(~found)[0])
        raise EmbeddingError(
            "point {} lies outside the lattice".format(index), index
        )
    tet_index = candidates[np.arange(count), best]
    return Embedding(
        tet_index=tet_index,
        node_index=mesh.tets[tet_index],
        weights=barycentric(mesh.tets, mesh.rest_nodes, tet_index, points),
        n_nodes=mesh.n_nodes,
    )


def reconstruct(embedding, shape):
    """Object points ``p_j = sum_i alpha_ij s_i`` for lattice ``shape``."""
    shape = np.asarray(shape, dtype=float)
    if len(shape) != embedding.n_nodes:
        raise DimensionMismatchError(
            "shape has {} nodes, embedding expects {}".format(
                len(shape), embedding.n_nodes
            )
        )
    corners = shape[embedding.node_index]
    return np.einsum("nk,nkd->nd", embedding.weights, corners)


def prune_nonconvex(lattice, mesh, cloud):
    """Drop tets that hold no object point and lie away from the object.

    A tet is removed when no point of ``cloud`` is embedded in it and its
    centroid is farther than one lattice spacing from the cloud. Nodes no
    longer referenced by any tet are removed and the rest renumbered.

    :rtype: tuple
    :returns: ``(mesh, keep)``: the reduced :class:`TetMesh` and a boolean
              mask over the nodes of the input mesh.
    :raises: :class:`~lattice_servo.exceptions.DisconnectedLatticeError` if
             the reduced mesh falls apart.
    """
    embedding = embed(cloud, lattice, mesh)
    occupied = np.zeros(mesh.n_tets, dtype=bool)
    occupied[embedding.tet_index] = True
    centroids = mesh.rest_nodes[mesh.tets].mean(axis=1)
    distance, _ = cKDTree(cloud.points).query(centroids)
    keep_tets = occupied | (distance <= lattice.spacing.max())

    keep = np.zeros(mesh.n_nodes, dtype=bool)
    keep[mesh.tets[keep_tets].ravel()] = True
    renumber = np.full(mesh.n_nodes, -1, dtype=np.int64)
    renumber[keep] = np.arange(np.count_nonzero(keep))
    tets = renumber[mesh.tets[keep_tets]]

    reduced = _assemble_mesh(
        tets,
        mesh.rest_nodes[keep],
        mesh.node_ids[keep],
        mesh.tet_cells[keep_tets],
        mesh.tet_kinds[keep_tets],
        mesh.edge_weights[0] if len(mesh.edge_weights) else 1.0,
    )
    adjacency = sparse.coo_matrix(
        (
            np.ones(len(reduced.edges)),
            (reduced.edges[:, 0], reduced.edges[:, 1]),
        ),
        shape=(reduced.n_nodes, reduced.n_nodes),
    )
    n_components, _ = csgraph.connected_components(adjacency, directed=False)
    if n_components > 1:
        raise DisconnectedLatticeError()
    _logger.info(
        "pruned %d of %d tets and %d of %d nodes",
        mesh.n_tets - len(tets),
        mesh.n_tets,
        mesh.n_nodes - reduced.n_nodes,
        mesh.n_nodes,
    )
    return reduced, keep


def nearest_nodes(shape, query, k):
    """Indices of the ``k`` nodes closest to ``query``, ties to lower index."""
    shape = np.asarray(shape, dtype=float)
    if k > len(shape):
        raise ValueError("k exceeds the number of nodes")
    distance = np.linalg.norm(shape - np.asarray(query, dtype=float), axis=1)
    return np.argsort(distance, kind="stable")[:k]


def deformation_gradients(mesh, shape):
    """Per-tet deformation gradient ``F = D_s D_u^-1``."""
    rest = edge_matrices(mesh.tets, mesh.rest_nodes)
    current = edge_matrices(mesh.tets, shape)
    return current @ np.linalg.inv(rest)


def transport_normals(embedding, mesh, shape, normals):
    """Map rest normals through the inverse transpose of their tet's ``F``."""
    gradients = deformation_gradients(mesh, shape)
    inverse_t = np.transpose(np.linalg.inv(gradients), (0, 2, 1))
    moved = np.einsum("nij,nj->ni", inverse_t[embedding.tet_index], normals)
    return moved / np.linalg.norm(moved, axis=1, keepdims=True)


def deformed_cloud(embedding, mesh, shape, rest_normals=None):
    """Object cloud for lattice ``shape``, with transported normals."""
    normals = None
    if rest_normals is not None:
        normals = transport_normals(embedding, mesh, shape, rest_normals)
    return PointCloud(reconstruct(embedding, shape), normals)


def export_lattice(path, mesh, shape=None):
    """Write a lattice snapshot: nodes as vertices, tet edges as edges."""
    shape = mesh.rest_nodes if shape is None else shape
    lattice_io.write_lattice(path, shape, mesh.edges)
