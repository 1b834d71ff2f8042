# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Primitive 3D types and point-cloud utilities.

Points are stored as ``(n, 3)`` float arrays in meters. Every function in
this module is pure: inputs are never modified in place.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from lattice_servo.exceptions import (
    DegenerateGeometryError,
    DimensionMismatchError,
    EmptyInputError,
    InsufficientPointsError,
)

_logger = logging.getLogger(__name__)

ORTHONORMAL_ATOL = 1e-9
UNIT_NORMAL_ATOL = 1e-6
DEFAULT_NORMAL_NEIGHBORS = 10


def as_points(values):
    """Coerce ``values`` to a float ``(n, 3)`` array."""
    points = np.asarray(values, dtype=float)
    if points.size == 0:
        return np.zeros((0, 3))
    points = np.atleast_2d(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionMismatchError(
            "expected an (n, 3) array, got shape {}".format(points.shape)
        )
    return points


def skew(vector):
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ u == cross(v, u)``."""
    x, y, z = vector
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``.

    :type rotation: :class:`numpy.ndarray`
    :param rotation: 3x3 orthonormal matrix with determinant +1.

    :type translation: :class:`numpy.ndarray`
    :param translation: Translation vector in meters.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(
            rotation.T @ rotation, np.eye(3), rtol=0, atol=ORTHONORMAL_ATOL
        ):
            raise DegenerateGeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_ATOL:
            raise DegenerateGeometryError("rotation has determinant -1")
        if not np.all(np.isfinite(translation)):
            raise DegenerateGeometryError("translation is not finite")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_quaternion(cls, translation, quaternion):
        """Build from a translation and an ``(x, y, z, w)`` quaternion."""
        return cls(Rotation.from_quat(quaternion).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0), degrees=False):
        return cls(
            Rotation.from_rotvec(rotvec, degrees=degrees).as_matrix(),
            translation,
        )

    @property
    def quaternion(self):
        """Rotation as an ``(x, y, z, w)`` quaternion."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def apply(self, points):
        return as_points(points) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors):
        return as_points(vectors) @ self.rotation.T

    def inverse(self):
        rotation_t = self.rotation.T
        return RigidTransform(rotation_t, -rotation_t @ self.translation)

    def compose(self, other):
        """Return ``self * other``: ``other`` is applied first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def angle(self):
        """Rotation angle in radians."""
        rotvec = Rotation.from_matrix(self.rotation).as_rotvec()
        return float(np.linalg.norm(rotvec))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered set of 3D points with optional unit normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        points = as_points(self.points)
        object.__setattr__(self, "points", points)
        if self.normals is None:
            return
        normals = as_points(self.normals)
        if len(normals) != len(points):
            raise DimensionMismatchError(
                "{} normals for {} points".format(len(normals), len(points))
            )
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > UNIT_NORMAL_ATOL):
            raise DegenerateGeometryError("normals must have unit length")
        object.__setattr__(self, "normals", normals)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    def subset(self, indices):
        indices = np.asarray(indices)
        normals = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], normals)

    def without_normals(self):
        return PointCloud(self.points)


@dataclass(frozen=True, eq=False)
class AxisAlignedBox:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lower = np.array(self.min, dtype=float).reshape(3)
        upper = np.array(self.max, dtype=float).reshape(3)
        if np.any(lower > upper):
            raise DegenerateGeometryError("box min exceeds max")
        object.__setattr__(self, "min", lower)
        object.__setattr__(self, "max", upper)

    @property
    def extent(self):
        return self.max - self.min

    def contains(self, points):
        points = as_points(points)
        return np.all((points >= self.min) & (points <= self.max), axis=1)


def bounding_box(cloud, margin=0.0):
    """Axis-aligned bounding box of ``cloud`` grown by ``margin`` per face.

    :type cloud: :class:`PointCloud`
    :param cloud: Non-empty cloud.

    :type margin: float
    :param margin: Non-negative growth in meters.

    :rtype: :class:`AxisAlignedBox`
    :raises: :class:`~lattice_servo.exceptions.EmptyInputError` for an empty
             cloud.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if len(cloud) == 0:
        raise EmptyInputError()
    return AxisAlignedBox(
        cloud.points.min(axis=0) - margin, cloud.points.max(axis=0) + margin
    )


def grid_cells(points, cell):
    """Label every point with the cubic cell of side ``cell`` it falls in.

    Labels are numbered in first-occurrence order.

    :rtype: tuple
    :returns: ``(labels, first)``: per-point label and, per label, the index
              of its first point.
    """
    if cell <= 0:
        raise ValueError("cell size must be positive")
    points = as_points(points)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    keys = np.floor(points / cell).astype(np.int64)
    _, first, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse], first[order]


def grid_subsample(cloud, cell):
    """Replace the points of every occupied cell with their centroid.

    Normals are not carried over; the output has one point per occupied cell
    in first-occurrence order.
    """
    labels, first = grid_cells(cloud.points, cell)
    if len(first) == 0:
        return PointCloud(np.zeros((0, 3)))
    counts = np.bincount(labels, minlength=len(first)).astype(float)
    centroids = np.stack(
        [
            np.bincount(
                labels, weights=cloud.points[:, axis], minlength=len(first)
            )
            for axis in range(3)
        ],
        axis=1,
    )
    return PointCloud(centroids / counts[:, None])


def estimate_normals(cloud, k=DEFAULT_NORMAL_NEIGHBORS, viewpoint=None):
    """Plane-fit normals over the ``k`` nearest neighbours of each point.

    Each normal is the smallest-eigenvalue eigenvector of the neighbourhood
    covariance, flipped to face ``viewpoint``. Points whose neighbourhood is
    collinear have no defined normal and are left out of the result.

    :type cloud: :class:`PointCloud`
    :param cloud: Cloud with at least ``k`` points.

    :type k: int
    :param k: Neighbourhood size, at least 3.

    :type viewpoint: :class:`numpy.ndarray`
    :param viewpoint: (Optional) point the normals face. Defaults to the
                      origin.

    :rtype: :class:`PointCloud`
    :returns: The points with a defined normal, each carrying it.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(cloud) < k:
        raise InsufficientPointsError()
    if viewpoint is None:
        viewpoint = np.zeros(3)
    viewpoint = np.asarray(viewpoint, dtype=float)
    points = cloud.points
    _, neighbors = cKDTree(points).query(points, k=k)
    patches = points[neighbors]
    patches = patches - patches.mean(axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", patches, patches) / k
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0]

    scale = np.maximum(eigenvalues[:, 2], np.finfo(float).tiny)
    planar = eigenvalues[:, 1] > 1e-10 * scale
    if not np.all(planar):
        _logger.warning(
            "%d point(s) with collinear neighbourhoods have no normal",
            np.count_nonzero(~planar),
        )
    flip = np.einsum("ni,ni->n", normals, viewpoint - points) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points[planar], normals[planar])


def visible_subset(cloud, camera_center):
    """Indices of points whose normal faces away from the sightline.

    A point is visible when its normal makes an angle of more than 90
    degrees with the ray from ``camera_center`` to the point.

    :rtype: :class:`numpy.ndarray`
    :returns: Sorted integer indices into ``cloud``.
    """
    if not cloud.has_normals:
        raise ValueError("visibility needs a cloud with normals")
    sightlines = cloud.points - np.asarray(camera_center, dtype=float)
    facing = np.einsum("ni,ni->n", cloud.normals, sightlines)
    return np.flatnonzero(facing < 0)


def apply_rigid(cloud, transform):
    normals = None
    if cloud.has_normals:
        normals = transform.apply_vectors(cloud.normals)
    return PointCloud(transform.apply(cloud.points), normals)


def fit_rigid(source, target):
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    Closed-form SVD solution with the reflection case resolved so the result
    is always a proper rotation.
    """
    source = as_points(source)
    target = as_points(target)
    if len(source) != len(target):
        raise DimensionMismatchError("source and target differ in length")
    if len(source) == 0:
        raise EmptyInputError()
    source_mean = source.mean(axis=0)
    target_mean = target.mean(axis=0)
    covariance = (source - source_mean).T @ (target - target_mean)
    u, _, vt = np.linalg.svd(covariance)
    correction = np.diag([1.0, 1.0, np.sign(np.linalg.det(vt.T @ u.T)) or 1.0])
    rotation = vt.T @ correction @ u.T
    return RigidTransform(rotation, target_mean - rotation @ source_mean)
