# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Synthetic world: quasi-static ground truth, grippers and a depth camera."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from lattice_servo._opentelemetry_tracing import trace_call
from lattice_servo.arap import (
    LocalGlobalSolver,
    arap_gradient,
    assemble_laplacian,
    optimal_rotations,
)
from lattice_servo.exceptions import (
    DimensionMismatchError,
    ImproperlyConfigured,
    SolverDivergenceError,
)
from lattice_servo.geometry import (
    PointCloud,
    RigidTransform,
    grid_cells,
    visible_subset,
)
from lattice_servo.lattice import (
    Lattice,
    deformed_cloud,
    embed,
    tetrahedralize,
)

_logger = logging.getLogger(__name__)

GROUND_TRUTH_MODELS = ("arap", "spring")
WORLD_TOL = 1e-5
WORLD_MAX_ITER = 200
FINE_FACTOR = 2


@dataclass
class CameraConfig:
    position: Tuple[float, float, float] = (0.0, 0.0, 0.6)
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    noise_sigma: float = 0.001
    decimation_cell: float = 0.004
    seed: Optional[int] = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ImproperlyConfigured("camera.noise_sigma must be >= 0")
        if self.decimation_cell <= 0:
            raise ImproperlyConfigured("camera.decimation_cell must be > 0")
        if np.allclose(self.position, self.target):
            raise ImproperlyConfigured("camera.position equals camera.target")


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world pose with the optical axis (+z) toward ``target``."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(np.asarray(up, dtype=float), forward)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross([1.0, 0.0, 0.0], forward)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross([0.0, 0.0, 1.0], forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidTransform(np.column_stack([right, down, forward]), position)


@dataclass(frozen=True, eq=False)
class DepthCamera:
    """Camera pose, isotropic Gaussian noise and decimation cell."""

    pose: RigidTransform
    noise_sigma: float = 0.001
    decimation_cell: float = 0.004
    seed: int = 0

    @classmethod
    def from_config(cls, cfg, seed):
        return cls(
            look_at(cfg.position, cfg.target, cfg.up),
            cfg.noise_sigma,
            cfg.decimation_cell,
            seed if cfg.seed is None else cfg.seed,
        )

    @property
    def center(self):
        return self.pose.translation


def fine_lattice(lattice, factor=FINE_FACTOR):
    """Same box as ``lattice`` with ``factor`` times the nodes per axis."""
    dims = tuple(factor * d for d in lattice.dims)
    spacing = lattice.extent / (np.array(dims) - 1)
    return Lattice(dims, spacing, lattice.origin_pose)


def spring_rhs(sys, shape):
    """Right-hand side of the mass-spring global step: each edge pulls its
    ends to the rest length along the current edge direction."""
    i, j = sys.edges.T
    current = shape[i] - shape[j]
    rest = sys.rest_edges
    length = np.linalg.norm(current, axis=1, keepdims=True)
    rest_length = np.linalg.norm(rest, axis=1, keepdims=True)
    safe = np.where(length > 0, length, 1.0)
    direction = np.where(length > 0, current / safe, rest / rest_length)
    contribution = sys.edge_weights[:, None] * rest_length * direction
    b = np.zeros((sys.n_nodes, 3))
    np.add.at(b, i, contribution)
    np.add.at(b, j, -contribution)
    return b


class GroundTruthObject:
    """Elastic object simulated on a fine lattice.

    :type surface: :class:`~lattice_servo.geometry.PointCloud`
    :param surface: Dense surface cloud with outward normals.

    :type lattice: :class:`~lattice_servo.lattice.Lattice`
    :param lattice: Fine lattice enclosing ``surface``.

    :type model: str
    :param model: ``"arap"`` or ``"spring"``.
    """

    def __init__(self, surface, lattice, model="arap"):
        if model not in GROUND_TRUTH_MODELS:
            raise ImproperlyConfigured(
                "ground_truth must be one of {}".format(GROUND_TRUTH_MODELS)
            )
        if not surface.has_normals:
            raise ImproperlyConfigured("ground-truth surface needs normals")
        self.model = model
        self.lattice = lattice
        self.mesh = tetrahedralize(lattice)
        self.system = assemble_laplacian(self.mesh)
        self.embedding = embed(surface, lattice, self.mesh)
        self.rest_normals = surface.normals
        self.shape = self.mesh.rest_nodes.copy()
        self.attachments = []
        self._solver = None

    @classmethod
    def from_template(cls, surface, coarse, model="arap", factor=FINE_FACTOR):
        return cls(surface, fine_lattice(coarse, factor), model)

    @property
    def attached_nodes(self):
        if not self.attachments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([nodes for _, nodes, _ in self.attachments])

    def nodes_near(self, coarse, coarse_nodes):
        """Fine nodes inside the lattice-frame box of ``coarse_nodes``, grown
        by half a fine spacing."""
        grow = self.lattice.spacing / 2.0 + 1e-9
        local = coarse.origin_pose.inverse().apply(coarse_nodes)
        lower = local.min(axis=0) - grow
        upper = local.max(axis=0) + grow
        fine = self.lattice.origin_pose.inverse().apply(self.shape)
        inside = np.all((fine >= lower) & (fine <= upper), axis=1)
        return np.flatnonzero(inside)

    def attach(self, gripper, pose, nodes):
        """Hold ``nodes`` rigidly in the frame of gripper ``gripper``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        taken = np.intersect1d(nodes, self.attached_nodes)
        if len(taken):
            _logger.warning(
                "gripper %d: %d fine nodes already held", gripper, len(taken)
            )
            nodes = np.setdiff1d(nodes, taken)
        if len(nodes) == 0:
            raise ImproperlyConfigured(
                "gripper {} holds no ground-truth node".format(gripper)
            )
        offsets = pose.inverse().apply(self.shape[nodes])
        self.attachments.append((gripper, nodes, offsets))
        self._solver = None

    def hard_positions(self, poses):
        if not self.attachments:
            return np.zeros((0, 3))
        return np.concatenate(
            [poses[g].apply(offsets) for g, _, offsets in self.attachments]
        )

    def _local_step(self):
        if self.model == "spring":
            return lambda shape: (spring_rhs(self.system, shape), None)
        return None

    def settle(self, poses, tol=WORLD_TOL, max_iter=WORLD_MAX_ITER):
        """Re-solve the quasi-static shape for gripper ``poses``.

        :raises: :class:`~lattice_servo.exceptions.SolverDivergenceError`
                 when the iterate blows up; the shape is left unchanged.
        """
        if self._solver is None:
            self._solver = LocalGlobalSolver(
                self.system, hard_indices=self.attached_nodes
            )
        solution = self._solver.solve(
            self.shape,
            hard_positions=self.hard_positions(poses),
            tol=tol,
            max_iter=max_iter,
            local_step=self._local_step(),
        )
        if not solution.converged:
            _logger.warning(
                "ground truth did not settle in %d iterations", max_iter
            )
        self.shape = solution.shape
        return solution

    def surface(self):
        """Current surface cloud with transported normals."""
        return deformed_cloud(
            self.embedding, self.mesh, self.shape, self.rest_normals
        )

    def gradient(self, shape=None):
        shape = self.shape if shape is None else shape
        if self.model == "spring":
            return self.system.laplacian @ shape - spring_rhs(
                self.system, shape
            )
        return arap_gradient(
            self.system, shape, optimal_rotations(self.system, shape)
        )

    def quasi_static_residual(self, shape=None):
        """Energy gradient norm over the free nodes, made dimensionless by
        the largest node degree and the mean rest edge length."""
        gradient = self.gradient(shape)
        free = np.ones(self.system.n_nodes, dtype=bool)
        free[self.attached_nodes] = False
        degree = self.system.laplacian.diagonal().max()
        edge = np.linalg.norm(self.system.rest_edges, axis=1).mean()
        return float(np.linalg.norm(gradient[free]) / (degree * edge))


@dataclass(eq=False)
class World:
    """Ground truth plus gripper poses, advanced by :func:`step_world`."""

    object: GroundTruthObject
    gripper_poses: List[RigidTransform]
    tol: float = WORLD_TOL
    max_iter: int = WORLD_MAX_ITER
    step: int = 0
    frozen: bool = False

    @property
    def n_grippers(self):
        return len(self.gripper_poses)

    def snapshot(self):
        return (self.object.shape.copy(), list(self.gripper_poses), self.step)

    def restore(self, snapshot):
        shape, poses, step = snapshot
        self.object.shape = shape.copy()
        self.gripper_poses = list(poses)
        self.step = step
        self.frozen = False


def integrate_twist(pose, twist, dt):
    """Move ``pose`` by a world-frame twist ``(v, w)`` held for ``dt``."""
    twist = np.asarray(twist, dtype=float)
    delta = Rotation.from_rotvec(twist[3:] * dt)
    rotation = (delta * Rotation.from_matrix(pose.rotation)).as_matrix()
    return RigidTransform(rotation, pose.translation + twist[:3] * dt)


def step_world(world, commands, dt):
    """Integrate the commanded twists and let the object settle.

    :type commands: :class:`~lattice_servo.control.ServoCommand`
    :param commands: One twist per gripper.

    :rtype: :class:`World`
    :raises: :class:`~lattice_servo.exceptions.SolverDivergenceError` when
             the ground truth blows up; the world is frozen afterwards.
    """
    if world.frozen:
        raise SolverDivergenceError("world is frozen")
    twists = np.asarray(commands.twists, dtype=float)
    if twists.shape != (world.n_grippers, 6):
        raise DimensionMismatchError(
            "expected {} twists, got {}".format(world.n_grippers, len(twists))
        )
    if not np.all(np.isfinite(twists)):
        raise ValueError("commanded twists must be finite")
    poses = [
        integrate_twist(pose, twist, dt)
        for pose, twist in zip(world.gripper_poses, twists)
    ]
    with trace_call("world.step", {"step": world.step + 1}):
        try:
            world.object.settle(poses, world.tol, world.max_iter)
        except SolverDivergenceError:
            world.frozen = True
            _logger.error("ground truth diverged at step %d", world.step + 1)
            raise
    world.gripper_poses = poses
    world.step += 1
    return world


def render_cloud(world, camera, step=None):
    """Visible, decimated and noisy view of the ground-truth surface.

    One surface point per decimation cell is kept, so a noiseless render
    lies exactly on the surface. Noise is drawn from a generator seeded with
    ``(camera.seed, step)``.

    :rtype: :class:`~lattice_servo.geometry.PointCloud`
    """
    step = world.step if step is None else step
    surface = world.object.surface()
    visible = surface.points[visible_subset(surface, camera.center)]
    _, first = grid_cells(visible, camera.decimation_cell)
    points = visible[first]
    if camera.noise_sigma > 0 and len(points):
        rng = np.random.default_rng([camera.seed, step])
        points = points + rng.normal(0.0, camera.noise_sigma, points.shape)
    return PointCloud(points)
