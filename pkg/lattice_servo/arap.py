# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""As-rigid-as-possible energy and its constrained local/global solve.

Edges are stored once, as ``(i, j)`` with ``i < j``; every per-node sum
over ``N_i`` is accumulated from both ends of each edge.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial.transform import Rotation

from lattice_servo.exceptions import (
    DimensionMismatchError,
    SolverDivergenceError,
    UnderConstrainedError,
)
from lattice_servo.geometry import fit_rigid

_logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 20


@dataclass(frozen=True, eq=False)
class ArapSystem:
    """Laplacian and rest geometry of a tet mesh edge graph."""

    laplacian: sparse.csr_matrix
    edges: np.ndarray
    edge_weights: np.ndarray
    neighbor_sets: tuple
    rest_nodes: np.ndarray

    @property
    def n_nodes(self):
        return len(self.rest_nodes)

    @property
    def rest_edges(self):
        """``s^u_i - s^u_j`` per edge."""
        return (
            self.rest_nodes[self.edges[:, 0]]
            - self.rest_nodes[self.edges[:, 1]]
        )


@dataclass(eq=False)
class ConstraintSet:
    """Soft barycentric targets, node weights and hard node positions.

    :type soft_matrix: :class:`scipy.sparse.csr_matrix`
    :param soft_matrix: ``B`` with one barycentric row per target.

    :type targets: :class:`numpy.ndarray`
    :param targets: ``t``, one target point per row of ``B``.

    :type gamma: :class:`numpy.ndarray`
    :param gamma: Positive per-node weight on the ARAP term.

    :type hard_indices: :class:`numpy.ndarray`
    :param hard_indices: Distinct node indices with prescribed positions.

    :type hard_positions: :class:`numpy.ndarray`
    :param hard_positions: Prescribed positions, one row per hard index.
    """

    soft_matrix: Optional[sparse.csr_matrix] = None
    targets: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    hard_indices: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=np.int64)
    )
    hard_positions: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3))
    )

    def __post_init__(self):
        self.hard_indices = np.asarray(self.hard_indices, dtype=np.int64)
        self.hard_positions = np.asarray(
            self.hard_positions, dtype=float
        ).reshape(-1, 3)
        if len(self.hard_indices) != len(self.hard_positions):
            raise DimensionMismatchError(
                "hard indices and positions differ in length"
            )
        if len(np.unique(self.hard_indices)) != len(self.hard_indices):
            raise ValueError("hard-constrained indices must be distinct")
        if self.soft_matrix is not None:
            self.soft_matrix = sparse.csr_matrix(self.soft_matrix)
            self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
            if self.soft_matrix.shape[0] != len(self.targets):
                raise DimensionMismatchError("B and t differ in rows")
            row_sums = np.asarray(self.soft_matrix.sum(axis=1)).ravel()
            if np.any(np.abs(row_sums - 1.0) > 1e-9):
                raise ValueError("soft constraint rows must sum to 1")
        if self.gamma is not None:
            self.gamma = np.asarray(self.gamma, dtype=float)
            if np.any(self.gamma <= 0):
                raise ValueError("gamma entries must be positive")

    @property
    def n_soft(self):
        return 0 if self.soft_matrix is None else self.soft_matrix.shape[0]


@dataclass
class ArapSolution:
    shape: np.ndarray
    rotations: np.ndarray
    iterations: int
    converged: bool
    objectives: List[float]


def assemble_laplacian(mesh, n_l=None):
    """Weighted graph Laplacian ``L = D^T W D`` of the mesh edge graph."""
    n_l = mesh.n_nodes if n_l is None else n_l
    return ArapSystem(
        laplacian=weighted_laplacian(mesh.edges, mesh.edge_weights, n_l),
        edges=mesh.edges,
        edge_weights=mesh.edge_weights,
        neighbor_sets=mesh.neighbor_sets,
        rest_nodes=mesh.rest_nodes[:n_l],
    )


def weighted_laplacian(edges, weights, n_nodes):
    count = len(edges)
    incidence = sparse.csr_matrix(
        (
            np.concatenate([np.ones(count), -np.ones(count)]),
            (np.tile(np.arange(count), 2), edges.T.ravel()),
        ),
        shape=(count, n_nodes),
    )
    return (incidence.T @ sparse.diags(weights) @ incidence).tocsr()


def _edge_weights(sys, gamma):
    if gamma is None:
        return sys.edge_weights
    i, j = sys.edges.T
    return sys.edge_weights * (gamma[i] + gamma[j]) / 2.0


def optimal_rotations(sys, current):
    """Per-node rotation best mapping rest edges onto current edges.

    SVD of the weighted edge covariance; when the product would be a
    reflection the column of the smallest singular value is negated. Nodes
    with a vanishing covariance get the identity.

    :rtype: :class:`numpy.ndarray`
    :returns: ``(n_l, 3, 3)`` rotation field.
    """
    current = np.asarray(current, dtype=float)
    i, j = sys.edges.T
    rest = sys.rest_edges * sys.edge_weights[:, None]
    deformed = current[i] - current[j]
    outer = np.einsum("ea,eb->eab", rest, deformed)
    covariance = np.zeros((sys.n_nodes, 3, 3))
    np.add.at(covariance, i, outer)
    np.add.at(covariance, j, outer)

    u, _, vt = np.linalg.svd(covariance)
    v = np.transpose(vt, (0, 2, 1))
    rotations = v @ np.transpose(u, (0, 2, 1))
    reflected = np.linalg.det(rotations) < 0
    if np.any(reflected):
        u_fixed = u[reflected].copy()
        u_fixed[:, :, 2] *= -1.0
        rotations[reflected] = v[reflected] @ np.transpose(u_fixed, (0, 2, 1))
    empty = np.abs(covariance).reshape(len(covariance), -1).max(axis=1) == 0
    rotations[empty] = np.eye(3)
    return rotations


def rhs_b(sys, rot, gamma=None):
    """``b_i = sum_j (w_ij/2) (g_i R_i + g_j R_j)(s^u_i - s^u_j)``.

    ``gamma`` defaults to all ones, giving the plain ARAP right-hand side.
    """
    i, j = sys.edges.T
    rest = sys.rest_edges
    left = rot[i] if gamma is None else rot[i] * gamma[i, None, None]
    right = rot[j] if gamma is None else rot[j] * gamma[j, None, None]
    contribution = np.einsum("eab,eb->ea", left + right, rest)
    contribution *= sys.edge_weights[:, None] / 2.0
    b = np.zeros((sys.n_nodes, 3))
    np.add.at(b, i, contribution)
    np.add.at(b, j, -contribution)
    return b


def arap_energy(sys, shape, rot, gamma=None):
    """``sum_i sum_{j in N_i} (w_ij/2) |(s_i - s_j) - R_i (s^u_i - s^u_j)|^2``.

    With ``gamma`` each node's terms are scaled by its weight.
    """
    shape = np.asarray(shape, dtype=float)
    i, j = sys.edges.T
    rest = sys.rest_edges
    deformed = shape[i] - shape[j]
    from_i = deformed - np.einsum("eab,eb->ea", rot[i], rest)
    from_j = deformed - np.einsum("eab,eb->ea", rot[j], rest)
    energy_i = np.einsum("ea,ea->e", from_i, from_i)
    energy_j = np.einsum("ea,ea->e", from_j, from_j)
    if gamma is not None:
        energy_i = energy_i * gamma[i]
        energy_j = energy_j * gamma[j]
    return float(np.sum(sys.edge_weights / 2.0 * (energy_i + energy_j)))


def arap_gradient(sys, shape, rot):
    """``L s - b(R)``, half the gradient of :func:`arap_energy`."""
    return sys.laplacian @ np.asarray(shape, dtype=float) - rhs_b(sys, rot)


def rigid_clusters(sys, hard_indices):
    """Connected groups of hard nodes that pin down a rotation.

    Groups with fewer than three nodes or with collinear rest positions are
    left out.
    """
    hard_indices = np.asarray(hard_indices, dtype=np.int64)
    if len(hard_indices) < 3:
        return []
    is_hard = np.zeros(sys.n_nodes, dtype=bool)
    is_hard[hard_indices] = True
    i, j = sys.edges.T
    inner = is_hard[i] & is_hard[j]
    graph = sparse.coo_matrix(
        (np.ones(np.count_nonzero(inner)), (i[inner], j[inner])),
        shape=(sys.n_nodes, sys.n_nodes),
    )
    _, labels = connected_components(graph, directed=False)
    clusters = []
    for label in np.unique(labels[hard_indices]):
        members = hard_indices[labels[hard_indices] == label]
        if len(members) < 3:
            continue
        rest = sys.rest_nodes[members]
        spread = np.linalg.svd(rest - rest.mean(axis=0), compute_uv=False)
        if spread[1] <= 1e-9 * spread[0]:
            continue
        clusters.append(members)
    return clusters


class RotationSeed:
    """Rotation field interpolated harmonically between rigid hard groups.

    Each cluster from :func:`rigid_clusters` gets the rotation of its best
    rigid fit; every other node gets the normalized harmonic blend of the
    cluster quaternions. Used to start a solve whose hard nodes have turned.
    """

    def __init__(self, sys, hard_indices):
        self.sys = sys
        self.clusters = rigid_clusters(sys, hard_indices)
        self._factor = None
        if not self.clusters:
            return
        boundary = np.concatenate(self.clusters)
        free = np.ones(sys.n_nodes, dtype=bool)
        free[boundary] = False
        self.boundary = boundary
        self.interior = np.flatnonzero(free)
        laplacian = sparse.csc_matrix(sys.laplacian)
        self._coupling = laplacian[self.interior][:, boundary]
        if len(self.interior):
            try:
                self._factor = splu(
                    laplacian[self.interior][:, self.interior].tocsc()
                )
            except RuntimeError:
                _logger.debug("no rotation seed: interior is not anchored")
                self.clusters = []

    @property
    def available(self):
        return bool(self.clusters)

    def rotations(self, positions):
        """Seed rotations for node ``positions``; ``None`` if degenerate.

        :type positions: :class:`numpy.ndarray`
        :param positions: ``(n_l, 3)`` array whose hard rows are current.
        """
        if not self.available:
            return None
        values = []
        for members in self.clusters:
            fit = fit_rigid(self.sys.rest_nodes[members], positions[members])
            quat = Rotation.from_matrix(fit.rotation).as_quat()
            values.append(np.tile(quat, (len(members), 1)))
        values = np.concatenate(values)
        signs = np.where(values @ values[0] < 0, -1.0, 1.0)
        values = values * signs[:, None]
        blended = np.empty((self.sys.n_nodes, 4))
        blended[self.boundary] = values
        if len(self.interior):
            blended[self.interior] = self._factor.solve(
                -(self._coupling @ values)
            )
        norms = np.linalg.norm(blended, axis=1)
        if not np.all(np.isfinite(blended)) or np.any(norms < 1e-9):
            return None
        return Rotation.from_quat(blended / norms[:, None]).as_matrix()


class LocalGlobalSolver:
    """Flip-flop solver with the linear system factorized once.

    The factorization depends on ``gamma``, the sparsity of ``B`` and the set
    of hard-constrained nodes, so one instance serves every solve that only
    changes targets, hard positions or the starting shape.

    :type sys: :class:`ArapSystem`
    :param sys: The deformable system.

    :type soft_matrix: :class:`scipy.sparse.csr_matrix`
    :param soft_matrix: (Optional) ``B``.

    :type gamma: :class:`numpy.ndarray`
    :param gamma: (Optional) per-node weights, all ones by default.

    :type hard_indices: :class:`numpy.ndarray`
    :param hard_indices: (Optional) nodes removed from the unknowns.
    """

    def __init__(self, sys, soft_matrix=None, gamma=None, hard_indices=()):
        self.sys = sys
        self.gamma = gamma
        self.soft_matrix = soft_matrix
        self.hard_indices = np.asarray(hard_indices, dtype=np.int64)
        n = sys.n_nodes
        if len(self.hard_indices) == 0 and (
            soft_matrix is None or soft_matrix.shape[0] == 0
        ):
            raise UnderConstrainedError()

        system = weighted_laplacian(sys.edges, _edge_weights(sys, gamma), n)
        if soft_matrix is not None and soft_matrix.shape[0]:
            system = system + (soft_matrix.T @ soft_matrix)
        free = np.ones(n, dtype=bool)
        free[self.hard_indices] = False
        self.free_indices = np.flatnonzero(free)
        system = sparse.csc_matrix(system)
        self._seed = None
        self._coupling = system[self.free_indices][:, self.hard_indices]
        reduced = system[self.free_indices][:, self.free_indices].tocsc()
        try:
            self._factor = splu(reduced)
        except RuntimeError as error:
            _logger.error("reduced ARAP system is singular: %s", error)
            raise UnderConstrainedError()

    def global_step(self, rhs, hard_positions):
        """Positions minimizing the quadratic step for ``rhs``."""
        shape = np.empty((self.sys.n_nodes, 3))
        shape[self.hard_indices] = hard_positions
        reduced = rhs[self.free_indices]
        if len(self.hard_indices):
            reduced = reduced - self._coupling @ hard_positions
        if len(self.free_indices):
            shape[self.free_indices] = self._factor.solve(reduced)
        return shape

    def objective(self, shape, rotations, targets=None):
        value = arap_energy(self.sys, shape, rotations, self.gamma)
        if targets is not None and self.soft_matrix is not None:
            residual = self.soft_matrix @ shape - targets
            value += float(np.sum(residual * residual))
        return value

    def solve(
        self,
        initial,
        hard_positions=None,
        targets=None,
        tol=DEFAULT_TOL,
        max_iter=DEFAULT_MAX_ITER,
        local_step=None,
        objective=None,
        seed_rotations=True,
    ):
        """Alternate rotation fitting and the linear solve.

        Stops when no node moves more than ``tol`` between two iterates or
        after ``max_iter`` iterations. Hard nodes are written, not solved, so
        they land exactly on ``hard_positions``.

        With the ARAP local step and ``seed_rotations`` the first global step
        is also tried with a :class:`RotationSeed` field, and the iterate
        with the lower objective is kept, so the objective still never
        increases.

        :type local_step: callable
        :param local_step: (Optional) ``shape -> (rhs, state)`` replacing the
                           ARAP rotation fit; ``state`` is handed to
                           ``objective``.

        :type seed_rotations: bool
        :param seed_rotations: Try the seeded first step.

        :rtype: :class:`ArapSolution`
        """
        hard_positions = (
            np.zeros((0, 3))
            if hard_positions is None
            else np.asarray(hard_positions, dtype=float).reshape(-1, 3)
        )
        if len(hard_positions) != len(self.hard_indices):
            raise DimensionMismatchError(
                "expected {} hard positions".format(len(self.hard_indices))
            )
        soft_rhs = 0.0
        if targets is not None and self.soft_matrix is not None:
            soft_rhs = self.soft_matrix.T @ targets
        seeded = seed_rotations and local_step is None
        if local_step is None:
            local_step = self._arap_local_step
            objective = objective or (
                lambda shape, rot: self.objective(shape, rot, targets)
            )

        shape = np.array(initial, dtype=float, copy=True)
        shape[self.hard_indices] = hard_positions
        rhs, state = local_step(shape)
        objectives = [objective(shape, state)] if objective else []
        seed_rhs = self._seed_rhs(shape) if seeded else None
        converged = False
        iterations = 0
        for iterations in range(1, max_iter + 1):
            updated = self._iterate(rhs + soft_rhs, hard_positions)
            next_rhs, next_state = local_step(updated)
            if seed_rhs is not None:
                candidate = self._iterate(seed_rhs + soft_rhs, hard_positions)
                cand_rhs, cand_state = local_step(candidate)
                if objective(candidate, cand_state) < objective(
                    updated, next_state
                ):
                    updated, next_rhs, next_state = (
                        candidate,
                        cand_rhs,
                        cand_state,
                    )
                seed_rhs = None
            step = np.max(np.linalg.norm(updated - shape, axis=1), initial=0)
            shape, rhs, state = updated, next_rhs, next_state
            if objective:
                objectives.append(objective(shape, state))
            if step < tol:
                converged = True
                break
        if not converged:
            _logger.debug(
                "flip-flop stopped after %d iterations without converging",
                iterations,
            )
        return ArapSolution(shape, state, iterations, converged, objectives)

    def _iterate(self, rhs, hard_positions):
        updated = self.global_step(rhs, hard_positions)
        if not np.all(np.isfinite(updated)):
            raise SolverDivergenceError("local/global iterate is not finite")
        return updated

    def _seed_rhs(self, shape):
        if len(self.hard_indices) < 3:
            return None
        if self._seed is None:
            self._seed = RotationSeed(self.sys, self.hard_indices)
        rotations = self._seed.rotations(shape)
        if rotations is None:
            return None
        return rhs_b(self.sys, rotations, self.gamma)

    def _arap_local_step(self, shape):
        rotations = optimal_rotations(self.sys, shape)
        return rhs_b(self.sys, rotations, self.gamma), rotations


def solve_constrained(
    sys, constraints, initial, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER
):
    """Constrained flip-flop solve of the Gamma-weighted ARAP problem.

    Solves ``(Gamma L + B^T B) s = Gamma b + B^T t`` per iteration with the
    hard-constrained rows and columns removed and their contribution moved to
    the right-hand side.

    :type sys: :class:`ArapSystem`
    :param sys: The deformable system.

    :type constraints: :class:`ConstraintSet`
    :param constraints: Soft, weighting and hard constraints.

    :type initial: :class:`numpy.ndarray`
    :param initial: Starting shape.

    :rtype: :class:`ArapSolution`
    :raises: :class:`~lattice_servo.exceptions.UnderConstrainedError` when
             the reduced system is singular.
    """
    solver = LocalGlobalSolver(
        sys,
        soft_matrix=constraints.soft_matrix,
        gamma=constraints.gamma,
        hard_indices=constraints.hard_indices,
    )
    return solver.solve(
        initial,
        hard_positions=constraints.hard_positions,
        targets=constraints.targets,
        tol=tol,
        max_iter=max_iter,
    )
