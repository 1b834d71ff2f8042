# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Analytical ARAP deformation Jacobian.

The ARAP gradient is linearized around the current shape ``s^c`` with the
rotations frozen at the tracker's last optimum ``R^o``. Node rotations are
expanded to first order as ``R_i = (I + [h_i]x) R^o_i`` with ``h_i`` a
linear least-squares fit over the node's stencil, which turns the gradient
into ``H s - c``. Partitioning the nodes into gripped, servoed and free sets
and requiring the free and servoed rows to stay at equilibrium gives the
gripped-to-servoed map ``J_sg``.
"""

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.linalg import LinAlgWarning
from scipy.linalg.lapack import dgecon
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from lattice_servo.arap import LocalGlobalSolver, rhs_b
from lattice_servo.exceptions import (
    DegenerateGeometryError,
    DimensionMismatchError,
    RankDeficientError,
)
from lattice_servo.geometry import skew

_logger = logging.getLogger(__name__)

MAX_STENCIL_CONDITION = 1e12
DENSE_UNKNOWNS = 600
_ONES = np.ones(3)


def coordinates(nodes):
    """Flattened coordinate indices ``3i, 3i+1, 3i+2`` of ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    return (3 * nodes[:, None] + np.arange(3)).ravel()


@dataclass(frozen=True, eq=False)
class RotationFit:
    """Per-node linear rotation fit ``h_i = M_i w_i``.

    ``w_i`` stacks the current coordinates of ``stencils[i]``, which is the
    node itself followed by its sorted neighbours.
    """

    stencils: tuple
    fit_matrices: tuple
    conditions: np.ndarray
    centering: bool

    @property
    def sizes(self):
        return np.array([len(s) for s in self.stencils])

    def h(self, shape):
        """Linearized rotation vectors ``h_i`` for ``shape``, ``(n_l, 3)``."""
        shape = np.asarray(shape, dtype=float)
        return np.array(
            [
                matrix @ shape[stencil].ravel()
                for stencil, matrix in zip(self.stencils, self.fit_matrices)
            ]
        )


def stencil_matrix(points):
    """``(3d, 3)`` stack of ``[[0, z, -y], [-z, 0, x], [y, -x, 0]]``."""
    return np.concatenate([-skew(p) for p in points], axis=0)


def rotation_fit(sys, current, centering=False):
    """Fit ``M_i = (A_i^T A_i)^-1 A_i^T`` for every node stencil.

    :type sys: :class:`~lattice_servo.arap.ArapSystem`
    :param sys: The deformable system.

    :type current: :class:`numpy.ndarray`
    :param current: Current shape ``s^c``.

    :type centering: bool
    :param centering: Build ``A_i`` from stencil coordinates relative to the
                      stencil centroid instead of absolute coordinates.

    :rtype: :class:`RotationFit`
    :raises: :class:`~lattice_servo.exceptions.DegenerateGeometryError` with
             message ``"degenerate stencil"`` when ``A_i^T A_i`` is
             ill-conditioned.
    """
    current = np.asarray(current, dtype=float)
    stencils, matrices = [], []
    conditions = np.empty(sys.n_nodes)
    for node, neighbors in enumerate(sys.neighbor_sets):
        stencil = np.concatenate([[node], neighbors]).astype(np.int64)
        points = current[stencil]
        if centering:
            points = points - points.mean(axis=0)
        a = stencil_matrix(points)
        normal = a.T @ a
        conditions[node] = np.linalg.cond(normal)
        if not conditions[node] < MAX_STENCIL_CONDITION:
            raise DegenerateGeometryError(
                "degenerate stencil at node {}".format(node)
            )
        stencils.append(stencil)
        matrices.append(np.linalg.solve(normal, a.T))
    return RotationFit(tuple(stencils), tuple(matrices), conditions, centering)


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """``H = (L kron I3) - Q`` and ``c`` so the gradient is ``H s - c``."""

    lp: sparse.csr_matrix
    q: sparse.csr_matrix
    c: np.ndarray
    h: sparse.csr_matrix

    @property
    def n_nodes(self):
        return self.lp.shape[0] // 3

    def gradient(self, shape):
        return self.h @ np.asarray(shape, dtype=float).ravel() - self.c


def assemble_Q_c(sys, rot_o, fit):
    """Assemble ``Q``, ``c`` and ``H`` around the frozen rotations ``R^o``.

    Along edge ``(i, j)`` the rotation of node ``k`` acts on
    ``u_k = R^o_k (s^u_i - s^u_j)``; its first-order change contributes the
    scalar ``(w_ij/2) (u_k x 1) . h_k`` to every coordinate row of node
    ``i``. Each node's three rows of ``Q`` are therefore the same row.

    :rtype: :class:`LinearizedSystem`
    """
    n = sys.n_nodes
    if len(rot_o) != n:
        raise DimensionMismatchError("rotation field does not match system")
    i, j = sys.edges.T
    scaled = 0.5 * sys.edge_weights[:, None] * sys.rest_edges
    half_lsu = 0.5 * (sys.laplacian @ sys.rest_nodes)

    # Directed edge (row, owner): the rotation of ``owner`` acting on the
    # shared edge as seen from ``row``. Sorted by owner, then row, so each
    # owner's run lines up with its sorted neighbour list.
    rows_dir = np.concatenate([i, j])
    owners = np.concatenate([j, i])
    vectors = np.concatenate(
        [
            np.einsum("eab,eb->ea", rot_o[j], scaled),
            -np.einsum("eab,eb->ea", rot_o[i], scaled),
        ]
    )
    order = np.lexsort((rows_dir, owners))
    crossed = np.cross(vectors[order], _ONES)
    starts = np.searchsorted(owners[order], np.arange(n))

    rows, cols, values = [], [], []
    for node, (stencil, matrix) in enumerate(
        zip(fit.stencils, fit.fit_matrices)
    ):
        degree = len(stencil) - 1
        row_weights = np.empty((len(stencil), 3))
        # The node's own rotation acts on all of its edges at once.
        row_weights[0] = np.cross(rot_o[node] @ half_lsu[node], _ONES)
        row_weights[1:] = crossed[starts[node] : starts[node] + degree]
        block = row_weights @ matrix
        rows.append(np.repeat(stencil, block.shape[1]))
        cols.append(np.tile(coordinates(stencil), len(stencil)))
        values.append(block.ravel())

    q_nodes = sparse.csr_matrix(
        (
            np.concatenate(values),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(n, 3 * n),
    )
    q = q_nodes[np.repeat(np.arange(n), 3)]
    lp = sparse.kron(sys.laplacian, sparse.identity(3), format="csr")
    c = rhs_b(sys, rot_o).ravel()
    return LinearizedSystem(lp=lp, q=q, c=c, h=(lp - q).tocsr())


@dataclass(frozen=True, eq=False)
class NodePartition:
    """Disjoint gripped, servoed and free node sets covering the lattice."""

    gripped: np.ndarray
    servoed: np.ndarray
    free: np.ndarray

    def __post_init__(self):
        for name in ("gripped", "servoed", "free"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.int64)
            )
        if len(self.gripped) < 1 or len(self.servoed) < 1:
            raise ValueError("partition needs gripped and servoed nodes")
        every = np.concatenate([self.gripped, self.servoed, self.free])
        if len(np.unique(every)) != len(every):
            raise ValueError("partition sets overlap")
        if not np.array_equal(np.sort(every), np.arange(len(every))):
            raise ValueError("partition does not cover every node")

    @classmethod
    def full(cls, gripped, n_nodes):
        """Every node that is not gripped is servoed."""
        gripped = np.asarray(gripped, dtype=np.int64)
        servoed = np.setdiff1d(np.arange(n_nodes), gripped)
        return cls(gripped, servoed, np.zeros(0, dtype=np.int64))

    @classmethod
    def partial(cls, gripped, servoed, n_nodes):
        gripped = np.asarray(gripped, dtype=np.int64)
        servoed = np.setdiff1d(servoed, gripped)
        free = np.setdiff1d(
            np.arange(n_nodes), np.concatenate([gripped, servoed])
        )
        return cls(gripped, servoed, free)

    @property
    def n_nodes(self):
        return len(self.gripped) + len(self.servoed) + len(self.free)


@dataclass(frozen=True, eq=False)
class DeformationJacobian:
    j_sg: np.ndarray
    j_sp: Optional[np.ndarray] = None
    cond_ff: float = float("nan")
    cond_schur: float = float("nan")


def _dense_factor(matrix, block):
    """LU factors of ``matrix`` and its 1-norm condition number."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        factors = scipy.linalg.lu_factor(matrix, check_finite=False)
    anorm = np.linalg.norm(matrix, 1)
    rcond, _ = dgecon(factors[0], anorm)
    if not np.isfinite(rcond) or rcond <= np.finfo(float).eps:
        raise RankDeficientError(block)
    return factors, 1.0 / rcond


def _sparse_factor(matrix, block):
    try:
        factor = splu(sparse.csc_matrix(matrix))
    except RuntimeError:
        raise RankDeficientError(block)
    inverse = LinearOperator(
        matrix.shape,
        matvec=factor.solve,
        rmatvec=lambda x: factor.solve(x, trans="T"),
        dtype=float,
    )
    return factor, onenormest(matrix) * onenormest(inverse)


def solve_Jsg(lin, part, dense_unknowns=DENSE_UNKNOWNS):
    """Gripped-to-servoed Jacobian from the Schur complement of ``H``.

    ``J_sg = -(H_ss - H_sf H_ff^-1 H_fs)^-1 (H_sg - H_sf H_ff^-1 H_fg)``,
    which is ``-H_ss^-1 H_sg`` when no node is free.

    :type lin: :class:`LinearizedSystem`
    :param lin: Linearized system at the current shape.

    :type part: :class:`NodePartition`
    :param part: Node partition.

    :type dense_unknowns: int
    :param dense_unknowns: ``H_ff`` is factorized densely below this size.

    :rtype: :class:`DeformationJacobian`
    :raises: :class:`~lattice_servo.exceptions.RankDeficientError` naming
             the singular block.
    """
    if part.n_nodes != lin.n_nodes:
        raise DimensionMismatchError("partition does not match system")
    h = lin.h.tocsr()
    s = coordinates(part.servoed)
    g = coordinates(part.gripped)
    f = coordinates(part.free)
    h_s = h[s]
    schur = h_s[:, s].toarray()
    rhs = h_s[:, g].toarray()
    cond_ff = float("nan")
    if len(f):
        h_f = h[f]
        h_ff = h_f[:, f]
        coupling = h_f[:, np.concatenate([s, g])].toarray()
        if len(f) < dense_unknowns:
            factors, cond_ff = _dense_factor(h_ff.toarray(), "H_ff")
            eliminated = scipy.linalg.lu_solve(factors, coupling)
        else:
            factor, cond_ff = _sparse_factor(h_ff, "H_ff")
            eliminated = factor.solve(coupling)
        h_sf = h_s[:, f]
        schur = schur - h_sf @ eliminated[:, : len(s)]
        rhs = rhs - h_sf @ eliminated[:, len(s) :]
    factors, cond_schur = _dense_factor(schur, "schur")
    j_sg = -scipy.linalg.lu_solve(factors, rhs)
    _logger.debug(
        "J_sg %s: cond(H_ff)=%.3g cond(schur)=%.3g",
        j_sg.shape,
        cond_ff,
        cond_schur,
    )
    return DeformationJacobian(j_sg, cond_ff=cond_ff, cond_schur=cond_schur)


@dataclass(frozen=True, eq=False)
class Gripper:
    """A gripper pose and the lattice nodes it holds, in stacking order."""

    pose: object
    nodes: np.ndarray


@dataclass(frozen=True, eq=False)
class GraspModel:
    grippers: List[Gripper]
    matrix: Optional[np.ndarray] = field(default=None)

    @property
    def gripped(self):
        return np.concatenate([g.nodes for g in self.grippers]).astype(
            np.int64
        )

    @property
    def n_grippers(self):
        return len(self.grippers)


def grasp_block(offsets):
    """Stacked ``[I3 | -[r]x]`` rows mapping a twist to node velocities."""
    return np.concatenate(
        [np.hstack([np.eye(3), -skew(r)]) for r in offsets], axis=0
    )


def grasp_matrix(grasp, shape):
    """Refresh per-gripper grasp matrices for node positions in ``shape``.

    Node ``j`` of gripper ``l`` moves with ``v + w x r_lj``, where ``r_lj``
    runs from the gripper to the node. Grippers are assembled block
    diagonally in order.

    :rtype: :class:`GraspModel`
    """
    shape = np.asarray(shape, dtype=float)
    blocks = [
        grasp_block(shape[gripper.nodes] - gripper.pose.translation)
        for gripper in grasp.grippers
    ]
    return GraspModel(grasp.grippers, scipy.linalg.block_diag(*blocks))


def compose_Jsp(jac, grasp):
    """``J_sp = J_sg G_gp``."""
    if grasp.matrix is None:
        raise ValueError("grasp matrix has not been computed")
    if jac.j_sg.shape[1] != grasp.matrix.shape[0]:
        raise DimensionMismatchError(
            "J_sg has {} columns, grasp matrix {} rows".format(
                jac.j_sg.shape[1], grasp.matrix.shape[0]
            )
        )
    return DeformationJacobian(
        jac.j_sg,
        jac.j_sg @ grasp.matrix,
        cond_ff=jac.cond_ff,
        cond_schur=jac.cond_schur,
    )


@dataclass(frozen=True)
class JacobianTiming:
    assembly_ms: float
    solve_ms: float


def analytic_jacobian(
    sys, shape, rot_o, part, centering=False, dense_unknowns=DENSE_UNKNOWNS
):
    """Fit, assemble and solve in one call, timing both phases."""
    start = time.perf_counter()
    fit = rotation_fit(sys, shape, centering=centering)
    lin = assemble_Q_c(sys, rot_o, fit)
    assembled = time.perf_counter()
    jac = solve_Jsg(lin, part, dense_unknowns)
    done = time.perf_counter()
    return jac, JacobianTiming(
        (assembled - start) * 1e3, (done - assembled) * 1e3
    )


def finite_difference_jacobian(
    sys, shape, part, step=1e-4, tol=1e-10, max_iter=500
):
    """Central-difference ``J_sg`` by re-solving the full ARAP problem.

    Each gripped coordinate is moved by ``+step`` and ``-step`` with every
    gripped node held; servoed and free nodes settle under the flip-flop
    solve started from ``shape``.
    """
    shape = np.asarray(shape, dtype=float)
    solver = LocalGlobalSolver(sys, hard_indices=part.gripped)
    base = shape[part.gripped]
    servoed = part.servoed
    columns = []
    for coordinate in range(base.size):
        delta = np.zeros(base.size)
        delta[coordinate] = step
        settled = []
        for sign in (1.0, -1.0):
            moved = base + sign * delta.reshape(-1, 3)
            solution = solver.solve(
                shape, hard_positions=moved, tol=tol, max_iter=max_iter
            )
            settled.append(solution.shape[servoed].ravel())
        columns.append((settled[0] - settled[1]) / (2.0 * step))
    return np.column_stack(columns)


def relative_error(estimate, reference):
    """Relative Frobenius error ``|estimate - reference| / |reference|``."""
    return float(
        np.linalg.norm(estimate - reference) / np.linalg.norm(reference)
    )
