# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Per-frame lattice tracking: filter, register, correspond, deform."""

import glob
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from lattice_servo import io as lattice_io
from lattice_servo._opentelemetry_tracing import trace_call
from lattice_servo.arap import (
    ConstraintSet,
    assemble_laplacian,
    solve_constrained,
)
from lattice_servo.exceptions import EmptyInputError, ImproperlyConfigured
from lattice_servo.geometry import (
    PointCloud,
    RigidTransform,
    apply_rigid,
    bounding_box,
    estimate_normals,
    fit_rigid,
    grid_subsample,
    visible_subset,
)
from lattice_servo.lattice import (
    build_lattice,
    deformed_cloud,
    embed,
    export_lattice,
    nearest_nodes,
    tetrahedralize,
)

_logger = logging.getLogger(__name__)

NO_DATA = "no data"
ICP_DIVERGED = "icp diverged"
NO_CORRESPONDENCES = "no correspondences"

REPORT_COLUMNS = [
    "frame",
    "n_a",
    "icp_residual_m",
    "rmse_m",
    "ms_filter",
    "ms_icp",
    "ms_corr",
    "ms_deform",
]


@dataclass
class TrackerConfig:
    box_margin: float = 0.01
    grid_cell: float = 0.005
    correspondence_threshold: float = 0.02
    icp_max_iter: int = 30
    icp_tol: float = 1e-6
    icp_divergence_steps: int = 3
    # Residual growth below this fraction of grid_cell is noise.
    icp_growth_fraction: float = 0.1
    flip_flop_tol: float = 1e-4
    flip_flop_max_iter: int = 20
    gamma_constrained: float = 0.1
    gamma_free: float = 1.0
    normal_neighbors: int = 10
    known_node_count: int = 8
    # Translation (m) and rotation (deg) applied to the initial estimate.
    initial_misalignment: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        positive = (
            "box_margin",
            "grid_cell",
            "correspondence_threshold",
            "icp_max_iter",
            "icp_tol",
            "icp_divergence_steps",
            "icp_growth_fraction",
            "flip_flop_tol",
            "flip_flop_max_iter",
            "gamma_constrained",
            "gamma_free",
            "normal_neighbors",
            "known_node_count",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ImproperlyConfigured(
                    "tracker.{} must be positive".format(name)
                )
        self.initial_misalignment = tuple(
            float(v) for v in self.initial_misalignment
        )


@dataclass(frozen=True, eq=False)
class TrackingModel:
    """Everything about the tracked object that never changes."""

    embedding: object
    mesh: object
    system: object
    rest_normals: np.ndarray

    def cloud_for(self, shape):
        return deformed_cloud(
            self.embedding, self.mesh, shape, self.rest_normals
        )


@dataclass
class TrackerState:
    """Tracked object cloud ``p^c``, lattice ``s^c`` and rotations ``R^o``.

    ``known_nodes`` maps a node to ``(anchor id, offset in anchor frame)``.
    """

    object_cloud: PointCloud
    lattice_shape: np.ndarray
    rotations: np.ndarray
    known_nodes: Dict[int, Tuple[int, np.ndarray]] = field(
        default_factory=dict
    )
    frame: int = 0

    def known_groups(self):
        """Known nodes per anchor id, in attach order."""
        groups = {}
        for node, (anchor, _) in self.known_nodes.items():
            groups.setdefault(anchor, []).append(node)
        return {
            anchor: np.array(nodes, dtype=np.int64)
            for anchor, nodes in sorted(groups.items())
        }


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    model_indices: np.ndarray
    model_points: np.ndarray
    target_points: np.ndarray

    def __len__(self):
        return len(self.model_indices)


@dataclass
class Registration:
    transform: RigidTransform
    residual: float
    iterations: int
    flag: Optional[str] = None


@dataclass
class FrameReport:
    frame: int
    n_points: int = 0
    n_a: int = 0
    icp_residual: float = float("nan")
    rmse: float = float("nan")
    iterations: int = 0
    flags: List[str] = field(default_factory=list)
    ms_filter: float = 0.0
    ms_icp: float = 0.0
    ms_corr: float = 0.0
    ms_deform: float = 0.0

    @property
    def ok(self):
        return not self.flags

    @property
    def ms_total(self):
        return self.ms_filter + self.ms_icp + self.ms_corr + self.ms_deform

    def to_row(self, timings=True):
        scale = 1.0 if timings else 0.0
        return {
            "frame": self.frame,
            "n_a": self.n_a,
            "icp_residual_m": self.icp_residual,
            "rmse_m": self.rmse,
            "ms_filter": self.ms_filter * scale,
            "ms_icp": self.ms_icp * scale,
            "ms_corr": self.ms_corr * scale,
            "ms_deform": self.ms_deform * scale,
        }


def _elapsed_ms(start):
    return (time.perf_counter() - start) * 1e3


def outward_normals(template, k):
    """Template with normals, estimated and pointed away from its centroid
    when the template has none."""
    if template.has_normals:
        return template
    centroid = template.points.mean(axis=0)
    inward = estimate_normals(template, k=k, viewpoint=centroid)
    return PointCloud(inward.points, -inward.normals)


def filter_cloud(raw, state, cfg):
    """Crop ``raw`` to the box around the last ``p^c`` and grid it."""
    box = bounding_box(state.object_cloud, cfg.box_margin)
    inside = raw.subset(np.flatnonzero(box.contains(raw.points)))
    return grid_subsample(inside.without_normals(), cfg.grid_cell)


def rigid_register(state, d_f, camera_center, cfg):
    """Point-to-point ICP of the visible part of ``p^c`` onto ``d_f``.

    The residual is the root mean square nearest-neighbour distance. ICP
    stops when it improves by less than ``cfg.icp_tol``, when it grows by
    less than ``cfg.icp_growth_fraction`` of a grid cell, or after
    ``cfg.icp_max_iter`` iterations, and returns the best transform seen.
    Growth above that margin over ``cfg.icp_divergence_steps`` consecutive
    iterations returns the identity with an ``"icp diverged"`` flag.

    :rtype: :class:`Registration`
    """
    if len(d_f) == 0:
        raise EmptyInputError()
    cloud = state.object_cloud
    visible = visible_subset(cloud, camera_center)
    source = cloud.points[visible] if len(visible) else cloud.points
    tree = cKDTree(d_f.points)
    margin = cfg.icp_growth_fraction * cfg.grid_cell
    transform = RigidTransform.identity()
    best = Registration(transform, np.inf, 0)
    previous = np.inf
    growth = 0
    for iteration in range(1, cfg.icp_max_iter + 1):
        moved = transform.apply(source)
        distance, nearest = tree.query(moved)
        residual = float(np.sqrt(np.mean(distance * distance)))
        if residual < best.residual:
            best = Registration(transform, residual, iteration)
        if residual > previous + margin:
            growth += 1
            if growth >= cfg.icp_divergence_steps:
                _logger.warning("ICP diverged after %d iterations", iteration)
                return Registration(
                    RigidTransform.identity(),
                    residual,
                    iteration,
                    ICP_DIVERGED,
                )
        else:
            growth = 0
            if previous - residual < cfg.icp_tol:
                break
        previous = residual
        transform = fit_rigid(moved, d_f.points[nearest]).compose(transform)
    return replace(best, iterations=iteration)


def apply_registration(state, transform):
    """Move ``p^c`` and ``s^c`` rigidly and left-compose ``R^o``."""
    return replace(
        state,
        object_cloud=apply_rigid(state.object_cloud, transform),
        lattice_shape=transform.apply(state.lattice_shape),
        rotations=transform.rotation[None] @ state.rotations,
    )


def find_correspondences(state, d_f, camera_center, cfg):
    """Two-way nearest-neighbour targets for the visible model points.

    For a visible model point ``m``: ``c1`` is the centroid of the data
    points whose nearest model point is ``m``; the target is the mean of
    ``c1`` and the data point nearest to ``m``, or that data point alone when
    no data point picked ``m``. Pairs farther apart than
    ``cfg.correspondence_threshold`` are dropped.

    :rtype: :class:`CorrespondenceSet`
    """
    cloud = state.object_cloud
    visible = visible_subset(cloud, camera_center)
    empty = CorrespondenceSet(
        np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3))
    )
    if len(visible) == 0 or len(d_f) == 0:
        return empty
    model = cloud.points[visible]
    data = d_f.points

    _, picked = cKDTree(model).query(data)
    counts = np.bincount(picked, minlength=len(model))
    sums = np.stack(
        [
            np.bincount(picked, weights=data[:, axis], minlength=len(model))
            for axis in range(3)
        ],
        axis=1,
    )
    _, nearest = cKDTree(data).query(model)
    forward = data[nearest]
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = sums / counts[:, None]
    targets = np.where(counts[:, None] > 0, (c1 + forward) / 2.0, forward)

    keep = (
        np.linalg.norm(targets - model, axis=1)
        <= cfg.correspondence_threshold
    )
    return CorrespondenceSet(visible[keep], model[keep], targets[keep])


def known_positions(state, anchors):
    """Hard node indices and positions for the anchors present in
    ``anchors``."""
    anchors = anchors or {}
    indices, positions = [], []
    for node, (anchor, offset) in state.known_nodes.items():
        pose = anchors.get(anchor)
        if pose is None:
            continue
        indices.append(node)
        positions.append(pose.apply(offset)[0])
    return (
        np.array(indices, dtype=np.int64),
        np.array(positions, dtype=float).reshape(-1, 3),
    )


def deform(state, corr, model, cfg, anchors=None):
    """Pull the lattice toward the correspondence targets.

    Nodes of tets holding a corresponded point get weight
    ``cfg.gamma_constrained`` on the ARAP term, every other node
    ``cfg.gamma_free``. Known nodes are held at their anchored positions.

    :rtype: tuple
    :returns: ``(state, flip-flop iterations)``.
    """
    n = model.system.n_nodes
    gamma = np.full(n, cfg.gamma_free)
    soft_matrix = targets = None
    if len(corr):
        soft_matrix = model.embedding.matrix(corr.model_indices)
        targets = corr.target_points
        touched = np.unique(model.embedding.node_index[corr.model_indices])
        gamma[touched] = cfg.gamma_constrained
    hard_indices, hard_positions = known_positions(state, anchors)
    constraints = ConstraintSet(
        soft_matrix=soft_matrix,
        targets=targets,
        gamma=gamma,
        hard_indices=hard_indices,
        hard_positions=hard_positions,
    )
    solution = solve_constrained(
        model.system,
        constraints,
        state.lattice_shape,
        tol=cfg.flip_flop_tol,
        max_iter=cfg.flip_flop_max_iter,
    )
    updated = replace(
        state,
        object_cloud=model.cloud_for(solution.shape),
        lattice_shape=solution.shape,
        rotations=solution.rotations,
    )
    return updated, solution.iterations


def attach_known_nodes(state, anchor_poses, shape=None, k=8):
    """Rigidly attach the ``k`` nodes nearest to each anchor.

    Offsets are stored in the anchor frame, so afterwards a node's hard
    position is the anchor pose applied to its offset. A node already held
    by an earlier anchor (lower id) stays with it.
    """
    shape = state.lattice_shape if shape is None else np.asarray(shape)
    known = dict(state.known_nodes)
    for anchor in sorted(anchor_poses):
        pose = anchor_poses[anchor]
        nodes = nearest_nodes(shape, pose.translation, k)
        offsets = pose.inverse().apply(shape[nodes])
        for node, offset in zip(nodes, offsets):
            if int(node) in known:
                _logger.warning(
                    "node %d already attached, anchor %d skips it",
                    node,
                    anchor,
                )
                continue
            known[int(node)] = (anchor, offset)
    return replace(state, known_nodes=known)


def fit_rmse(state, d_f):
    """RMS distance from the filtered points to the tracked object."""
    if len(d_f) == 0:
        return float("nan")
    distance, _ = cKDTree(state.object_cloud.points).query(d_f.points)
    return float(np.sqrt(np.mean(distance * distance)))


def track_frame(state, raw, model, cfg, anchors=None, camera_center=None):
    """Run the four tracking steps on one raw cloud.

    A flagged step leaves the state as it was after the previous step and
    skips the rest of the frame.

    :rtype: tuple
    :returns: ``(state, FrameReport)``.
    """
    camera_center = np.zeros(3) if camera_center is None else camera_center
    frame = state.frame + 1
    report = FrameReport(frame=frame)

    start = time.perf_counter()
    with trace_call("tracking.filter", {"frame": frame}):
        d_f = filter_cloud(raw, state, cfg)
    report.ms_filter = _elapsed_ms(start)
    report.n_points = len(d_f)
    if len(d_f) == 0:
        report.flags.append(NO_DATA)
        return replace(state, frame=frame), report

    start = time.perf_counter()
    with trace_call("tracking.icp", {"frame": frame}):
        registration = rigid_register(state, d_f, camera_center, cfg)
    report.icp_residual = registration.residual
    if registration.flag:
        report.ms_icp = _elapsed_ms(start)
        report.flags.append(registration.flag)
        return replace(state, frame=frame), report
    state = apply_registration(state, registration.transform)
    report.ms_icp = _elapsed_ms(start)

    start = time.perf_counter()
    with trace_call("tracking.correspondences", {"frame": frame}):
        corr = find_correspondences(state, d_f, camera_center, cfg)
    report.ms_corr = _elapsed_ms(start)
    report.n_a = len(corr)
    if len(corr) == 0:
        report.flags.append(NO_CORRESPONDENCES)
        return replace(state, frame=frame), report

    start = time.perf_counter()
    with trace_call("tracking.deform", {"frame": frame, "n_a": len(corr)}):
        state, report.iterations = deform(state, corr, model, cfg, anchors)
    report.ms_deform = _elapsed_ms(start)
    report.rmse = fit_rmse(state, d_f)
    return replace(state, frame=frame), report


class Tracker:
    """Owns the tracked object's model and state across frames.

    :type template: :class:`~lattice_servo.geometry.PointCloud`
    :param template: Object cloud in its rest shape. Normals are estimated
                     when missing.

    :type lattice: :class:`~lattice_servo.lattice.Lattice`
    :param lattice: Lattice around ``template``.

    :type mesh: :class:`~lattice_servo.lattice.TetMesh`
    :param mesh: Tet mesh of ``lattice``, possibly pruned.

    :type config: :class:`TrackerConfig`
    :param config: (Optional) tracking parameters.

    :type initial_pose: :class:`~lattice_servo.geometry.RigidTransform`
    :param initial_pose: (Optional) rigid offset of the initial estimate.
    """

    def __init__(
        self, template, lattice, mesh, config=None, initial_pose=None
    ):
        self.config = config or TrackerConfig()
        template = outward_normals(template, self.config.normal_neighbors)
        self.template = template
        self.lattice = lattice
        self.model = TrackingModel(
            embedding=embed(template, lattice, mesh),
            mesh=mesh,
            system=assemble_laplacian(mesh),
            rest_normals=template.normals,
        )
        shape = mesh.rest_nodes.copy()
        rotations = np.tile(np.eye(3), (mesh.n_nodes, 1, 1))
        if initial_pose is not None:
            shape = initial_pose.apply(shape)
            rotations = initial_pose.rotation[None] @ rotations
        self.state = TrackerState(
            object_cloud=self.model.cloud_for(shape),
            lattice_shape=shape,
            rotations=rotations,
        )

    @property
    def system(self):
        return self.model.system

    @property
    def mesh(self):
        return self.model.mesh

    def attach(self, anchor_poses, shape=None, k=None):
        k = self.config.known_node_count if k is None else k
        self.state = attach_known_nodes(
            self.state, anchor_poses, shape=shape, k=k
        )

    def gripped_groups(self):
        return self.state.known_groups()

    def track(self, raw, anchors=None, camera_center=None):
        self.state, report = track_frame(
            self.state,
            raw,
            self.model,
            self.config,
            anchors=anchors,
            camera_center=camera_center,
        )
        for flag in report.flags:
            _logger.warning("frame %d: %s", report.frame, flag)
        return report


_FRAME_PATTERN = re.compile(r"frame_(\d+)\.ply$")


def list_frames(cloud_dir):
    """``[(frame id, path)]`` for ``frame_%06d.ply`` files, by frame id."""
    frames = []
    for path in glob.glob(os.path.join(cloud_dir, "frame_*.ply")):
        match = _FRAME_PATTERN.search(os.path.basename(path))
        if match:
            frames.append((int(match.group(1)), path))
    return sorted(frames)


def track_directory(
    cloud_dir,
    template_path,
    output_dir,
    anchors_path=None,
    dims=(8, 8, 3),
    margin=0.01,
    config=None,
    camera_center=None,
    timings=True,
):
    """Track a recorded sequence and write per-frame lattices and a report.

    The template is assumed aligned with the first frame. Anchors of the
    first frame, if any, attach the known nodes.

    :rtype: :class:`pandas.DataFrame`
    :returns: The report written to ``tracking_report.csv``.
    """
    if not os.path.isdir(cloud_dir):
        raise ImproperlyConfigured(
            "cloud directory not found: {}".format(cloud_dir)
        )
    frames = list_frames(cloud_dir)
    if not frames:
        raise ImproperlyConfigured(
            "no frame_*.ply files in {}".format(cloud_dir)
        )
    template = lattice_io.read_cloud(template_path)
    lattice = build_lattice(template, dims, margin)
    tracker = Tracker(template, lattice, tetrahedralize(lattice), config)
    anchors = lattice_io.read_anchors(anchors_path) if anchors_path else {}

    first = frames[0][0]
    if anchors.get(first):
        tracker.attach(anchors[first])

    rows = []
    for frame_id, path in frames:
        raw = lattice_io.read_cloud(path)
        report = tracker.track(
            raw, anchors=anchors.get(frame_id), camera_center=camera_center
        )
        report.frame = frame_id
        rows.append(report.to_row(timings))
        name = "frame_{:06d}_lattice.ply".format(frame_id)
        export_lattice(
            os.path.join(output_dir, name),
            tracker.mesh,
            tracker.state.lattice_shape,
        )
    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    lattice_io.write_frame(
        os.path.join(output_dir, "tracking_report.csv"), table
    )
    return table
