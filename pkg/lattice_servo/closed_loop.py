# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Closed-loop shape servoing against the synthetic world."""

import logging
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from lattice_servo import io as lattice_io
from lattice_servo._opentelemetry_tracing import trace_call
from lattice_servo.control import (
    ServoCommand,
    gripper_velocities,
    servo_error,
    waypoint_advance,
)
from lattice_servo.exceptions import ImproperlyConfigured, LatticeServoError
from lattice_servo.geometry import RigidTransform
from lattice_servo.jacobian import (
    Gripper,
    GraspModel,
    NodePartition,
    analytic_jacobian,
    compose_Jsp,
    grasp_matrix,
)
from lattice_servo.lattice import (
    build_lattice,
    export_lattice,
    prune_nonconvex,
    tetrahedralize,
)
from lattice_servo.scenarios import build_template
from lattice_servo.sim import (
    DepthCamera,
    GroundTruthObject,
    World,
    render_cloud,
    step_world,
)
from lattice_servo.tracking import Tracker

_logger = logging.getLogger(__name__)

TWIST_AXES = ("vx", "vy", "vz", "wx", "wy", "wz")
TIMING_COLUMNS = ("ms_track", "ms_jacobian", "ms_total")
# Offsets the seed of the misalignment draw from the per-step camera seeds.
_MISALIGNMENT_STREAM = 7919


def log_columns(n_grippers):
    columns = [
        "step",
        "t_s",
        "waypoint",
        "rmse_m",
        "track_rmse_m",
        "schur_cond",
        "cond_ff",
    ]
    for gripper in range(n_grippers):
        columns += ["g{}_{}".format(gripper, axis) for axis in TWIST_AXES]
    return columns + list(TIMING_COLUMNS)


@dataclass
class ServoLog:
    """Per-step record of a closed-loop run."""

    scenario: str
    n_grippers: int
    rows: List[dict] = field(default_factory=list)
    aborted: Optional[str] = None

    def __len__(self):
        return len(self.rows)

    def append(self, row):
        if self.rows and row["t_s"] <= self.rows[-1]["t_s"]:
            raise ValueError("log rows must increase in time")
        self.rows.append(row)

    def to_frame(self, timings=True):
        frame = pd.DataFrame(self.rows, columns=log_columns(self.n_grippers))
        if not timings:
            for column in TIMING_COLUMNS:
                frame[column] = 0.0
        return frame

    def write(self, path, timings=True):
        lattice_io.write_frame(path, self.to_frame(timings))

    def summary(self):
        return summarize(self.to_frame())


def _first_step_below(frame, threshold):
    below = frame.loc[frame["rmse_m"] < threshold, "step"]
    return int(below.iloc[0]) if len(below) else None


def summarize(frame):
    """Final rmse, steps to 15 mm and 5 mm and mean milliseconds per step.

    :type frame: :class:`pandas.DataFrame`
    :param frame: A servo log as written by :meth:`ServoLog.write`.

    :rtype: dict
    """
    if len(frame) == 0:
        raise ImproperlyConfigured("servo log is empty")
    return {
        "steps": int(len(frame)),
        "final_rmse_m": float(frame["rmse_m"].iloc[-1]),
        "min_rmse_m": float(frame["rmse_m"].min()),
        "steps_to_15mm": _first_step_below(frame, 0.015),
        "steps_to_5mm": _first_step_below(frame, 0.005),
        "mean_ms_step": float(frame["ms_total"].mean()),
    }


def read_log(path):
    if not os.path.isfile(path):
        raise ImproperlyConfigured("log file not found: {}".format(path))
    frame = pd.read_csv(path)
    missing = {"step", "rmse_m", "ms_total"} - set(frame.columns)
    if missing:
        raise ImproperlyConfigured(
            "{} is not a servo log, missing {}".format(
                path, ", ".join(sorted(missing))
            )
        )
    return frame


def surface_rmse(tracked, truth):
    """RMS distance between the tracked and the true object surfaces.

    Point clouds embedded from the same template are compared point by
    point, anything else by nearest neighbour.
    """
    if len(tracked) == len(truth):
        delta = tracked.points - truth.points
    else:
        distance, _ = cKDTree(tracked.points).query(truth.points)
        delta = distance[:, None]
    return float(np.sqrt(np.sum(delta * delta) / len(delta)))


def region_nodes(embedding, lattice, points, regions, axis=0):
    """Nodes of the tets holding object points whose position along
    ``axis``, as a fraction of the object length, falls in a region."""
    local = lattice.origin_pose.inverse().apply(points)[:, axis]
    low, high = local.min(), local.max()
    fraction = (local - low) / (high - low)
    selected = np.zeros(len(points), dtype=bool)
    for start, stop in regions:
        selected |= (fraction >= start) & (fraction <= stop)
    return np.unique(embedding.node_index[selected])


def misalignment_pose(cfg, center, seed):
    """Rigid offset of the given size about ``center`` along random axes."""
    translation, degrees = cfg.initial_misalignment
    if translation == 0 and degrees == 0:
        return None
    rng = np.random.default_rng([seed, _MISALIGNMENT_STREAM])
    direction, axis = rng.normal(size=(2, 3))
    direction /= np.linalg.norm(direction)
    axis /= np.linalg.norm(axis)
    rotation = RigidTransform.from_rotvec(axis * degrees, degrees=True)
    shift = center - rotation.apply(center)[0] + translation * direction
    return RigidTransform(rotation.rotation, shift)


class Simulation:
    """Ground-truth world, camera and tracker for one scenario.

    :type scenario: :class:`~lattice_servo.scenarios.ScenarioConfig`
    :param scenario: The task to run.
    """

    def __init__(self, scenario):
        self.scenario = scenario
        seed = scenario.effective_seed
        template = build_template(scenario.object, scenario.base_dir)
        orientation = RigidTransform(
            scenario.object.pose.rotation, np.zeros(3)
        )
        self.lattice = build_lattice(
            template,
            scenario.lattice.dims,
            scenario.lattice.margin,
            orientation,
        )
        mesh = tetrahedralize(self.lattice)
        if scenario.lattice.prune:
            mesh, _ = prune_nonconvex(self.lattice, mesh, template)

        offset = misalignment_pose(
            scenario.tracker, template.points.mean(axis=0), seed
        )
        self.tracker = Tracker(
            template, self.lattice, mesh, scenario.tracker, offset
        )
        poses = [gripper.pose for gripper in scenario.grippers]
        # Offsets come from the true rest shape, not the tracked estimate.
        self.tracker.attach(self._anchors(poses), shape=mesh.rest_nodes)
        groups = self.tracker.gripped_groups()
        if sorted(groups) != list(range(len(poses))):
            raise ImproperlyConfigured("every gripper must hold a node")
        self.groups = [groups[index] for index in range(len(poses))]

        truth = GroundTruthObject.from_template(
            self.tracker.template, self.lattice, scenario.ground_truth
        )
        for index, (pose, nodes) in enumerate(zip(poses, self.groups)):
            rest = mesh.rest_nodes[nodes]
            truth.attach(index, pose, truth.nodes_near(self.lattice, rest))
        self.world = World(truth, poses)
        self.camera = DepthCamera.from_config(scenario.camera, seed)
        self.partition = self._partition(template)

    @staticmethod
    def _anchors(poses):
        return {index: pose for index, pose in enumerate(poses)}

    def _partition(self, template):
        gripped = np.concatenate(self.groups)
        n_nodes = self.tracker.mesh.n_nodes
        regions = self.scenario.lattice.servoed_regions
        if not regions:
            return NodePartition.full(gripped, n_nodes)
        servoed = region_nodes(
            self.tracker.model.embedding,
            self.lattice,
            self.tracker.template.points,
            regions,
            self.scenario.lattice.region_axis,
        )
        return NodePartition.partial(gripped, servoed, n_nodes)

    def observe(self):
        """Render the world and track the rendered cloud."""
        raw = render_cloud(self.world, self.camera)
        return self.tracker.track(
            raw,
            anchors=self._anchors(self.world.gripper_poses),
            camera_center=self.camera.center,
        )

    def advance(self, command):
        step_world(self.world, command, self.scenario.dt)
        return self.observe()

    def run_script(self, segments):
        """Play scripted twists, tracking every frame, then let it settle."""
        for segment in segments:
            command = ServoCommand(np.array(segment.twists, dtype=float))
            for _ in range(segment.steps):
                self.advance(command)
        idle = ServoCommand.zeros(self.world.n_grippers)
        for _ in range(self.scenario.waypoints.settle_steps):
            self.advance(idle)

    def desired_shapes(self):
        """Tracked lattice shapes at the end of every target script.

        The world and the tracker are rewound afterwards. Without targets
        the current shape is the only desired shape.
        """
        targets = self.scenario.waypoints.targets
        if not targets:
            return [self.tracker.state.lattice_shape.copy()]
        snapshot = self.world.snapshot()
        tracker_state = self.tracker.state
        shapes = []
        for script in targets:
            self.run_script(script)
            shapes.append(self.tracker.state.lattice_shape.copy())
        self.world.restore(snapshot)
        self.tracker.state = tracker_state
        return shapes

    def grasp(self):
        grippers = [
            Gripper(pose, nodes)
            for pose, nodes in zip(self.world.gripper_poses, self.groups)
        ]
        return grasp_matrix(
            GraspModel(grippers), self.tracker.state.lattice_shape
        )

    def track_rmse(self):
        return surface_rmse(
            self.tracker.state.object_cloud, self.world.object.surface()
        )

    def write_snapshots(self, output_dir, step, desired):
        prefix = os.path.join(
            output_dir, "{}_{:06d}".format(self.scenario.name, step)
        )
        truth = self.world.object
        export_lattice(prefix + "_truth.ply", truth.mesh, truth.shape)
        export_lattice(
            prefix + "_tracked.ply",
            self.tracker.mesh,
            self.tracker.state.lattice_shape,
        )
        export_lattice(prefix + "_desired.ply", self.tracker.mesh, desired)


def _servo_step(sim, step, waypoint, waypoints):
    """One control update; returns the command and the log row."""
    scenario = sim.scenario
    state = sim.tracker.state
    status = servo_error(
        state.lattice_shape, waypoints[waypoint], sim.partition, step, waypoint
    )
    index, desired = waypoint_advance(status, waypoints, scenario.servo)
    if index != waypoint:
        status = servo_error(
            state.lattice_shape, desired, sim.partition, step, index
        )

    start = time.perf_counter()
    with trace_call("servo.jacobian", {"step": step}):
        jac, _ = analytic_jacobian(
            sim.tracker.system,
            state.lattice_shape,
            state.rotations,
            sim.partition,
            scenario.jacobian.centering,
            scenario.jacobian.dense_unknowns,
        )
        jac = compose_Jsp(jac, sim.grasp())
    ms_jacobian = (time.perf_counter() - start) * 1e3

    command = gripper_velocities(
        jac.j_sp, status, scenario.servo, step, scenario.axis_mask
    )
    _logger.debug(
        "step %d rmse %.5f cond(H_ff) %.3g cond(schur) %.3g",
        step,
        status.rmse,
        jac.cond_ff,
        jac.cond_schur,
    )
    row = {
        "step": step,
        "t_s": step * scenario.dt,
        "waypoint": index,
        "rmse_m": status.rmse,
        "schur_cond": jac.cond_schur,
        "cond_ff": jac.cond_ff,
        "ms_jacobian": ms_jacobian,
    }
    for gripper, twist in enumerate(command.twists):
        for axis, value in zip(TWIST_AXES, twist):
            row["g{}_{}".format(gripper, axis)] = value
    return command, row, index, status


def run_closed_loop(scenario, output_dir=None, timings=True):
    """Servo the simulated object to the scenario's desired shape.

    Each step tracks the latest rendered frame, linearizes the tracked
    lattice, sends gripper twists and advances the world. The run ends at
    ``max_steps`` or once the servo rmse drops below ``stop_rmse``. A
    component error stops the loop and the log gathered so far is kept.

    :type scenario: :class:`~lattice_servo.scenarios.ScenarioConfig`
    :param scenario: The task to run.

    :type output_dir: str
    :param output_dir: (Optional) directory receiving ``<name>.csv`` and
                       snapshots.

    :type timings: bool
    :param timings: Write wall-clock columns; zeros otherwise.

    :rtype: :class:`ServoLog`
    """
    sim = Simulation(scenario)
    log = ServoLog(scenario.name, sim.world.n_grippers)
    try:
        sim.run_script(scenario.waypoints.initial)
        waypoints = sim.desired_shapes()
        report = sim.observe()
        waypoint = 0
        for step in range(1, scenario.max_steps + 1):
            start = time.perf_counter()
            command, row, waypoint, status = _servo_step(
                sim, step, waypoint, waypoints
            )
            row["ms_track"] = report.ms_total
            row["ms_total"] = (
                report.ms_total + (time.perf_counter() - start) * 1e3
            )
            row["track_rmse_m"] = sim.track_rmse()
            log.append(row)
            if output_dir and scenario.snapshot_every:
                if step % scenario.snapshot_every == 0:
                    sim.write_snapshots(output_dir, step, waypoints[waypoint])
            if command.fault:
                _logger.error(
                    "%s aborted at step %d: %s",
                    scenario.name,
                    step,
                    command.fault,
                )
                log.aborted = command.fault
                break
            if (
                status.rmse < scenario.stop_rmse
                and waypoint == len(waypoints) - 1
            ):
                _logger.info("%s converged at step %d", scenario.name, step)
                break
            report = sim.advance(command)
    except LatticeServoError as error:
        _logger.error("%s aborted: %s", scenario.name, error)
        log.aborted = str(error)
    if output_dir:
        log.write(
            os.path.join(output_dir, "{}.csv".format(scenario.name)), timings
        )
    return log
