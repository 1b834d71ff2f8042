# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import os
import shutil
import tempfile
import unittest

import mock
import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from lattice_servo import io as lattice_io
from lattice_servo.exceptions import EmptyInputError, ImproperlyConfigured
from lattice_servo.geometry import PointCloud, RigidTransform
from lattice_servo.lattice import Lattice, build_lattice, tetrahedralize
from lattice_servo.scenarios import box_surface
from lattice_servo.tracking import (
    ICP_DIVERGED,
    NO_CORRESPONDENCES,
    NO_DATA,
    REPORT_COLUMNS,
    CorrespondenceSet,
    FrameReport,
    Tracker,
    TrackerConfig,
    TrackerState,
    attach_known_nodes,
    deform,
    filter_cloud,
    find_correspondences,
    known_positions,
    list_frames,
    outward_normals,
    rigid_register,
    track_directory,
    track_frame,
)

from tests._helpers import OpenTelemetryBase

CAMERA = np.array([0.0, 0.0, 0.5])
SHEET = (0.1, 0.1, 0.01)


def sheet_template():
    return box_surface(SHEET, 0.005)


def top_face(cloud, shift=(0.0, 0.0, 0.0)):
    """What a camera above the sheet sees, moved by ``shift``."""
    top = cloud.points[cloud.normals[:, 2] > 0.5]
    return PointCloud(top + np.asarray(shift))


class TrackerTestBase(OpenTelemetryBase):
    @classmethod
    def setUpClass(cls):
        super(TrackerTestBase, cls).setUpClass()
        cls.template = sheet_template()
        cls.lattice = build_lattice(cls.template, (4, 4, 2), margin=0.01)
        cls.mesh = tetrahedralize(cls.lattice)

    def make_tracker(self, config=None, initial_pose=None):
        return Tracker(
            self.template, self.lattice, self.mesh, config, initial_pose
        )


class TestTrackerConfig(unittest.TestCase):
    def test_positive_values(self):
        with self.assertRaisesRegex(ImproperlyConfigured, "grid_cell"):
            TrackerConfig(grid_cell=0.0)
        with self.assertRaises(ImproperlyConfigured):
            TrackerConfig(gamma_constrained=-1.0)

    def test_misalignment_is_float_pair(self):
        cfg = TrackerConfig(initial_misalignment=[0, 5])
        self.assertEqual(cfg.initial_misalignment, (0.0, 5.0))


class TestFrameReport(unittest.TestCase):
    def test_row_without_timings(self):
        report = FrameReport(frame=3, n_a=10, rmse=0.001, ms_filter=2.0)
        row = report.to_row(timings=False)
        self.assertEqual(list(row), REPORT_COLUMNS)
        self.assertEqual(row["ms_filter"], 0.0)
        self.assertEqual(report.to_row()["ms_filter"], 2.0)
        self.assertTrue(report.ok)
        self.assertEqual(report.ms_total, 2.0)


class TestTrackingSteps(TrackerTestBase):
    def test_filter_crops_and_grids(self):
        tracker = self.make_tracker()
        raw = PointCloud(
            np.concatenate(
                [
                    top_face(self.template).points,
                    [[0.5, 0.0, 0.0], [0.0, 0.0, 0.3]],
                ]
            )
        )
        d_f = filter_cloud(raw, tracker.state, tracker.config)
        self.assertEqual(len(d_f), 400)
        self.assertTrue(np.all(np.abs(d_f.points) < 0.06))

    def test_register_translation(self):
        tracker = self.make_tracker()
        data = top_face(self.template, (0.001, 0.0, 0.0))
        registration = rigid_register(
            tracker.state, data, CAMERA, tracker.config
        )
        self.assertIsNone(registration.flag)
        np.testing.assert_allclose(
            registration.transform.translation, [0.001, 0, 0], atol=1e-9
        )
        np.testing.assert_allclose(
            registration.transform.rotation, np.eye(3), atol=1e-9
        )
        self.assertLess(registration.residual, 1e-9)

    def test_register_small_rigid_offset(self):
        tracker = self.make_tracker()
        offset = RigidTransform.from_rotvec(
            np.radians(3.0) * np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0),
            translation=(0.001, -0.001, 0.0048),
        )
        data = PointCloud(offset.apply(top_face(self.template).points))
        registration = rigid_register(
            tracker.state, data, CAMERA, tracker.config
        )
        self.assertIsNone(registration.flag)
        recovered = registration.transform
        self.assertLess(
            np.linalg.norm(recovered.translation - offset.translation), 0.001
        )
        error = Rotation.from_matrix(recovered.rotation.T @ offset.rotation)
        self.assertLess(np.degrees(error.magnitude()), 0.5)

    def test_register_small_growth_converges(self):
        tracker = self.make_tracker()
        data = top_face(self.template)
        creep = RigidTransform(translation=(1e-5, 0.0, 0.0))
        with mock.patch(
            "lattice_servo.tracking.fit_rigid", return_value=creep
        ):
            registration = rigid_register(
                tracker.state, data, CAMERA, tracker.config
            )
        self.assertIsNone(registration.flag)
        self.assertEqual(registration.iterations, 2)
        self.assertEqual(registration.residual, 0.0)
        np.testing.assert_array_equal(
            registration.transform.translation, np.zeros(3)
        )

    def test_register_empty(self):
        tracker = self.make_tracker()
        with self.assertRaises(EmptyInputError):
            rigid_register(
                tracker.state, PointCloud([]), CAMERA, tracker.config
            )

    def test_register_divergence(self):
        tracker = self.make_tracker()
        data = top_face(self.template)
        drift = RigidTransform(translation=(0.01, 0.0, 0.0))
        with mock.patch(
            "lattice_servo.tracking.fit_rigid", return_value=drift
        ):
            registration = rigid_register(
                tracker.state, data, CAMERA, tracker.config
            )
        self.assertEqual(registration.flag, ICP_DIVERGED)
        self.assertEqual(registration.iterations, 4)
        np.testing.assert_array_equal(
            registration.transform.translation, np.zeros(3)
        )

    def test_correspondence_rule(self):
        state = TrackerState(
            object_cloud=PointCloud(
                [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
                [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            ),
            lattice_shape=np.zeros((1, 3)),
            rotations=np.eye(3)[None],
        )
        data = PointCloud([[0.1, 0.0, 0.0], [0.2, 0.0, 0.0]])
        cfg = TrackerConfig(correspondence_threshold=0.5)
        corr = find_correspondences(state, data, [0, 0, 10], cfg)
        np.testing.assert_array_equal(corr.model_indices, [0])
        np.testing.assert_allclose(corr.target_points, [[0.125, 0.0, 0.0]])

        cfg = TrackerConfig(correspondence_threshold=1.0)
        corr = find_correspondences(state, data, [0, 0, 10], cfg)
        np.testing.assert_array_equal(corr.model_indices, [0, 1])
        np.testing.assert_allclose(corr.target_points[1], [0.2, 0.0, 0.0])

    def test_only_visible_points_correspond(self):
        tracker = self.make_tracker()
        data = top_face(self.template)
        corr = find_correspondences(
            tracker.state, data, [0, 0, -0.5], tracker.config
        )
        self.assertGreater(len(corr), 0)
        self.assertTrue(
            np.all(tracker.template.normals[corr.model_indices, 2] < 0)
        )
        empty = find_correspondences(
            tracker.state, PointCloud([]), CAMERA, tracker.config
        )
        self.assertEqual(len(empty), 0)

    def test_deform_follows_uniform_pull(self):
        tracker = self.make_tracker()
        state = tracker.state
        corr = find_correspondences(
            state, top_face(self.template), CAMERA, tracker.config
        )
        lifted = CorrespondenceSet(
            corr.model_indices,
            corr.model_points,
            corr.target_points + [0.0, 0.0, 0.001],
        )
        updated, iterations = deform(
            state, lifted, tracker.model, tracker.config
        )
        np.testing.assert_allclose(
            updated.lattice_shape,
            self.mesh.rest_nodes + [0.0, 0.0, 0.001],
            atol=1e-9,
        )
        self.assertLessEqual(iterations, 2)

    def test_known_nodes_are_held(self):
        tracker = self.make_tracker()
        corner = self.mesh.rest_nodes[0]
        tracker.attach({0: RigidTransform(translation=corner)}, k=4)
        groups = tracker.gripped_groups()
        self.assertEqual(list(groups), [0])
        self.assertEqual(len(groups[0]), 4)

        moved = {0: RigidTransform(translation=corner + [0.0, 0.0, 0.002])}
        indices, positions = known_positions(tracker.state, moved)
        np.testing.assert_allclose(
            positions, self.mesh.rest_nodes[indices] + [0.0, 0.0, 0.002]
        )
        empty = CorrespondenceSet(
            np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3))
        )
        updated, _ = deform(
            tracker.state, empty, tracker.model, tracker.config, moved
        )
        np.testing.assert_array_equal(
            updated.lattice_shape[indices], positions
        )

    def test_missing_anchor_is_not_constrained(self):
        tracker = self.make_tracker()
        tracker.attach({3: RigidTransform(translation=(0.0, 0.0, 0.0))}, k=2)
        indices, positions = known_positions(tracker.state, {})
        self.assertEqual(len(indices), 0)
        self.assertEqual(positions.shape, (0, 3))

    def test_conflicting_anchors_keep_lower_id(self):
        lattice = Lattice((3, 3, 3), (1.0, 1.0, 1.0), RigidTransform())
        state = TrackerState(
            object_cloud=PointCloud(lattice.rest_nodes),
            lattice_shape=lattice.rest_nodes,
            rotations=np.tile(np.eye(3), (27, 1, 1)),
        )
        center = RigidTransform(translation=(1.0, 1.0, 1.0))
        state = attach_known_nodes(state, {1: center, 0: center}, k=3)
        groups = state.known_groups()
        self.assertEqual(list(groups), [0])
        np.testing.assert_array_equal(groups[0], [13, 4, 10])

    def test_outward_normals(self):
        count = 500
        index = np.arange(count) + 0.5
        polar = np.arccos(1 - 2 * index / count)
        azimuth = np.pi * (1 + 5**0.5) * index
        sphere = 0.05 * np.column_stack(
            [
                np.cos(azimuth) * np.sin(polar),
                np.sin(azimuth) * np.sin(polar),
                np.cos(polar),
            ]
        )
        cloud = outward_normals(PointCloud(sphere + 0.2), k=10)
        radial = cloud.points - 0.2
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        self.assertTrue(
            np.all(np.einsum("ni,ni->n", cloud.normals, radial) > 0.9)
        )


class TestTrackFrame(TrackerTestBase):
    def test_translation_is_followed(self):
        tracker = self.make_tracker()
        report = tracker.track(
            top_face(self.template, (0.001, 0.0, 0.0)), camera_center=CAMERA
        )
        self.assertTrue(report.ok)
        self.assertEqual(report.frame, 1)
        self.assertEqual(tracker.state.frame, 1)
        self.assertEqual(report.n_a, 400)
        self.assertLess(report.rmse, 1e-6)
        np.testing.assert_allclose(
            tracker.state.lattice_shape,
            self.mesh.rest_nodes + [0.001, 0.0, 0.0],
            atol=1e-8,
        )
        self.assertSpanNames(
            [
                "LatticeServo.tracking.filter",
                "LatticeServo.tracking.icp",
                "LatticeServo.tracking.correspondences",
                "LatticeServo.tracking.deform",
            ]
        )

    def test_no_data(self):
        tracker = self.make_tracker()
        before = tracker.state.lattice_shape
        report = tracker.track(
            PointCloud([[1.0, 1.0, 1.0]]), camera_center=CAMERA
        )
        self.assertEqual(report.flags, [NO_DATA])
        self.assertEqual(tracker.state.frame, 1)
        self.assertIs(tracker.state.lattice_shape, before)
        self.assertTrue(np.isnan(report.rmse))

    def test_no_correspondences(self):
        tracker = self.make_tracker()
        empty = CorrespondenceSet(
            np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3))
        )
        with mock.patch(
            "lattice_servo.tracking.find_correspondences",
            return_value=empty,
        ):
            state, report = track_frame(
                tracker.state,
                top_face(self.template),
                tracker.model,
                tracker.config,
                camera_center=CAMERA,
            )
        self.assertEqual(report.flags, [NO_CORRESPONDENCES])
        self.assertEqual(report.n_a, 0)
        self.assertEqual(state.frame, 1)

    def test_static_noisy_frames(self):
        tracker = self.make_tracker()
        rng = np.random.default_rng(0)
        face = top_face(self.template).points
        for _ in range(10):
            noisy = face + rng.normal(0.0, 0.0005, face.shape)
            report = tracker.track(PointCloud(noisy), camera_center=CAMERA)
            self.assertTrue(report.ok, report.flags)
            self.assertLess(report.icp_residual, 0.002)
        drift = tracker.state.lattice_shape - self.mesh.rest_nodes
        self.assertLess(np.abs(drift).max(), 0.002)

    def test_withheld_anchor_frees_its_nodes(self):
        tracker = self.make_tracker()
        rest = self.mesh.rest_nodes
        tracker.attach(
            {
                0: RigidTransform(translation=rest[0]),
                1: RigidTransform(translation=rest[-1]),
            },
            k=2,
        )
        groups = tracker.gripped_groups()
        shift = np.array([0.001, 0.0, 0.0])
        anchors = {0: RigidTransform(translation=rest[0] + shift)}
        report = tracker.track(
            top_face(self.template, shift),
            anchors=anchors,
            camera_center=CAMERA,
        )
        self.assertTrue(report.ok)
        shape = tracker.state.lattice_shape
        np.testing.assert_allclose(
            shape[groups[0]], rest[groups[0]] + shift, atol=1e-12
        )
        np.testing.assert_allclose(
            shape[groups[1]], rest[groups[1]] + shift, atol=1e-8
        )
        self.assertEqual(sorted(tracker.gripped_groups()), [0, 1])

    def test_initial_pose(self):
        offset = RigidTransform(translation=(0.0, 0.0, 0.002))
        tracker = self.make_tracker(initial_pose=offset)
        np.testing.assert_allclose(
            tracker.state.lattice_shape,
            self.mesh.rest_nodes + offset.translation,
        )
        np.testing.assert_allclose(
            tracker.state.object_cloud.points,
            self.template.points + offset.translation,
            atol=1e-12,
        )


class TestTrackDirectory(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.clouds = os.path.join(self.tmp, "clouds")
        self.output = os.path.join(self.tmp, "out")
        os.makedirs(self.clouds)
        os.makedirs(self.output)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_sequence(self):
        template = sheet_template()
        template_path = os.path.join(self.tmp, "template.ply")
        lattice_io.write_cloud(template_path, template)
        for frame, shift in ((0, 0.0), (1, 0.001)):
            lattice_io.write_cloud(
                os.path.join(self.clouds, "frame_{:06d}.ply".format(frame)),
                top_face(template, (shift, 0.0, 0.0)),
            )
        self.assertEqual([f for f, _ in list_frames(self.clouds)], [0, 1])

        report = track_directory(
            self.clouds,
            template_path,
            self.output,
            dims=(4, 4, 2),
            camera_center=CAMERA,
            timings=False,
        )
        self.assertEqual(list(report.columns), REPORT_COLUMNS)
        self.assertEqual(list(report["frame"]), [0, 1])
        self.assertTrue(np.all(report["rmse_m"] < 1e-6))
        self.assertTrue(np.all(report["ms_deform"] == 0.0))
        written = pd.read_csv(os.path.join(self.output, "tracking_report.csv"))
        self.assertEqual(len(written), 2)
        for frame in (0, 1):
            name = "frame_{:06d}_lattice.ply".format(frame)
            self.assertTrue(os.path.exists(os.path.join(self.output, name)))

    def test_missing_directory(self):
        with self.assertRaisesRegex(ImproperlyConfigured, "not found"):
            track_directory(
                os.path.join(self.tmp, "absent"), "template.ply", self.output
            )

    def test_no_frames(self):
        with self.assertRaisesRegex(ImproperlyConfigured, "no frame_"):
            track_directory(self.clouds, "template.ply", self.output)
