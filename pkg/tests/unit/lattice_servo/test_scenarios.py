# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import glob
import os
import shutil
import tempfile
import unittest

import numpy as np

from lattice_servo import DEFAULT_SEED
from lattice_servo import io as lattice_io
from lattice_servo.exceptions import ImproperlyConfigured
from lattice_servo.scenarios import (
    GripperConfig,
    LatticeConfig,
    ObjectConfig,
    ScenarioConfig,
    Segment,
    WaypointConfig,
    box_surface,
    build_template,
    dump_scenario,
    library_scenario,
    load_scenario,
    make_scenario_library,
    scenario_from_dict,
    scenario_to_dict,
)

SCENARIO_DIR = os.path.join(
    os.path.dirname(__file__), "..", "..", "..", "scenarios"
)

MINIMAL = {
    "name": "minimal",
    "grippers": [{"position": [-0.1, 0.0, 0.0]}],
}


class TestScenarioFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_repository_scenarios_load(self):
        paths = sorted(glob.glob(os.path.join(SCENARIO_DIR, "*.yaml")))
        self.assertTrue(paths)
        for path in paths:
            scenario = load_scenario(path)
            self.assertTrue(scenario.grippers)
            self.assertEqual(
                scenario.base_dir, os.path.dirname(os.path.abspath(path))
            )

    def test_cable_file_matches_library(self):
        scenario = load_scenario(
            os.path.join(SCENARIO_DIR, "t1_1_cable_in_plane.yaml")
        )
        library = library_scenario("t1_1")
        self.assertEqual(scenario.lattice.dims, library.lattice.dims)
        np.testing.assert_array_equal(scenario.axis_mask, library.axis_mask)
        np.testing.assert_allclose(
            scenario.waypoints.targets[0][0].twists,
            library.waypoints.targets[0][0].twists,
            atol=1e-6,
        )

    def test_missing_file(self):
        with self.assertRaisesRegex(ImproperlyConfigured, "not found"):
            load_scenario(os.path.join(self.tmp, "absent.yaml"))

    def test_malformed_file(self):
        path = os.path.join(self.tmp, "broken.yaml")
        with open(path, "w") as handle:
            handle.write("name: [unclosed\n")
        with self.assertRaisesRegex(ImproperlyConfigured, "malformed"):
            load_scenario(path)

    def test_dump_and_load(self):
        scenario = library_scenario("t2_2")
        path = os.path.join(self.tmp, "t2_2.yaml")
        dump_scenario(scenario, path)
        loaded = load_scenario(path)
        self.assertEqual(scenario_to_dict(loaded), scenario_to_dict(scenario))
        self.assertEqual(loaded.lattice.dims, (8, 8, 3))


class TestScenarioFromDict(unittest.TestCase):
    def test_defaults(self):
        scenario = scenario_from_dict(MINIMAL)
        self.assertEqual(scenario.name, "minimal")
        self.assertEqual(scenario.object.kind, "sheet")
        self.assertEqual(scenario.waypoints.settle_steps, 10)
        self.assertEqual(scenario.effective_seed, DEFAULT_SEED)
        self.assertIsNone(scenario.axis_mask)

    def test_unknown_top_level_key(self):
        data = dict(MINIMAL, gripers=[])
        with self.assertRaisesRegex(ImproperlyConfigured, "gripers"):
            scenario_from_dict(data)

    def test_unknown_section_key(self):
        data = dict(MINIMAL, servo={"kp": 0.1})
        with self.assertRaisesRegex(ImproperlyConfigured, "servo: kp"):
            scenario_from_dict(data)

    def test_unknown_waypoint_key(self):
        data = dict(MINIMAL, waypoints={"target": []})
        with self.assertRaisesRegex(ImproperlyConfigured, "waypoints"):
            scenario_from_dict(data)

    def test_section_must_be_mapping(self):
        with self.assertRaisesRegex(ImproperlyConfigured, "mapping"):
            scenario_from_dict(dict(MINIMAL, object=3))
        with self.assertRaises(ImproperlyConfigured):
            scenario_from_dict([MINIMAL])

    def test_missing_segment_field(self):
        data = dict(MINIMAL, waypoints={"targets": [[{"steps": 3}]]})
        with self.assertRaises(ImproperlyConfigured):
            scenario_from_dict(data)

    def test_twist_count(self):
        data = dict(
            MINIMAL,
            waypoints={
                "targets": [[{"steps": 2, "twists": [[0.0] * 6] * 2}]]
            },
        )
        with self.assertRaisesRegex(ImproperlyConfigured, "2 twists for 1"):
            scenario_from_dict(data)


class TestConfigValidation(unittest.TestCase):
    def test_scenario_values(self):
        grippers = [GripperConfig()]
        with self.assertRaisesRegex(ImproperlyConfigured, "gripper"):
            ScenarioConfig()
        with self.assertRaises(ImproperlyConfigured):
            ScenarioConfig(grippers=grippers, dt=0.0)
        with self.assertRaises(ImproperlyConfigured):
            ScenarioConfig(grippers=grippers, ground_truth="fem")

    def test_sections(self):
        with self.assertRaises(ImproperlyConfigured):
            ObjectConfig(kind="rope")
        with self.assertRaisesRegex(ImproperlyConfigured, "template"):
            ObjectConfig(kind="file")
        with self.assertRaises(ImproperlyConfigured):
            LatticeConfig(dims=(8, 1, 3))
        with self.assertRaises(ImproperlyConfigured):
            LatticeConfig(servoed_regions=[(0.6, 0.4)])
        with self.assertRaises(ImproperlyConfigured):
            GripperConfig(axis_mask=(True,) * 5)
        with self.assertRaises(ImproperlyConfigured):
            Segment(0, [])
        with self.assertRaises(ImproperlyConfigured):
            Segment(1, [[0.0] * 5])

    def test_axis_mask(self):
        scenario = ScenarioConfig(
            grippers=[
                GripperConfig(),
                GripperConfig(axis_mask=(True, False) * 3),
            ]
        )
        np.testing.assert_array_equal(
            scenario.axis_mask, [[True] * 6, [True, False] * 3]
        )


class TestTemplates(unittest.TestCase):
    def test_box_surface(self):
        cloud = box_surface((0.1, 0.04, 0.02), 0.01)
        self.assertEqual(len(cloud), 2 * (10 * 4 + 10 * 2 + 4 * 2))
        self.assertTrue(
            np.all(np.einsum("ni,ni->n", cloud.points, cloud.normals) > 0)
        )
        np.testing.assert_allclose(
            np.abs(cloud.points).max(axis=0), [0.05, 0.02, 0.01]
        )

    def test_template_pose(self):
        cfg = ObjectConfig(
            kind="block",
            size=(0.1, 0.04, 0.02),
            sample_spacing=0.01,
            center=(0.2, 0.0, 0.0),
            orientation_deg=(0.0, 0.0, 90.0),
        )
        template = build_template(cfg)
        rest = box_surface(cfg.size, cfg.sample_spacing)
        np.testing.assert_allclose(
            template.points,
            rest.points[:, [1, 0, 2]] * [-1.0, 1.0, 1.0] + [0.2, 0.0, 0.0],
            atol=1e-12,
        )
        np.testing.assert_allclose(
            np.abs(template.normals), np.abs(rest.normals[:, [1, 0, 2]])
        )

    def test_template_file(self):
        tmp = tempfile.mkdtemp()
        try:
            cloud = box_surface((0.1, 0.1, 0.1), 0.05)
            lattice_io.write_cloud(os.path.join(tmp, "box.ply"), cloud)
            cfg = ObjectConfig(kind="file", template="box.ply")
            template = build_template(cfg, base_dir=tmp)
            np.testing.assert_allclose(template.points, cloud.points)
            np.testing.assert_allclose(template.normals, cloud.normals)
        finally:
            shutil.rmtree(tmp)


class TestLibrary(unittest.TestCase):
    def test_names(self):
        names = [scenario.name for scenario in make_scenario_library()]
        self.assertEqual(
            names,
            [
                "t1_1",
                "t1_2",
                "t1_3",
                "t2_1",
                "t2_2",
                "t2_3",
                "t3_1",
                "t3_3",
                "t3_4",
                "flat_direct",
                "flat_waypoints",
            ],
        )

    def test_unknown(self):
        with self.assertRaisesRegex(ImproperlyConfigured, "unknown"):
            library_scenario("t9_9")

    def test_symmetric_bend_angle(self):
        scenario = library_scenario("t1_1")
        segment = scenario.waypoints.targets[0][0]
        turned = segment.twists[1][5] * segment.steps * scenario.dt
        self.assertAlmostEqual(turned, np.radians(20.0))
        self.assertAlmostEqual(segment.twists[0][5], -segment.twists[1][5])

    def test_partial_tasks_use_lower_gain(self):
        full = library_scenario("t2_1")
        partial = library_scenario("t2_2")
        self.assertIsNone(full.lattice.servoed_regions)
        self.assertLess(partial.servo.k_p, full.servo.k_p)

    def test_waypoint_variant(self):
        direct = library_scenario("flat_direct")
        staged = library_scenario("flat_waypoints")
        self.assertEqual(len(direct.waypoints.targets), 1)
        self.assertEqual(len(staged.waypoints.targets), 3)
        self.assertIsInstance(staged.waypoints, WaypointConfig)
        self.assertEqual(len(direct.waypoints.initial), 1)
