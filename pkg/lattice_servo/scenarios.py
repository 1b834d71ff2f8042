# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Scenario configuration, YAML scenario files and the built-in library."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import yaml

from lattice_servo import DEFAULT_SEED
from lattice_servo import io as lattice_io
from lattice_servo.control import ServoConfig
from lattice_servo.exceptions import ImproperlyConfigured
from lattice_servo.geometry import PointCloud, RigidTransform
from lattice_servo.sim import GROUND_TRUTH_MODELS, CameraConfig
from lattice_servo.tracking import TrackerConfig

_logger = logging.getLogger(__name__)

OBJECT_KINDS = ("cable", "sheet", "block", "file")

CABLE_SIZE = (0.3, 0.02, 0.02)
SHEET_SIZE = (0.2, 0.2, 0.004)
BLOCK_SIZE = (0.16, 0.08, 0.08)

FULL_GAIN = 0.1
PARTIAL_GAIN = 0.05


@dataclass
class ObjectConfig:
    """Procedural box-shaped template, or a cloud file for ``kind: file``."""

    kind: str = "sheet"
    size: Tuple[float, float, float] = SHEET_SIZE
    sample_spacing: float = 0.004
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    template: Optional[str] = None

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ImproperlyConfigured(
                "object.kind must be one of {}".format(OBJECT_KINDS)
            )
        if self.kind == "file" and not self.template:
            raise ImproperlyConfigured("object.template is required")
        if self.sample_spacing <= 0 or min(self.size) <= 0:
            raise ImproperlyConfigured("object sizes must be positive")

    @property
    def pose(self):
        return RigidTransform.from_rotvec(
            self.orientation_deg, self.center, degrees=True
        )


@dataclass
class LatticeConfig:
    dims: Tuple[int, int, int] = (8, 8, 3)
    margin: float = 0.01
    prune: bool = False
    # Fractions of the object length along ``region_axis``; ``None`` servos
    # every node that is not gripped.
    servoed_regions: Optional[List[Tuple[float, float]]] = None
    region_axis: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ImproperlyConfigured("lattice.dims needs 3 entries >= 2")
        if self.margin < 0:
            raise ImproperlyConfigured("lattice.margin must be >= 0")
        if self.region_axis not in (0, 1, 2):
            raise ImproperlyConfigured("lattice.region_axis must be 0, 1 or 2")
        for low, high in self.servoed_regions or ():
            if not 0.0 <= low < high <= 1.0:
                raise ImproperlyConfigured(
                    "servoed region [{}, {}] is not inside [0, 1]".format(
                        low, high
                    )
                )


@dataclass
class GripperConfig:
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_mask: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        if self.axis_mask is not None and len(self.axis_mask) != 6:
            raise ImproperlyConfigured("axis_mask needs 6 entries")

    @property
    def pose(self):
        return RigidTransform.from_rotvec(
            self.orientation_deg, self.position, degrees=True
        )


@dataclass
class Segment:
    """Constant gripper twists held for ``steps`` world steps."""

    steps: int
    twists: List[List[float]]

    def __post_init__(self):
        if self.steps < 1:
            raise ImproperlyConfigured("segment steps must be >= 1")
        if any(len(twist) != 6 for twist in self.twists):
            raise ImproperlyConfigured("segment twists need 6 components")


@dataclass
class WaypointConfig:
    """Scripted motions producing the initial and desired shapes.

    ``initial`` deforms the object before servoing starts. Each entry of
    ``targets`` continues from the previous one and yields one desired
    shape; the last one is the final target.
    """

    initial: List[Segment] = field(default_factory=list)
    targets: List[List[Segment]] = field(default_factory=list)
    settle_steps: int = 10


@dataclass
class JacobianConfig:
    centering: bool = False
    dense_unknowns: int = 600


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    object: ObjectConfig = field(default_factory=ObjectConfig)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    grippers: List[GripperConfig] = field(default_factory=list)
    camera: CameraConfig = field(default_factory=CameraConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    servo: ServoConfig = field(default_factory=ServoConfig)
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)
    waypoints: WaypointConfig = field(default_factory=WaypointConfig)
    dt: float = 0.05
    max_steps: int = 600
    stop_rmse: float = 0.0
    seed: Optional[int] = None
    ground_truth: str = "arap"
    snapshot_every: int = 0
    base_dir: str = field(default=".", repr=False, compare=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ImproperlyConfigured("dt must be positive")
        if self.max_steps < 0:
            raise ImproperlyConfigured("max_steps must be >= 0")
        if not self.grippers:
            raise ImproperlyConfigured("a scenario needs at least one gripper")
        if self.ground_truth not in GROUND_TRUTH_MODELS:
            raise ImproperlyConfigured(
                "ground_truth must be one of {}".format(GROUND_TRUTH_MODELS)
            )
        count = len(self.grippers)
        scripts = [self.waypoints.initial] + list(self.waypoints.targets)
        for script in scripts:
            for segment in script:
                if len(segment.twists) != count:
                    raise ImproperlyConfigured(
                        "segment has {} twists for {} grippers".format(
                            len(segment.twists), count
                        )
                    )

    @property
    def effective_seed(self):
        return DEFAULT_SEED if self.seed is None else self.seed

    @property
    def axis_mask(self):
        """``(m, 6)`` boolean mask, or ``None`` when every axis is on."""
        if all(g.axis_mask is None for g in self.grippers):
            return None
        return np.array(
            [
                [True] * 6 if g.axis_mask is None else list(g.axis_mask)
                for g in self.grippers
            ],
            dtype=bool,
        )


_NESTED = {
    "object": ObjectConfig,
    "lattice": LatticeConfig,
    "camera": CameraConfig,
    "tracker": TrackerConfig,
    "servo": ServoConfig,
    "jacobian": JacobianConfig,
}


def _build(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ImproperlyConfigured(
            "section {} must be a mapping".format(section)
        )
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ImproperlyConfigured(
            "unknown key(s) in {}: {}".format(section, ", ".join(unknown))
        )
    try:
        return cls(**data)
    except TypeError as error:
        raise ImproperlyConfigured("{}: {}".format(section, error))


def _segments(data, section):
    return [_build(Segment, item, section) for item in data or ()]


def scenario_from_dict(data, base_dir="."):
    """Build a :class:`ScenarioConfig` from parsed YAML.

    :raises: :class:`~lattice_servo.exceptions.ImproperlyConfigured` on
             unknown keys or invalid values.
    """
    if not isinstance(data, dict):
        raise ImproperlyConfigured("scenario must be a mapping")
    data = dict(data)
    known = {f.name for f in dataclasses.fields(ScenarioConfig)} - {
        "base_dir"
    }
    unknown = sorted(set(data) - known)
    if unknown:
        raise ImproperlyConfigured(
            "unknown scenario key(s): {}".format(", ".join(unknown))
        )
    kwargs = {
        name: _build(cls, data.pop(name, None), name)
        for name, cls in _NESTED.items()
    }
    kwargs["grippers"] = [
        _build(GripperConfig, item, "grippers")
        for item in data.pop("grippers", None) or ()
    ]
    waypoints = data.pop("waypoints", None) or {}
    unknown = sorted(set(waypoints) - {"initial", "targets", "settle_steps"})
    if unknown:
        raise ImproperlyConfigured(
            "unknown key(s) in waypoints: {}".format(", ".join(unknown))
        )
    kwargs["waypoints"] = WaypointConfig(
        initial=_segments(waypoints.get("initial"), "waypoints.initial"),
        targets=[
            _segments(script, "waypoints.targets")
            for script in waypoints.get("targets") or ()
        ],
        settle_steps=waypoints.get("settle_steps", 10),
    )
    try:
        return ScenarioConfig(base_dir=base_dir, **kwargs, **data)
    except TypeError as error:
        raise ImproperlyConfigured(str(error))


def load_scenario(path):
    if not os.path.isfile(path):
        raise ImproperlyConfigured("scenario file not found: {}".format(path))
    with open(path) as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as error:
            raise ImproperlyConfigured(
                "malformed scenario file {}: {}".format(path, error)
            )
    return scenario_from_dict(data, os.path.dirname(os.path.abspath(path)))


def scenario_to_dict(scenario):
    data = dataclasses.asdict(scenario)
    data.pop("base_dir")
    return _plain_tree(data)


def _plain_tree(data):
    if isinstance(data, dict):
        return {key: _plain_tree(value) for key, value in data.items()}
    if isinstance(data, (tuple, list)):
        return [_plain_tree(item) for item in data]
    if isinstance(data, np.generic):
        return data.item()
    return data


def dump_scenario(scenario, path):
    lattice_io.atomic_write(
        path,
        yaml.safe_dump(scenario_to_dict(scenario), sort_keys=False),
    )


def box_surface(size, spacing):
    """Points on the faces of a box centred at the origin, with outward
    normals. Faces are sampled at cell centres, so no point is shared."""
    size = np.asarray(size, dtype=float)
    half = size / 2.0
    points, normals = [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        count_u = max(int(round(size[u] / spacing)), 1)
        count_v = max(int(round(size[v] / spacing)), 1)
        grid_u = (np.arange(count_u) + 0.5) / count_u * size[u] - half[u]
        grid_v = (np.arange(count_v) + 0.5) / count_v * size[v] - half[v]
        uu, vv = np.meshgrid(grid_u, grid_v, indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((uu.size, 3))
            face[:, u] = uu.ravel()
            face[:, v] = vv.ravel()
            face[:, axis] = sign * half[axis]
            normal = np.zeros((uu.size, 3))
            normal[:, axis] = sign
            points.append(face)
            normals.append(normal)
    return PointCloud(np.concatenate(points), np.concatenate(normals))


def build_template(cfg, base_dir="."):
    """Object cloud with outward normals, placed at the object pose."""
    if cfg.kind == "file":
        path = cfg.template
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        cloud = lattice_io.read_cloud(path)
    else:
        cloud = box_surface(cfg.size, cfg.sample_spacing)
    pose = cfg.pose
    normals = None if cloud.normals is None else pose.apply_vectors(
        cloud.normals
    )
    return PointCloud(pose.apply(cloud.points), normals)


def _twist(linear=(0.0, 0.0, 0.0), angular=(0.0, 0.0, 0.0)):
    return [float(v) for v in tuple(linear) + tuple(angular)]


def _symmetric_segment(steps, dt, axis, angle_deg, inward=0.0, length_axis=0):
    """Grippers at both ends rotate by ``-angle/2`` and ``+angle/2`` about
    ``axis`` and move ``inward`` toward each other, over ``steps`` steps."""
    rate = np.radians(angle_deg) / 2.0 / (steps * dt)
    speed = inward / (steps * dt)
    left_angular, right_angular = np.zeros(3), np.zeros(3)
    left_angular[axis], right_angular[axis] = -rate, rate
    left_linear, right_linear = np.zeros(3), np.zeros(3)
    left_linear[length_axis], right_linear[length_axis] = speed, -speed
    return Segment(
        steps,
        [
            _twist(left_linear, left_angular),
            _twist(right_linear, right_angular),
        ],
    )


def _end_grippers(size, axis_mask=None):
    half = size[0] / 2.0
    return [
        GripperConfig(position=(-half, 0.0, 0.0), axis_mask=axis_mask),
        GripperConfig(position=(half, 0.0, 0.0), axis_mask=axis_mask),
    ]


def _scenario(name, kind, size, dims, grippers, targets, **overrides):
    partial = overrides.pop("servoed_regions", None)
    gain = PARTIAL_GAIN if partial else FULL_GAIN
    return ScenarioConfig(
        name=name,
        object=ObjectConfig(kind=kind, size=size),
        lattice=LatticeConfig(dims=dims, servoed_regions=partial),
        grippers=grippers,
        servo=ServoConfig(k_p=gain),
        waypoints=WaypointConfig(
            initial=overrides.pop("initial", []), targets=targets
        ),
        stop_rmse=overrides.pop("stop_rmse", 0.003),
        **overrides,
    )


def make_scenario_library(dt=0.05):
    """Built-in desk-scale servoing tasks.

    Cables (15x3x3 lattice), sheets (8x8x3) and blocks (8x4x4) held by two
    grippers at their ends, plus the flat-crossing sheet task in a direct
    and a waypoint version.

    :rtype: list
    :returns: :class:`ScenarioConfig` instances, in a fixed order.
    """
    in_plane_mask = (True, True, False, False, False, True)
    translation_mask = (True, True, True, False, False, False)
    steps = 30

    cable = dict(kind="cable", size=CABLE_SIZE, dims=(15, 3, 3))
    sheet = dict(kind="sheet", size=SHEET_SIZE, dims=(8, 8, 3))
    block = dict(kind="block", size=BLOCK_SIZE, dims=(8, 4, 4))

    in_plane_bend = [_symmetric_segment(steps, dt, 2, 40.0, inward=0.02)]
    sheet_bend = [_symmetric_segment(steps, dt, 1, 30.0, inward=0.01)]
    block_bend = [_symmetric_segment(steps, dt, 1, 40.0, inward=0.015)]
    block_twist = [_symmetric_segment(steps, dt, 0, 30.0)]
    lift = Segment(
        steps,
        [_twist(), _twist(linear=(0.0, 0.0, 0.03 / (steps * dt)))],
    )

    down = _symmetric_segment(steps, dt, 1, -30.0, inward=0.01)
    quarter = np.radians(15.0) / (steps * dt)
    left_up = Segment(steps, [_twist(angular=(0, -quarter, 0)), _twist()])
    right_up = Segment(steps, [_twist(), _twist(angular=(0, quarter, 0))])

    library = [
        _scenario(
            "t1_1",
            grippers=_end_grippers(CABLE_SIZE, in_plane_mask),
            targets=[in_plane_bend],
            **cable,
        ),
        _scenario(
            "t1_2",
            grippers=_end_grippers(CABLE_SIZE, in_plane_mask),
            targets=[in_plane_bend],
            servoed_regions=[(0.2, 0.8)],
            **cable,
        ),
        _scenario(
            "t1_3",
            grippers=_end_grippers(CABLE_SIZE),
            targets=[[_symmetric_segment(steps, dt, 1, 40.0, inward=0.02)]],
            **cable,
        ),
        _scenario(
            "t2_1",
            grippers=_end_grippers(SHEET_SIZE),
            targets=[sheet_bend],
            **sheet,
        ),
        _scenario(
            "t2_2",
            grippers=_end_grippers(SHEET_SIZE),
            targets=[sheet_bend],
            servoed_regions=[(0.2, 0.4), (0.6, 0.8)],
            **sheet,
        ),
        _scenario(
            "t2_3",
            grippers=_end_grippers(SHEET_SIZE, translation_mask),
            targets=[[lift]],
            servoed_regions=[(0.375, 0.625)],
            **sheet,
        ),
        _scenario(
            "t3_1",
            grippers=_end_grippers(BLOCK_SIZE),
            targets=[block_bend],
            **block,
        ),
        _scenario(
            "t3_3",
            grippers=_end_grippers(BLOCK_SIZE),
            targets=[block_twist],
            **block,
        ),
        _scenario(
            "t3_4",
            grippers=_end_grippers(BLOCK_SIZE),
            targets=[block_twist + block_bend],
            **block,
        ),
        _scenario(
            "flat_direct",
            grippers=_end_grippers(SHEET_SIZE),
            initial=[down],
            targets=[[left_up, left_up, right_up, right_up]],
            **sheet,
        ),
        _scenario(
            "flat_waypoints",
            grippers=_end_grippers(SHEET_SIZE),
            initial=[down],
            targets=[[left_up], [left_up, right_up], [right_up]],
            **sheet,
        ),
    ]
    return library


def library_scenario(name):
    for scenario in make_scenario_library():
        if scenario.name == name:
            return scenario
    raise ImproperlyConfigured("unknown scenario: {}".format(name))
