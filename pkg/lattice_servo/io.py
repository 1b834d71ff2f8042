# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Reading and writing point clouds, lattices and anchor files.

Clouds are ASCII PLY or plain ``x y z`` text. An anchors file holds one
whitespace separated line per anchor and frame::

    frame anchor tx ty tz qx qy qz qw

``anchor`` is the gripper index, ``tx ty tz`` the position in metres and
``qx qy qz qw`` the orientation as a scalar-last unit quaternion. Blank
lines and ``#`` comments are ignored.
"""

import io
import os
import tempfile

import numpy as np
import pandas as pd

from lattice_servo.exceptions import ImproperlyConfigured
from lattice_servo.geometry import PointCloud, RigidTransform

_FLOAT_FORMAT = "%.9g"
ANCHOR_COLUMNS = ["frame", "anchor", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temp_path = tempfile.mkstemp(
        dir=directory, prefix=".", suffix=".tmp"
    )
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def write_frame(path, frame):
    """Write a :class:`pandas.DataFrame` as CSV, atomically."""
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=_FLOAT_FORMAT)
    atomic_write(path, buffer.getvalue())


def _parse_ply_header(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise ImproperlyConfigured("{} is not a PLY file".format(path))
    elements = []
    for number, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ImproperlyConfigured(
                    "{}: only ASCII PLY is supported".format(path)
                )
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ImproperlyConfigured(
                    "{}: property before element".format(path)
                )
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            return elements, number + 1
    raise ImproperlyConfigured("{}: missing end_header".format(path))


def read_ply(path):
    """Read an ASCII PLY file.

    :rtype: dict
    :returns: Element name mapped to a float array, one row per item and one
              column per property.
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    elements, cursor = _parse_ply_header(lines, path)
    data = {}
    for name, count, properties in elements:
        rows = lines[cursor : cursor + count]
        if len(rows) != count:
            raise ImproperlyConfigured(
                "{}: expected {} {} rows".format(path, count, name)
            )
        values = np.array(
            [row.split()[: len(properties)] for row in rows], dtype=float
        ).reshape(count, len(properties))
        data[name] = (properties, values)
        cursor += count
    return data


def read_cloud(path):
    """Read a point cloud from an ASCII PLY or whitespace ``x y z`` file."""
    if not os.path.exists(path):
        raise ImproperlyConfigured("cloud file not found: {}".format(path))
    if not path.lower().endswith(".ply"):
        values = np.loadtxt(path, dtype=float, ndmin=2, comments="#")
        if values.size and values.shape[1] < 3:
            raise ImproperlyConfigured(
                "{}: expected 'x y z' per line".format(path)
            )
        return PointCloud(values[:, :3] if values.size else values)
    elements = read_ply(path)
    if "vertex" not in elements:
        raise ImproperlyConfigured("{}: no vertex element".format(path))
    properties, values = elements["vertex"]
    try:
        points = values[:, [properties.index(axis) for axis in "xyz"]]
    except ValueError:
        raise ImproperlyConfigured(
            "{}: vertex element lacks x, y, z".format(path)
        )
    normals = None
    if all(name in properties for name in ("nx", "ny", "nz")):
        normals = values[:, [properties.index(n) for n in ("nx", "ny", "nz")]]
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(lengths > 0, lengths, 1.0)
        if not np.all(lengths > 0):
            normals = None
    return PointCloud(points, normals)


def _vertex_header(count, with_normals):
    header = ["element vertex {}".format(count)]
    header += ["property float {}".format(axis) for axis in "xyz"]
    if with_normals:
        header += ["property float {}".format(n) for n in ("nx", "ny", "nz")]
    return header


def _format_rows(values):
    return [
        " ".join(_FLOAT_FORMAT % value for value in row) for row in values
    ]


def write_cloud(path, cloud):
    """Write ``cloud`` as ASCII PLY, with normals when it has them."""
    values = cloud.points
    if cloud.has_normals:
        values = np.hstack([cloud.points, cloud.normals])
    lines = ["ply", "format ascii 1.0"]
    lines += _vertex_header(len(cloud), cloud.has_normals)
    lines.append("end_header")
    lines += _format_rows(values)
    atomic_write(path, "\n".join(lines) + "\n")


def write_lattice(path, nodes, edges):
    """Write lattice nodes as PLY vertices and tet edges as edge elements."""
    nodes = np.asarray(nodes, dtype=float)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lines = ["ply", "format ascii 1.0"]
    lines += _vertex_header(len(nodes), False)
    lines += [
        "element edge {}".format(len(edges)),
        "property int vertex1",
        "property int vertex2",
        "end_header",
    ]
    lines += _format_rows(nodes)
    lines += ["{} {}".format(i, j) for i, j in edges]
    atomic_write(path, "\n".join(lines) + "\n")


def read_lattice_nodes(path):
    """Read the node positions of a lattice PLY snapshot."""
    elements = read_ply(path)
    properties, values = elements["vertex"]
    return values[:, [properties.index(axis) for axis in "xyz"]]


def read_anchors(path):
    """Read per-frame anchor poses.

    Each line holds ``frame anchor tx ty tz qx qy qz qw``; ``#`` starts a
    comment.

    :rtype: dict
    :returns: ``{frame: {anchor: RigidTransform}}``.
    """
    if not os.path.exists(path):
        raise ImproperlyConfigured("anchors file not found: {}".format(path))
    table = pd.read_csv(
        path, sep=r"\s+", comment="#", header=None, names=ANCHOR_COLUMNS
    )
    if table.isnull().values.any():
        raise ImproperlyConfigured("{}: malformed anchor line".format(path))
    anchors = {}
    for row in table.itertuples(index=False):
        pose = RigidTransform.from_quaternion(
            [row.tx, row.ty, row.tz], [row.qx, row.qy, row.qz, row.qw]
        )
        anchors.setdefault(int(row.frame), {})[int(row.anchor)] = pose
    return anchors


def write_anchors(path, anchors):
    """Inverse of :func:`read_anchors`."""
    rows = []
    for frame in sorted(anchors):
        for anchor in sorted(anchors[frame]):
            pose = anchors[frame][anchor]
            rows.append(
                [frame, anchor, *pose.translation, *pose.quaternion]
            )
    table = pd.DataFrame(rows, columns=ANCHOR_COLUMNS)
    buffer = io.StringIO()
    table.to_csv(
        buffer, sep=" ", header=False, index=False, float_format=_FLOAT_FORMAT
    )
    atomic_write(path, buffer.getvalue())
