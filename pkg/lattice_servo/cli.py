# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""``lattice-servo`` command line."""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import pandas as pd

from lattice_servo import DEFAULT_SEED, __version__
from lattice_servo import io as lattice_io
from lattice_servo.arap import (
    LocalGlobalSolver,
    assemble_laplacian,
    optimal_rotations,
)
from lattice_servo.closed_loop import read_log, run_closed_loop, summarize
from lattice_servo.exceptions import ImproperlyConfigured, LatticeServoError
from lattice_servo.geometry import PointCloud, RigidTransform
from lattice_servo.jacobian import (
    NodePartition,
    analytic_jacobian,
    finite_difference_jacobian,
    relative_error,
)
from lattice_servo.lattice import build_lattice, tetrahedralize
from lattice_servo.scenarios import (
    dump_scenario,
    load_scenario,
    make_scenario_library,
)
from lattice_servo.tracking import track_directory

_logger = logging.getLogger(__name__)

PROG = "lattice-servo"
_AXES = {"x": 0, "y": 1, "z": 2}
JACOBIAN_COLUMNS = [
    "dims",
    "n_g",
    "n_s",
    "n_f",
    "fd_step_m",
    "rel_frob_error",
    "assembly_ms",
    "solve_ms",
]


def _triple(text, cast):
    values = [cast(part) for part in text.split(",")]
    if len(values) != 3:
        raise argparse.ArgumentTypeError("expected three values")
    return tuple(values)


def _dims(text):
    return _triple(text, int)


def _point(text):
    return _triple(text, float)


def _grips(text):
    """``x-:4,x+:4`` -> ``[(0, False, 4), (0, True, 4)]``."""
    grips = []
    for item in text.split(","):
        face, _, count = item.partition(":")
        if len(face) != 2 or face[0] not in _AXES or face[1] not in "+-":
            raise argparse.ArgumentTypeError(
                "grip {!r} is not <axis><sign>:<count>".format(item)
            )
        try:
            count = int(count)
        except ValueError:
            raise argparse.ArgumentTypeError(
                "grip {!r} has no node count".format(item)
            )
        grips.append((_AXES[face[0]], face[1] == "+", count))
    return grips


def face_nodes(lattice, axis, upper, count):
    """The ``count`` nodes of a lattice face closest to the face centre."""
    grid = lattice.grid_coords
    level = lattice.dims[axis] - 1 if upper else 0
    on_face = np.flatnonzero(grid[:, axis] == level)
    if count > len(on_face):
        raise ImproperlyConfigured(
            "face has {} nodes, {} requested".format(len(on_face), count)
        )
    points = lattice.rest_nodes[on_face]
    distance = np.linalg.norm(points - points.mean(axis=0), axis=1)
    return on_face[np.argsort(distance, kind="stable")[:count]]


def check_jacobian(
    dims=(4, 3, 3),
    grips=((0, False, 4), (0, True, 4)),
    fd_step=1e-4,
    centering=False,
    partition="full",
    bend_deg=20.0,
    extent=(0.12, 0.06, 0.06),
):
    """Analytic against finite-difference ``J_sg`` on a bent box lattice.

    The last grip group is turned by ``bend_deg`` about the lattice y axis
    and the lattice settled with every gripped node held; both Jacobians
    are evaluated at that equilibrium.

    :rtype: dict
    :returns: One row with the columns of ``JACOBIAN_COLUMNS``.
    """
    corners = np.array(
        [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float
    ) * np.asarray(extent)
    lattice = build_lattice(PointCloud(corners), dims, margin=0.0)
    mesh = tetrahedralize(lattice)
    system = assemble_laplacian(mesh)

    groups = [face_nodes(lattice, *grip) for grip in grips]
    gripped = np.concatenate(groups)
    if len(np.unique(gripped)) != len(gripped):
        raise ImproperlyConfigured("grip groups overlap")
    moved = groups[-1]
    center = mesh.rest_nodes[moved].mean(axis=0)
    turn = RigidTransform.from_rotvec((0.0, bend_deg, 0.0), degrees=True)
    hard = mesh.rest_nodes[gripped].copy()
    hard[-len(moved):] = turn.apply(mesh.rest_nodes[moved] - center) + center
    solver = LocalGlobalSolver(system, hard_indices=gripped)
    shape = solver.solve(
        mesh.rest_nodes, hard_positions=hard, tol=1e-12, max_iter=2000
    ).shape

    if partition == "full":
        part = NodePartition.full(gripped, mesh.n_nodes)
    else:
        top = np.flatnonzero(lattice.grid_coords[:, 2] == dims[2] - 1)
        part = NodePartition.partial(gripped, top, mesh.n_nodes)
    jac, timing = analytic_jacobian(
        system, shape, optimal_rotations(system, shape), part, centering
    )
    reference = finite_difference_jacobian(
        system, shape, part, step=fd_step
    )
    return {
        "dims": "x".join(str(d) for d in dims),
        "n_g": len(part.gripped),
        "n_s": len(part.servoed),
        "n_f": len(part.free),
        "fd_step_m": fd_step,
        "rel_frob_error": relative_error(jac.j_sg, reference),
        "assembly_ms": timing.assembly_ms,
        "solve_ms": timing.solve_ms,
    }


def _simulate(args):
    scenario = load_scenario(args.scenario)
    seed = args.seed if args.seed is not None else scenario.seed
    scenario = dataclasses.replace(
        scenario,
        seed=DEFAULT_SEED if seed is None else seed,
        max_steps=(
            scenario.max_steps if args.max_steps is None else args.max_steps
        ),
    )
    os.makedirs(args.output_dir, exist_ok=True)
    log = run_closed_loop(
        scenario, output_dir=args.output_dir, timings=args.timings
    )
    summary = log.summary() if len(log) else {}
    for key, value in summary.items():
        print("{}: {}".format(key, value))
    if log.aborted:
        raise ImproperlyConfigured(
            "{} aborted: {}".format(scenario.name, log.aborted)
        )
    return 0


def _track(args):
    os.makedirs(args.output_dir, exist_ok=True)
    report = track_directory(
        args.cloud_dir,
        args.template,
        args.output_dir,
        anchors_path=args.anchors,
        dims=args.dims,
        margin=args.margin,
        camera_center=np.asarray(args.camera),
        timings=args.timings,
    )
    print("frames: {}".format(len(report)))
    print("mean rmse_m: {:.6g}".format(report["rmse_m"].mean()))
    return 0


def _check_jacobian(args):
    row = check_jacobian(
        dims=args.dims,
        grips=args.grips,
        fd_step=args.fd_step,
        centering=args.centering == "on",
        partition=args.partition,
        bend_deg=args.bend_deg,
    )
    if not args.timings:
        row["assembly_ms"] = row["solve_ms"] = 0.0
    lattice_io.write_frame(
        args.output, pd.DataFrame([row], columns=JACOBIAN_COLUMNS)
    )
    print("rel_frob_error: {:.6g}".format(row["rel_frob_error"]))
    return 0


def _list_scenarios(args):
    for scenario in make_scenario_library():
        print(
            "{}\t{}\t{}".format(
                scenario.name,
                scenario.object.kind,
                "x".join(str(d) for d in scenario.lattice.dims),
            )
        )
        if args.write:
            os.makedirs(args.write, exist_ok=True)
            dump_scenario(
                scenario,
                os.path.join(args.write, "{}.yaml".format(scenario.name)),
            )
    return 0


def _report(args):
    for key, value in summarize(read_log(args.log)).items():
        print("{}: {}".format(key, value))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Lattice-based deformable object tracking and shape "
        "servoing.",
    )
    parser.add_argument(
        "--version", action="version", version="%(prog)s " + __version__
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument(
        "--no-timings",
        dest="timings",
        action="store_false",
        help="write zeros in wall-clock columns",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="run a scenario file")
    simulate.add_argument("scenario")
    simulate.add_argument("--output-dir", default=".")
    simulate.add_argument("--max-steps", type=int, default=None)
    simulate.set_defaults(handler=_simulate)

    track = commands.add_parser("track", help="track recorded clouds")
    track.add_argument("cloud_dir")
    track.add_argument("template")
    track.add_argument("--anchors", default=None)
    track.add_argument("--dims", type=_dims, default=(8, 8, 3))
    track.add_argument("--margin", type=float, default=0.01)
    track.add_argument("--camera", type=_point, default=(0.0, 0.0, 0.0))
    track.add_argument("--output-dir", default=".")
    track.set_defaults(handler=_track)

    jacobian = commands.add_parser(
        "check-jacobian", help="compare J_sg with finite differences"
    )
    jacobian.add_argument("--dims", type=_dims, default=(4, 3, 3))
    jacobian.add_argument("--grips", type=_grips, default="x-:4,x+:4")
    jacobian.add_argument("--fd-step", type=float, default=1e-4)
    jacobian.add_argument("--centering", choices=["on", "off"], default="off")
    jacobian.add_argument(
        "--partition", choices=["full", "partial"], default="full"
    )
    jacobian.add_argument("--bend-deg", type=float, default=20.0)
    jacobian.add_argument("--output", default="jacobian_check.csv")
    jacobian.set_defaults(handler=_check_jacobian)

    listing = commands.add_parser(
        "list-scenarios", help="list the built-in scenarios"
    )
    listing.add_argument(
        "--write", default=None, help="also write them as YAML files here"
    )
    listing.set_defaults(handler=_list_scenarios)

    report = commands.add_parser("report", help="summarize a servo log")
    report.add_argument("log")
    report.set_defaults(handler=_report)
    return parser


def main(argv=None):
    """Run the command line; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (LatticeServoError, OSError) as error:
        _logger.debug("command failed", exc_info=True)
        print("{}: error: {}".format(PROG, error), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
