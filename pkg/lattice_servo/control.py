# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Proportional shape servoing on lattice nodes."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lattice_servo.exceptions import (
    DimensionMismatchError,
    ImproperlyConfigured,
)

_logger = logging.getLogger(__name__)

NUMERICAL_BLOW_UP = "numerical blow-up"


@dataclass
class ServoConfig:
    """Gains, ramp, saturations and waypoint switching.

    ``k_p`` drives translational twist components and ``k_p_rot`` the
    rotational ones; ``k_p_rot`` falls back to ``k_p``.
    """

    k_p: float = 0.1
    k_p_rot: Optional[float] = None
    ramp_steps: int = 50
    v_max: float = 0.05
    w_max: float = 0.2
    pinv_damping: float = 1e-3
    waypoint_switch_rmse: float = 0.015

    def __post_init__(self):
        if self.k_p_rot is None:
            self.k_p_rot = self.k_p
        if self.k_p <= 0 or self.k_p_rot <= 0:
            raise ImproperlyConfigured("servo gains must be positive")
        if self.v_max <= 0 or self.w_max <= 0:
            raise ImproperlyConfigured("saturations must be positive")
        if self.pinv_damping < 0:
            raise ImproperlyConfigured("pinv_damping must be non-negative")
        if self.ramp_steps < 0:
            raise ImproperlyConfigured("ramp_steps must be non-negative")


@dataclass
class ServoStatus:
    error: np.ndarray
    rmse: float
    step: int = 0
    waypoint: int = 0


@dataclass
class ServoCommand:
    """One ``(vx, vy, vz, wx, wy, wz)`` twist per gripper."""

    twists: np.ndarray
    fault: Optional[str] = None

    @classmethod
    def zeros(cls, n_grippers, fault=None):
        return cls(np.zeros((n_grippers, 6)), fault)

    @property
    def linear(self):
        return self.twists[:, :3]

    @property
    def angular(self):
        return self.twists[:, 3:]


def servo_error(current, desired, part, step=0, waypoint=0):
    """``e_s`` over the servoed nodes and its RMS value."""
    current = np.asarray(current, dtype=float)
    desired = np.asarray(desired, dtype=float)
    if current.shape != desired.shape:
        raise DimensionMismatchError("current and desired shapes differ")
    error = (current[part.servoed] - desired[part.servoed]).ravel()
    rmse = float(np.linalg.norm(error) / np.sqrt(error.size))
    return ServoStatus(error, rmse, step, waypoint)


def gain_at(gain, cfg, step):
    """Linear ramp from 0 at step 0 to ``gain`` at ``cfg.ramp_steps``."""
    if cfg.ramp_steps == 0:
        return gain
    return gain * min(step / cfg.ramp_steps, 1.0)


def damped_pinv_apply(jacobian, error, damping):
    """``(J^T J + l^2 I)^-1 J^T e``; the plain pseudoinverse when ``l = 0``."""
    if damping == 0:
        return np.linalg.pinv(jacobian) @ error
    normal = jacobian.T @ jacobian
    normal[np.diag_indices_from(normal)] += damping**2
    return np.linalg.solve(normal, jacobian.T @ error)


def expand_mask(axis_mask, n_grippers):
    """Boolean ``(n_grippers, 6)`` mask; ``None`` enables every axis."""
    if axis_mask is None:
        return np.ones((n_grippers, 6), dtype=bool)
    mask = np.asarray(axis_mask, dtype=bool)
    if mask.shape == (6,):
        mask = np.tile(mask, (n_grippers, 1))
    if mask.shape != (n_grippers, 6):
        raise DimensionMismatchError(
            "axis mask must have 6 entries per gripper"
        )
    return mask


def gripper_velocities(j_sp, status, cfg, step, axis_mask=None):
    """Twists ``v_p = -k(step) J_sp^+ e_s`` with masking and saturation.

    Disabled axes are removed from ``J_sp`` before the pseudoinverse, so the
    enabled ones take up their share, and are zero in the result. Each
    component is then clipped to ``v_max`` or ``w_max``. A non-finite result
    is logged and replaced by a zero command carrying a fault.

    :type j_sp: :class:`numpy.ndarray`
    :param j_sp: ``3 n_s x 6 m`` Jacobian.

    :type status: :class:`ServoStatus`
    :param status: Current servo error.

    :type cfg: :class:`ServoConfig`
    :param cfg: Gains and limits.

    :type step: int
    :param step: Control step, drives the gain ramp.

    :type axis_mask: :class:`numpy.ndarray`
    :param axis_mask: (Optional) enabled twist components.

    :rtype: :class:`ServoCommand`
    """
    j_sp = np.asarray(j_sp, dtype=float)
    if j_sp.shape[0] != len(status.error) or j_sp.shape[1] % 6:
        raise DimensionMismatchError(
            "J_sp is {} for an error of size {}".format(
                j_sp.shape, len(status.error)
            )
        )
    n_grippers = j_sp.shape[1] // 6
    mask = expand_mask(axis_mask, n_grippers)
    flat_mask = mask.ravel()
    gains = np.tile(
        np.repeat(
            [gain_at(cfg.k_p, cfg, step), gain_at(cfg.k_p_rot, cfg, step)], 3
        ),
        n_grippers,
    )
    try:
        with np.errstate(all="ignore"):
            twist = -gains * damped_pinv_apply(
                j_sp * flat_mask, status.error, cfg.pinv_damping
            )
    except np.linalg.LinAlgError:
        twist = np.full(6 * n_grippers, np.nan)
    twist = np.where(flat_mask, twist, 0.0)
    if not np.all(np.isfinite(twist)):
        _logger.error(
            "%s at step %d, sending zero twists", NUMERICAL_BLOW_UP, step
        )
        return ServoCommand.zeros(n_grippers, NUMERICAL_BLOW_UP)
    limits = np.tile(np.repeat([cfg.v_max, cfg.w_max], 3), n_grippers)
    twist = np.clip(twist, -limits, limits)
    return ServoCommand(twist.reshape(n_grippers, 6))


def waypoint_advance(status, waypoints, cfg):
    """Active waypoint after ``status``: advance when ``rmse`` drops strictly
    below the switch threshold, stay on the last one forever.

    :rtype: tuple
    :returns: ``(index, desired_shape)``.
    """
    if not waypoints:
        raise ValueError("waypoint list is empty")
    index = min(status.waypoint, len(waypoints) - 1)
    if status.rmse < cfg.waypoint_switch_rmse and index < len(waypoints) - 1:
        index += 1
        _logger.info(
            "waypoint %d reached at step %d (rmse %.4f m)",
            index - 1,
            status.step,
            status.rmse,
        )
    return index, waypoints[index]
