# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Errors raised by lattice-servo."""


class LatticeServoError(Exception):
    """Base class for every error raised by this package."""


class ImproperlyConfigured(LatticeServoError, ValueError):
    """A scenario, config file or command-line value is unusable."""


class EmptyInputError(LatticeServoError, ValueError):
    def __init__(self, message="empty input"):
        super().__init__(message)


class InsufficientPointsError(LatticeServoError, ValueError):
    def __init__(self, message="insufficient points"):
        super().__init__(message)


class DimensionMismatchError(LatticeServoError, ValueError):
    """Arrays handed to an operation do not agree in shape."""


class DegenerateGeometryError(LatticeServoError, ValueError):
    """Zero extent, collinear neighbourhoods or ill-conditioned stencils."""


class EmbeddingError(LatticeServoError, ValueError):
    """A point could not be located inside any tetrahedron.

    :type message: str
    :param message: Human readable description.

    :type index: int
    :param index: Index of the offending point in the embedded cloud.
    """

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class DisconnectedLatticeError(LatticeServoError, ValueError):
    def __init__(self, message="disconnected lattice"):
        super().__init__(message)


class UnderConstrainedError(LatticeServoError, RuntimeError):
    def __init__(self, message="under-constrained"):
        super().__init__(message)


class RankDeficientError(LatticeServoError, RuntimeError):
    """A block of the linearized system could not be inverted.

    :type block: str
    :param block: Name of the singular block, ``"H_ff"`` or ``"schur"``.
    """

    def __init__(self, block, message=None):
        super().__init__(
            message or "rank-deficient partition ({})".format(block)
        )
        self.block = block


class SolverDivergenceError(LatticeServoError, RuntimeError):
    """An iterative solve produced non-finite positions."""
