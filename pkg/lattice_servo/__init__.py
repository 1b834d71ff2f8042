# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Lattice-based tracking and shape servoing of elastic objects."""

import logging
import os

import pkg_resources

try:
    __version__ = pkg_resources.get_distribution("lattice-servo").version
except pkg_resources.DistributionNotFound:  # pragma: NO COVER
    __version__ = "0.0.0"

# Seed used when neither a scenario nor the command line supplies one.
DEFAULT_SEED = int(os.getenv("LATTICE_SERVO_SEED", "0"))

logging.getLogger(__name__).addHandler(logging.NullHandler())
