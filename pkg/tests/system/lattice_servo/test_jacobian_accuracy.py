# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import itertools
import unittest

from lattice_servo.cli import check_jacobian

TOLERANCE = 0.05


class TestFiniteDifferenceAgreement(unittest.TestCase):
    def test_full_partition(self):
        for dims, fd_step in itertools.product(
            ((4, 3, 3), (4, 4, 3)), (1e-5, 1e-4, 1e-3)
        ):
            with self.subTest(dims=dims, fd_step=fd_step):
                row = check_jacobian(dims=dims, fd_step=fd_step)
                self.assertLess(row["rel_frob_error"], TOLERANCE)

    def test_partial_partition(self):
        row = check_jacobian(partition="partial")
        self.assertGreater(row["n_f"], 0)
        self.assertLess(row["rel_frob_error"], TOLERANCE)

    def test_centered_fit(self):
        for partition in ("full", "partial"):
            with self.subTest(partition=partition):
                row = check_jacobian(centering=True, partition=partition)
                self.assertLess(row["rel_frob_error"], TOLERANCE)
