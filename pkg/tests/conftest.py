# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import os

import pytest

# The acceptance runs take minutes; they only run when asked for.
SYSTEM_TESTS_ENV = "LATTICE_SERVO_SYSTEM_TESTS"


# `pytest` calls this hook once the tests have been collected.
def pytest_collection_modifyitems(config, items):
    if os.environ.get(SYSTEM_TESTS_ENV, "") == "1":
        return
    skip = pytest.mark.skip(
        reason="{} is not set to 1".format(SYSTEM_TESTS_ENV)
    )
    system_dir = os.path.join("tests", "system")
    for item in items:
        if system_dir in str(item.fspath):
            item.add_marker(skip)
