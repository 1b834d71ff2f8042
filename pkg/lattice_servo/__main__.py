# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import sys

from lattice_servo.cli import main

sys.exit(main())
