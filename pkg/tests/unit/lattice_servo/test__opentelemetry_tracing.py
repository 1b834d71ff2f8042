# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

import importlib
import sys
import unittest

try:
    from opentelemetry import trace as trace_api
    from opentelemetry.trace.status import StatusCode
except ImportError:
    pass

from lattice_servo import _opentelemetry_tracing
from lattice_servo.exceptions import SolverDivergenceError

from tests._helpers import HAS_OPENTELEMETRY_INSTALLED, OpenTelemetryBase

BASE_ATTRIBUTES = {"servo.engine": "lattice_servo"}


# Skip all of these tests if we don't have OpenTelemetry
if HAS_OPENTELEMETRY_INSTALLED:

    class TestNoTracing(unittest.TestCase):
        def setUp(self):
            self._temp_opentelemetry = sys.modules["opentelemetry"]

            sys.modules["opentelemetry"] = None
            importlib.reload(_opentelemetry_tracing)

        def tearDown(self):
            sys.modules["opentelemetry"] = self._temp_opentelemetry
            importlib.reload(_opentelemetry_tracing)

        def test_no_trace_call(self):
            with _opentelemetry_tracing.trace_call("Test") as no_span:
                self.assertIsNone(no_span)

    class TestTracing(OpenTelemetryBase):
        def test_trace_call(self):
            extra_attributes = {"attribute1": "value1", "step": 3}

            expected_attributes = dict(BASE_ATTRIBUTES)
            expected_attributes.update(extra_attributes)

            with _opentelemetry_tracing.trace_call(
                "servo.jacobian", extra_attributes
            ) as span:
                span.set_attribute("after_setup_attribute", 1)

            expected_attributes["after_setup_attribute"] = 1

            span_list = self.ot_exporter.get_finished_spans()
            self.assertEqual(len(span_list), 1)
            span = span_list[0]
            self.assertEqual(span.kind, trace_api.SpanKind.INTERNAL)
            self.assertEqual(dict(span.attributes), expected_attributes)
            self.assertEqual(span.name, "LatticeServo.servo.jacobian")
            self.assertEqual(span.status.status_code, StatusCode.OK)

        def test_prefix_is_not_doubled(self):
            with _opentelemetry_tracing.trace_call("LatticeServo.Test"):
                pass

            self.assertSpanAttributes(
                "LatticeServo.Test", attributes=BASE_ATTRIBUTES
            )

        def test_trace_error(self):
            with self.assertRaises(SolverDivergenceError):
                with _opentelemetry_tracing.trace_call("world.step"):
                    raise SolverDivergenceError("iterate is not finite")

            span_list = self.ot_exporter.get_finished_spans()
            self.assertEqual(len(span_list), 1)
            span = span_list[0]
            self.assertEqual(span.kind, trace_api.SpanKind.INTERNAL)
            self.assertEqual(dict(span.attributes), BASE_ATTRIBUTES)
            self.assertEqual(span.name, "LatticeServo.world.step")
            self.assertEqual(span.status.status_code, StatusCode.ERROR)
            self.assertEqual(span.events[0].name, "exception")
