# Copyright 2026 The lattice-servo Authors
#
# Use of this source code is governed by a BSD-style
# license that can be found in the LICENSE file or at
# https://developers.google.com/open-source/licenses/bsd

"""Manages OpenTelemetry trace creation and handling"""

from contextlib import contextmanager

from lattice_servo.exceptions import LatticeServoError

try:
    from opentelemetry import trace
    from opentelemetry.trace.status import Status, StatusCode

    HAS_OPENTELEMETRY_INSTALLED = True
except ImportError:
    HAS_OPENTELEMETRY_INSTALLED = False

SPAN_PREFIX = "LatticeServo."


@contextmanager
def trace_call(name, extra_attributes=None):
    """Open a span around one pipeline stage.

    :type name: str
    :param name: Stage name, prefixed with ``LatticeServo.`` unless it
                 already is.

    :type extra_attributes: dict
    :param extra_attributes: (Optional) attributes merged over the base ones.
    """
    if not HAS_OPENTELEMETRY_INSTALLED:
        # Empty context manager. Callers check whether the yielded value
        # is None or a span.
        yield None
        return

    tracer = trace.get_tracer(__name__)

    # Set base attributes that we know for every trace created
    attributes = {"servo.engine": "lattice_servo"}

    if extra_attributes:
        attributes.update(extra_attributes)

    if not name.startswith(SPAN_PREFIX):
        name = SPAN_PREFIX + name

    with tracer.start_as_current_span(
        name, kind=trace.SpanKind.INTERNAL, attributes=attributes
    ) as span:
        try:
            span.set_status(Status(StatusCode.OK))
            yield span
        except LatticeServoError as error:
            span.set_status(Status(StatusCode.ERROR))
            span.record_exception(error)
            raise
