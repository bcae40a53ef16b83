import numpy as np
import pytest

from xbmarket.core import ModelParams, ReinitSpec, validate_params
from xbmarket.flow import OrderStream


@pytest.fixture
def small_params():
    return validate_params(ModelParams(n=100))


def stream_of(events, n=None):
    """OrderStream from (kind, size) pairs under uniform flow."""
    kind = [k for k, _ in events]
    size = [s for _, s in events]
    p = validate_params(ModelParams(n=n or max(len(events), 1)))
    return OrderStream.from_events(p, kind, size)


POINT = ReinitSpec(point=(7, 8, 9, 10))
