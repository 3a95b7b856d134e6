import os

# Pin BLAS thread pools before numpy loads anywhere, so kernel results and
# timings are reproducible across the suite.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stream(rng, n_events=50, width=8, height=8, t0=0.0, t1=1.0):
    """Build a valid random event stream for property tests."""
    from evdeblur.events import EventStream

    t = np.sort(rng.uniform(t0, t1, size=n_events))
    x = rng.integers(0, width, size=n_events).astype(np.int32)
    y = rng.integers(0, height, size=n_events).astype(np.int32)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), size=n_events)
    return EventStream(t, x, y, p, t0, t1, width, height)
