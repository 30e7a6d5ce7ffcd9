import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    from acai.rng import Rng

    return Rng(1234)


def naive_conv(x, k, b):
    """Zero-padded 3x3 cross-correlation, one output value at a time."""
    n, cin, h, w = x.shape
    cout = k.shape[0]
    xp = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, cout, h, w))
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for xx in range(w):
                    out[i, o, y, xx] = (xp[i, :, y:y + 3, xx:xx + 3] * k[o]).sum() + b[o]
    return out
