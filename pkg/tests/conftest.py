import numpy as np
import pytest


def rand_sym(rng, d, scale=1.0):
    g = rng.standard_normal((d, d))
    return 0.5 * scale * (g + g.T)


def rand_psd(rng, d, scale=1.0, ridge=0.0):
    g = rng.standard_normal((d, d))
    return scale * (g @ g.T) / d + ridge * np.eye(d)


def rand_pd(rng, d, scale=1.0):
    return rand_psd(rng, d, scale=scale, ridge=0.1 * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
