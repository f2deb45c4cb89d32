import numpy as np
import pytest

from logstab.illustrative import A_ILLUSTRATIVE, EPSILON, direction


def rand_matrix(seed, n, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal((n, n))


def unit(M):
    return M / np.linalg.norm(M)


def illustrative_B(t, eps=EPSILON):
    return A_ILLUSTRATIVE + eps * direction(t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
