import numpy as np
import pytest

from narxmpc.nnarx import (FfnnLayer, FfnnParams, contraction_margin,
                           make_model)


def random_params(rng, N=2, m=1, p=1, hidden=(8,), activation="tanh",
                  scale=0.4, target_margin=None):
    n = N * (m + p)
    layers = []
    prev = n
    for h in hidden:
        layers.append(FfnnLayer(
            W=scale * rng.standard_normal((h, m)),
            U=scale * rng.standard_normal((h, prev)),
            b=scale * rng.standard_normal(h),
            activation=activation,
        ))
        prev = h
    params = FfnnParams(layers,
                        U0=scale * rng.standard_normal((p, prev)),
                        b0=scale * rng.standard_normal(p))
    if target_margin is not None:
        r = contraction_margin(params)
        if r > 0:
            params.U0 = params.U0 * (target_margin / r)
    return params


def random_model(rng, N=2, m=1, p=1, hidden=(8,), activation="tanh",
                 scale=0.4, target_margin=None):
    return make_model(N, random_params(rng, N, m, p, hidden, activation,
                                       scale, target_margin))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
