import numpy as np
import pytest

from eclip.encoders import EncoderSpec, ModelParams
from eclip.training import Batch


def make_model(seed=0, activation="tanh", text_dim=5, image_dim=7, hidden=(6,), out=4, tau=0.1):
    model = ModelParams.init(
        EncoderSpec(text_dim, hidden, out, activation),
        EncoderSpec(image_dim, hidden, out, activation),
        seed=seed,
        tau_init=tau,
    )
    return model


def make_batch(rng, model, n, n_catalogs=None, seq=0):
    n_catalogs = n_catalogs or max(1, n // 2)
    tshape = (n, seq, model.text_spec.input_dim) if seq else (n, model.text_spec.input_dim)
    return Batch(
        rng.normal(size=tshape),
        rng.normal(size=(n, model.image_spec.input_dim)),
        rng.integers(0, n_catalogs, size=n).tolist(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
