import numpy as np
import pytest
import torch

from raydose.phantom import PhantomParams, generate_phantom


def tiny_phantom_params(shape=(8, 32, 32)) -> PhantomParams:
    """Phantom parameters scaled down so test volumes stay small."""
    return PhantomParams(
        shape=shape,
        ptv_radius_mm=(8.0, 11.0),
        ptv_z_radius_mm=(5.0, 7.0),
        oar_radius_mm=(4.5, 6.5),
        penumbra_sigma_mm=4.0,
        aperture_margin_mm=2.0,
    )


@pytest.fixture(scope="session")
def tiny_volume():
    return generate_phantom(0, tiny_phantom_params())


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps timings stable and math reproducible across test orderings.
    torch.set_num_threads(2)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
