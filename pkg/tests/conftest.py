import pytest


@pytest.fixture(scope="session")
def toy_small():
    from focalattn.stackio import toy_samples

    return toy_samples(seed=11, count=6, size=32, frames=5, kappa=2.0)
