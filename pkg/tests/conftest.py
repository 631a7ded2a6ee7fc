import numpy as np
import pytest

from meshdir.phantom import PhantomSpec, generate_phantom
from meshdir.tetmesh import generate_mesh
from meshdir.volumes import build_problem


@pytest.fixture(scope="session")
def mini_case():
    """Small registration case: 24^3 grid at 6 mm, halved sphere radius."""
    return generate_phantom(
        PhantomSpec(dims=(24, 24, 24), spacing=(6.0, 6.0, 6.0), rng_seed=3,
                    support_radius_mm=54.0)
    )


@pytest.fixture(scope="session")
def standard_case():
    """Default-resolution case: 48^3 at 3 mm."""
    return generate_phantom(PhantomSpec(rng_seed=3))


@pytest.fixture(scope="session")
def mini_problem(mini_case):
    return build_problem(
        mini_case.source_image,
        mini_case.target_image,
        mini_case.source_labels,
        mini_case.target_labels,
        guidance_max_points=400,
    )


@pytest.fixture(scope="session")
def mini_mesh(mini_problem):
    return generate_mesh(mini_problem, n_points=80, rng_seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
