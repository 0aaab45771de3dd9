import numpy as np
import pytest

from nna.body import builtin_capsule_proxy
from nna.neural import engine as E


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow benchmark tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _f64_engine():
    """Verification precision and the per-op finite guard, restored per test."""
    E.set_default_dtype(np.float64)
    E.set_check_finite(True)
    yield
    E.set_default_dtype(np.float64)
    E.set_check_finite(True)


@pytest.fixture(scope="session")
def proxy():
    return builtin_capsule_proxy()


@pytest.fixture(scope="session")
def small_proxy():
    return builtin_capsule_proxy(n_segments_per_limb=4, radial_resolution=10)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_capture(tmp_path_factory):
    from nna.dataset import SyntheticSceneSpec, generate_synthetic

    root = tmp_path_factory.mktemp("capture") / "cap"
    spec = SyntheticSceneSpec(n_frames=3, n_views=4, resolution=48, seed=3,
                              proxy_segments=4, proxy_radial=10)
    return generate_synthetic(spec, str(root))
