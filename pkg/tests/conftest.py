import numpy as np
import pytest

from monopatch.camera import Camera
from monopatch.scene import CueSpec, generate_synthetic_scene, make_scene


@pytest.fixture(scope="session")
def box_scene():
    return make_scene("box", seed=7)


@pytest.fixture(scope="session")
def exact_box_scene():
    return make_scene("box", seed=7, cues=CueSpec.exact(), sfm_noise=0.0, sfm_outliers=0.0)


@pytest.fixture(scope="session")
def plane_scene():
    return generate_synthetic_scene("plane", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def identity_camera(width=96, height=64, f=80.0, center=(0.0, 0.0, 0.0)):
    return Camera(f, f, width / 2, height / 2, width, height, np.eye(3), np.asarray(center, float))


# --------------------------------------------------------------------------- acceptance report

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    verdict = "PASS" if rep.passed else "FAIL"
    _CRITERIA[number] = f"criterion {number} ({title}): {verdict} in {rep.duration:.1f}s  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
