import numpy as np
import pytest

from ndd.synthbench import SceneSpec, generate_scene, loop_trajectory, planted_loop_sequence

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and (rep.failed or rep.skipped)):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA.append((marker.args[0], marker.args[1], status))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{status}] criterion {num}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark_sequence():
    """Seed-fixed 200-frame sequence with 30 reverse revisits, noise 0.05 m."""
    return planted_loop_sequence(SceneSpec(seed=7, noise_sigma=0.05), loop_trajectory(200, 30, revisit="reverse"))


@pytest.fixture(scope="session")
def small_world():
    return generate_scene(SceneSpec(seed=3, area=200.0, num_structures=40, points_per_scan=8000))
