import numpy as np
import pytest
import torch

from derainfield import rainsim

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """A 32x32, 4-view rainy scene exported to disk and loaded back."""
    out = tmp_path_factory.mktemp("scene32")
    config = rainsim.RainSimConfig(height=32, width=32, cameras=4, density=10.0, seed=3)
    data = rainsim.generate_scene(config, out)
    return out, data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed_setup = report.when == "setup" and not report.passed
    if report.when == "call" or failed_setup:
        detail = dict(item.user_properties).get("detail", "")
        verdict = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        line = f"{verdict}  {marker.args[0]}" + (f"  ({detail})" if detail else "")
        item.config._criteria.append(line)
        print("\n" + line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for line in config._criteria:
            terminalreporter.write_line(line)
