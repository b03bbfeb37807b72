import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=8, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tokenizer():
    from gpla.text import Tokenizer
    return Tokenizer()


@pytest.fixture(scope="session")
def small_samples():
    """A few rendered episodes shared by the cheap model tests."""
    from gpla import synthenv
    episodes = synthenv.generate_dataset(6, seed=3)
    return synthenv.SampleSet.from_episodes(episodes)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, name = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    results = item.config.acceptance_results
    prev = results.get(number)
    # a criterion split over several tests fails if any part fails
    if prev is None or prev[1] == "PASS":
        results[number] = (name, status, detail if prev is None else f"{prev[2]}; {detail}".strip("; "))


def pytest_terminal_summary(terminalreporter, config):
    results = config.acceptance_results
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, status, detail = results[number]
        line = f"{status} criterion {number}: {name}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
