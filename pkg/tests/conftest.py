import numpy as np
import pytest

from robusta.core import Modality, SegmentedModalityFeatures, VideoBag

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[number] = (title, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome = _criteria[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  criterion {number:2d}: {title}")


def make_bag(vid="v0", label=0, m=4, d_audio=3, d_visual=5, seed=0, truth=None, audio=True, visual=True):
    rng = np.random.default_rng(seed)
    if truth is None:
        truth = np.zeros(m, dtype=np.uint8)
        if label:
            truth[rng.integers(m)] = 1
    return VideoBag(
        id=vid,
        label=label,
        audio=SegmentedModalityFeatures(Modality.AUDIO, rng.normal(size=(m, d_audio))) if audio else None,
        visual=SegmentedModalityFeatures(Modality.VISUAL, rng.normal(size=(m, d_visual))) if visual else None,
        segment_truth=truth,
    )


@pytest.fixture
def bag_factory():
    return make_bag


@pytest.fixture(scope="session")
def desk_run():
    """Desk-scale benchmark and full sweep per seed, built once per session."""
    from robusta.pipeline import build_benchmark, sweep_benchmark

    cache = {}

    def get(seed):
        if seed not in cache:
            bench = build_benchmark(seed, threads=1)
            cache[seed] = (bench, sweep_benchmark(bench, threads=1))
        return cache[seed]

    return get
