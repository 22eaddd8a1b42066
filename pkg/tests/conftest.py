import os
from pathlib import Path

import numpy as np
import pytest

from tailguard.dataset import RawSeries

DATA_DIR = Path(os.environ.get("TAILGUARD_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))

_criteria: list[tuple[int, str, str]] = []
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _criteria.append((marker.args[0], marker.args[1], status))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, status in sorted(_criteria):
        terminalreporter.write_line(f"[{status}] criterion {n:>2}: {title}")
        for note in _notes.get(n, []):
            terminalreporter.write_line(f"      {note}")


@pytest.fixture
def criterion_note(request):
    """Attach a measured value to the criterion line in the summary."""
    marker = request.node.get_closest_marker("criterion")
    n = marker.args[0] if marker else 0
    return lambda text: _notes.setdefault(n, []).append(text)


def synthetic_series(n_rows=400, n_features=2, seed=0) -> RawSeries:
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows)
    cols = [np.sin(2 * np.pi * t / 24 * (1 + 0.2 * m)) + 0.1 * rng.standard_normal(n_rows)
            for m in range(n_features)]
    return RawSeries(np.stack(cols, axis=1), tuple(f"f{m}" for m in range(n_features)))


def write_csv(path, series: RawSeries, with_date=True):
    with open(path, "w") as fh:
        head = (["date"] if with_date else []) + list(series.feature_names)
        fh.write(",".join(head) + "\n")
        for i, row in enumerate(series.values):
            cells = ([f"2016-07-01 {i:05d}"] if with_date else []) + [repr(float(v)) for v in row]
            fh.write(",".join(cells) + "\n")
    return path


@pytest.fixture
def tiny_csv(tmp_path):
    return write_csv(tmp_path / "tiny.csv", synthetic_series())
