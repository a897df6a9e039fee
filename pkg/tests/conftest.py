import numpy as np
import pytest

from ftrobust import model as vit

SMALL = vit.ModelConfig(depth=2, embed_dim=16, heads=2, patch_size=4, image_size=8, channels=3, num_classes=5)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_params():
    return vit.init_params(SMALL, 0)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0, 1, (6, 3, 8, 8))


# ---------------------------------------------------------------- acceptance report

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if not report.passed:
        entry["ok"] = False
    entry["notes"] += [v for k, v in item.user_properties if k == "detail" and v not in entry["notes"]]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] criterion {n}: {e['title']}"
        if e["notes"]:
            line += " | " + "; ".join(e["notes"])
        terminalreporter.write_line(line)
