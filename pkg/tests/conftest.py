import numpy as np
import pytest

from nbf_lab import euler
from nbf_lab import fv_solver as fv
from nbf_lab.pod import SnapshotSet


def synthetic_field(points, mach, gas=euler.AIR):
    """Smooth, physical SI state that varies with the Mach number."""
    r = np.hypot(points[:, 0], points[:, 1])
    theta = np.arctan2(points[:, 1], points[:, 0])
    free = euler.freestream_state(mach, gas)
    p_inf = euler.pressure(free, gas)
    bump = np.exp(-(r - 1.0))
    rho = free[0] * (1.0 + 0.4 * bump * mach / 10.0)
    u = free[1] * (1.0 - 0.3 * bump * np.cos(theta) ** 2)
    v = free[1] * 0.2 * bump * np.sin(2 * theta) * (10.0 / mach)
    p = p_inf * (1.0 + bump * (mach / 10.0) ** 2)
    energy = p / (gas.gamma - 1.0) + 0.5 * rho * (u * u + v * v)
    return np.stack([rho, u, v, energy], axis=1)


def synthetic_set(machs, nr=8, ntheta=8):
    grid = fv.build_grid(nr, ntheta)
    pts = grid.points
    data = np.stack([synthetic_field(pts, m).T for m in machs], axis=-1)
    return SnapshotSet(pts.copy(), np.array(machs, dtype=np.float64), data), grid


@pytest.fixture(scope="session")
def small_set():
    return synthetic_set([10.0, 12.0, 14.0, 16.0, 18.0])[0]


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config.addinivalue_line("markers", "slow: full-scale benchmark run (minutes to an hour)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "failed": [], "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        if entry["failed"]:
            status = "FAIL"
        elif entry["ran"]:
            status = "PASS"
        else:
            status = "SKIP"
        detail = f" ({', '.join(entry['failed'])})" if entry["failed"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}{detail}")
