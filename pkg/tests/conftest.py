import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import alcsim.dynamics as _dyn  # noqa: E402
import alcsim.scenario as _scn  # noqa: E402

# smallest multiplier seen by every closed-loop integration in this session
DUAL_MINIMA: list[tuple[str, float]] = []
# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: list[str] = []

_original_integrate = _dyn.integrate


@functools.wraps(_original_integrate)
def _recording_integrate(*args, **kwargs):
    traj = _original_integrate(*args, **kwargs)
    DUAL_MINIMA.append((traj.mode, traj.derived.get("dual_min", float("inf"))))
    return traj


_dyn.integrate = _recording_integrate
_scn.integrate = _recording_integrate


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
    if DUAL_MINIMA:
        worst = min(v for _, v in DUAL_MINIMA)
        verdict = "PASS" if worst >= 0 else "FAIL"
        terminalreporter.write_line(
            f"criterion 8 (whole session): {verdict} - min multiplier {worst:.3g} over "
            f"all {len(DUAL_MINIMA)} integrations")


def pytest_sessionfinish(session, exitstatus):
    if DUAL_MINIMA and min(v for _, v in DUAL_MINIMA) < 0 and exitstatus == 0:
        session.exitstatus = 1


@pytest.fixture(scope="session")
def two_bus():
    from alcsim.netmodel import build_incidence
    net, _ = _scn.load_case("two_bus")
    return net, build_incidence(net)
