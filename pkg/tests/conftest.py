from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from uwsplat.scene import CameraFrame, look_at

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_camera(eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0), width=16, height=12, f=14.0, **kw) -> CameraFrame:
    R, T = look_at(np.asarray(eye, float), np.asarray(target, float))
    return CameraFrame(f, f, width / 2, height / 2, R, T, width, height, **kw)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 10-frame 32x24 dataset shared by the slower integration tests."""
    from uwsplat.datasets import SyntheticSceneSpec, generate_dataset

    out = tmp_path_factory.mktemp("tiny_ds")
    spec = SyntheticSceneSpec(gaussian_count=60, frames=10, width=32, height=24, seed=3)
    generate_dataset(spec, out)
    return out


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _ACCEPTANCE[marker.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split("-")[1])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {status}  {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): end-to-end acceptance criterion")
