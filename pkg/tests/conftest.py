import numpy as np
import pytest

from affinemask.net import build_backbone, load_arch

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def smallnet():
    return load_arch("smallnet")


@pytest.fixture
def frozen_bb(smallnet):
    bb = build_backbone(smallnet, seed=7)
    bb.freeze()
    return bb


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_run():
    """The committed desk protocol on mds-3, every variant; about a minute and a half."""
    from affinemask.experiment import DESK, run_comparison

    return run_comparison("mds-3", p=DESK)
