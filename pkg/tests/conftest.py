import numpy as np
import pytest
from hypothesis import strategies as st

from boxkit.geometry import Box


def box_strategy(lo=-50.0, hi=50.0, min_side=0.05, max_side=30.0):
    coord = st.floats(lo, hi, allow_nan=False, allow_infinity=False)
    side = st.floats(min_side, max_side, allow_nan=False, allow_infinity=False)
    return st.builds(Box, coord, coord, side, side)


def corners_box(x1, y1, x2, y2):
    return Box.from_corners(x1, y1, x2, y2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool | None, text: str) -> str:
    status = "INFO" if passed is None else "PASS" if passed else "FAIL"
    line = f"criterion {number}: {status}  {text}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
