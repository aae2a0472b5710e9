import math

import pytest
from hypothesis import settings

from nanodeloc.config import preset_params

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k:2d}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture
def nominal():
    """Parameters of the lowest-occupancy dataset."""
    return preset_params("paper-39dB")


@pytest.fixture
def ideal():
    """Recoil-free, force-free oscillator."""
    from nanodeloc.params import PhysicalParams

    return PhysicalParams(omega_m=2 * math.pi * 56.5e3, gamma_qba=0.0, eta=1.0)
