"""Shared fixtures and the acceptance summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from fsqkd.auth import AuthKeys
from fsqkd.simulator import generate_session, jena_night

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def night_tags():
    """Two seconds of the night benchmark, shared by session-level tests."""
    a, b, gt = generate_session(jena_night(duration=2.0, seed=7), truth=False)
    return a, b, gt


def shared_keys(nbytes: int = 4096, seed: int = 1) -> tuple[AuthKeys, AuthKeys]:
    mat = np.random.default_rng(seed).bytes(nbytes)
    return AuthKeys(mat), AuthKeys(mat)
