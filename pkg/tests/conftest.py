import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from osteo_ssl.phantom import PhantomSpec, generate_phantom  # noqa: E402


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    """12 subjects at 128 px; manifest path."""
    out = tmp_path_factory.mktemp("phantom_small")
    return generate_phantom(PhantomSpec(n_subjects=12, image_size=128, seed=3), out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """``record(criterion, ok, detail)`` prints one verdict line, then asserts ``ok``."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"[{k}] {'PASS' if ok else 'FAIL'}  {detail}")
