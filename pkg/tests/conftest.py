from pathlib import Path

import pytest

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"


@pytest.fixture
def problems_dir() -> Path:
    return PROBLEMS
