from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k"



@pytest.fixture(scope="session")
def ml100k():
    if not (ML100K / "u.data").is_file():
        pytest.skip("MovieLens-100K not present; run scripts/fetch_ml100k.py")
    from edgecast.dataset import load_dataset

    return load_dataset(ML100K, "ml-100k")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
