import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mhmtl.tasks import TaskSpec  # noqa: E402

# filled by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def four_tasks():
    return [
        TaskSpec("seg", "Segmentation", num_classes=2),
        TaskSpec("cls", "Classification", num_classes=4),
        TaskSpec("det", "Detection"),
        TaskSpec("kp", "Regression", num_keypoints=2),
    ]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
