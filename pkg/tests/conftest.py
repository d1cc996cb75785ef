import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")


@pytest.fixture(scope="session")
def smoke_data(tmp_path_factory):
    """40 training scenes (32/8 split) and 50 held-out scenes from another seed."""
    from srvit.dataset import load_dataset, write_dataset
    from srvit.fields import SyntheticSceneSpec

    root = tmp_path_factory.mktemp("smoke")
    write_dataset(root / "train", 40, SyntheticSceneSpec(seed=0))
    write_dataset(root / "heldout", 50, SyntheticSceneSpec(seed=1))
    train, val = load_dataset(root / "train").split(0.2)
    held = load_dataset(root / "heldout")
    return train, val, held
