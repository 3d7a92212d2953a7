import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# Four municipalities on a line, 600 s apart except B-C (900 s).
HAND_FLOWS = [("A", "A", 80), ("A", "B", 20), ("B", "B", 50), ("B", "A", 10), ("B", "C", 2),
              ("C", "C", 30), ("C", "D", 10), ("D", "D", 40), ("D", "C", 5)]
HAND_DIST = [("A", "B", 600), ("A", "C", 1500), ("A", "D", 2100), ("B", "C", 900),
             ("B", "D", 1500), ("C", "D", 600)]


def write_hand(root: Path, agencies=True, adjacency=False, **overrides) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"id": list("ABCD"), "name": ["Aton", "Bville", "Cburg", "Dorf"]}).to_csv(
        root / "municipalities.csv", index=False)
    pd.DataFrame(overrides.get("flows", HAND_FLOWS), columns=["origin_id", "dest_id", "count"]).to_csv(
        root / "flows.csv", index=False)
    pd.DataFrame(overrides.get("distances", HAND_DIST), columns=["id_a", "id_b", "seconds"]).to_csv(
        root / "distances.csv", index=False)
    if adjacency:
        pd.DataFrame([("A", "B"), ("B", "C"), ("C", "D")], columns=["id_a", "id_b"]).to_csv(
            root / "adjacency.csv", index=False)
    if agencies:
        rows = agencies if isinstance(agencies, list) else \
            [(m, "X" if m in "AB" else "Y", "2000Q1", "2018Q1") for m in "ABCD"]
        pd.DataFrame(rows, columns=["municipality_id", "agency_id", "from_quarter", "to_quarter"]).to_csv(
            root / "agencies.csv", index=False)
    return root


@pytest.fixture
def hand_dir(tmp_path):
    return write_hand(tmp_path / "hand")


@pytest.fixture(scope="session")
def default_world():
    from zoneforge.montecarlo import prepare_world
    from zoneforge.simgen import DGPConfig

    return prepare_world(DGPConfig())


@pytest.fixture(scope="session")
def world_data(default_world):
    from zoneforge.montecarlo import replicate_dataset

    return replicate_dataset(default_world, 0)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, title, passed, detail):
        store[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        title, passed, detail = store[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
