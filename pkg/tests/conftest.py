import numpy as np
import pytest

from agglearn.data import GranularDataset, Schema, SyntheticSpec, generate_synthetic
from agglearn.encoding import FeatureIndexMap

TOY_CSV = """f1,f2,f3,click,sale
3,A,aef,0,0
3,A,z3f,1,0
7,B,4eh,0,0
8,B,aef,1,1
8,B,66e,0,0
"""


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text(TOY_CSV)
    return path


def random_dataset(rng, cardinalities, n, rate=0.3):
    X = np.column_stack([rng.integers(0, d, size=n) for d in cardinalities])
    return GranularDataset(X, (rng.random(n) < rate).astype(np.int8),
                           (rng.random(n) < rate / 3).astype(np.int8))


@pytest.fixture
def small_synthetic():
    spec = SyntheticSpec([4, 5, 6], 3000, seed=11)
    data, truth, schema = generate_synthetic(spec)
    return data, truth, schema, FeatureIndexMap(schema.cardinality)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
