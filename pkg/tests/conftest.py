import sys
from pathlib import Path

import numpy as np
import pytest

from zofair.model import FunctionHandle, InProcessHandle, random_mlp
from zofair.schema import AttributeSpec, DatasetSchema

TESTS = Path(__file__).parent
ORACLES = TESTS / "oracles"
sys.path.insert(0, str(TESTS))


def oracle_cmd(name, *args):
    return [sys.executable, str(ORACLES / name), *map(str, args)]


@pytest.fixture
def small_schema():
    return DatasetSchema([
        AttributeSpec("a", 0, 9),
        AttributeSpec("b", 0, 4),
        AttributeSpec("gender", 0, 1, protected=True),
        AttributeSpec("c", 1, 6),
    ])


def protected_bit_handle(schema):
    """Confidence equals the first protected attribute, so every instance discriminates."""
    col = schema.protected_indices[0]
    return FunctionHandle(lambda x: x[:, col].astype(float), len(schema))


def constant_handle(n, value=0.7):
    return FunctionHandle(lambda x: np.full(len(x), value), n)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Trained desk benchmark: returns the config path (float32 serving)."""
    import desk as desk_mod

    return desk_mod.build(tmp_path_factory.mktemp("desk"))


@pytest.fixture
def mlp():
    return random_mlp(6, (8, 5), seed=3)


@pytest.fixture
def mlp_handle(mlp):
    return InProcessHandle(mlp)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.VERDICTS:
            terminalreporter.write_line(line)
