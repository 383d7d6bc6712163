import os
import time

import numpy as np
import pytest

from ila_lab.desk import DESK_VIT
from ila_lab.pretrain import PretrainConfig, pretrained_backbone

# criterion name -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def desk_backbone(tmp_path_factory):
    """Backbone pretrained once per session on the disjoint source task.

    ``ILA_LAB_TEST_CACHE`` points at a directory whose cached backbone (if
    its key matches) is reused instead.
    """
    cache = os.environ.get("ILA_LAB_TEST_CACHE") or tmp_path_factory.mktemp("backbone-cache")
    start = time.perf_counter()
    arrays = pretrained_backbone(DESK_VIT, PretrainConfig(), cache)
    TIMINGS["pretrain_s"] = time.perf_counter() - start
    return arrays


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
