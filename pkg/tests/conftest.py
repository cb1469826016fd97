from __future__ import annotations

import numpy as np
import pytest

from xptlab.encoder import EncoderParams, ModelConfig
from xptlab.synthlang import SplitSizes, build_pair_task, gen_base_corpus

TINY = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32)
TINY_SIZES = SplitSizes(train=96, val=40, test=40, analysis=40)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return TINY


@pytest.fixture(scope="session")
def tiny_data():
    return build_pair_task(gen_base_corpus(240, 0), 0, n_languages=3, sizes=TINY_SIZES)


@pytest.fixture()
def tiny_model() -> EncoderParams:
    return EncoderParams.init(TINY, 0)


# --- acceptance report --------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture()
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
