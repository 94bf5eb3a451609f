import numpy as np
import pytest

from hiermatch.embedder import ModelConfig
from hiermatch.params import ParamStore

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report_line(capsys):
    """Print one acceptance result line immediately and again in the session summary."""

    def emit(criterion: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def small_params():
    def make(d_raw=5, d=6, d_h=3, seed=0, gain=1.0, fusion_gain=None):
        kw = {} if fusion_gain is None else {"fusion_gain": fusion_gain}
        return ParamStore.init(d_raw, d, d_h, seed=seed, gain=gain, **kw)

    return make


@pytest.fixture
def small_cfg():
    def make(d=6, d_h=3, **flags):
        return ModelConfig(d=d, d_h=d_h, **flags)

    return make
