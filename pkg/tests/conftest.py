from __future__ import annotations

import time
from functools import lru_cache

import pytest

from vmusprod import musprod
from vmusprod.toy import toy_dataset

OVERFIT = musprod.TrainConfig(epochs=300, target_accuracy=0.95, seed=0)

# name -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@lru_cache(maxsize=None)
def toy_pieces(n: int = 8, n_bars: int = 2, seed: int = 0):
    return tuple(toy_dataset(n, n_bars, seed))


@lru_cache(maxsize=None)
def trained_stage(role: str, ablations: tuple = (), conditional: bool = True):
    """(model, seconds) for one stage overfit on the toy corpus; cached per session."""
    stage = musprod.StageConfig(role, conditional=conditional, ablations=ablations)
    t0 = time.perf_counter()
    model = musprod.train_stage(role, toy_pieces(), OVERFIT, stage)
    return model, time.perf_counter() - t0


def trained_models(roles, ablations: tuple = (), conditional_chord: bool = True) -> dict:
    return {r: trained_stage(r, ablations, conditional_chord if r == "chord" else True)[0] for r in roles}


@pytest.fixture(scope="session")
def pieces():
    return toy_pieces()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split(".")[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
