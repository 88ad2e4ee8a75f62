from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_cfg():
    from steerlab import dit

    return dit.ModelConfig(n_layers=3, d=16, heads=2, patch=4, d_text=8, image_size=8, t_train=20, t_sample=4)


@dataclass
class ChainRuns:
    dirs: tuple[Path, Path]
    seconds: tuple[float, float]


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """The tiny config's full CLI chain, run twice into separate directories."""
    from chain import run_chain

    base = tmp_path_factory.mktemp("tiny")
    t = [sum(run_chain(base / name).values()) for name in ("a", "b")]
    return ChainRuns((base / "a", base / "b"), (t[0], t[1]))


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(number, name, passed, detail)`` records one report line and returns ``passed``."""

    def record(number: int | str, name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {str(number):>3}: {name}" + (f" | {detail}" if detail else "")
        ACCEPTANCE[str(number)] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
            terminalreporter.write_line(ACCEPTANCE[k])
