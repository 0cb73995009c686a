"""Acceptance suite: one named experiment per criterion.

Each test runs the shipped config, prints a single PASS/FAIL line and
asserts both the numerical checks and the wall-clock budget.
"""

import time
from pathlib import Path

import pytest

from calderon_lab import cli
from calderon_lab import experiments as ex

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# (number, config stem, runtime budget in seconds)
CRITERIA = [
    (1, "criterion01_gauge_order", 60),
    (2, "criterion02_gauge_traces", 30),
    (3, "criterion03_amplitude_decay", 60),
    (4, "criterion04_remainder_decay", 300),
    (5, "criterion05_carleman", 120),
    (6, "criterion06_null_contraction", 30),
    (7, "criterion07_decomposition", 60),
    (8, "criterion08_projection", 30),
    (9, "criterion09_oracle_reconstruction", 300),
    (10, "criterion10_boundary_moment", 600),
    (11, "criterion11_forward_order", 120),
]


def _report(capsys, number, ok, text):
    with capsys.disabled():
        print(f"\ncriterion {number:02d}: {'PASS' if ok else 'FAIL'} {text}")


@pytest.mark.parametrize("number,stem,budget", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(number, stem, budget, capsys):
    cfg = cli.load_config(CONFIGS / f"{stem}.toml")
    t0 = time.perf_counter()
    try:
        result = ex.run_experiment(cfg)
    except ex.NumericalError as exc:
        _report(capsys, number, False, f"numerical error: {exc}")
        raise
    wall = time.perf_counter() - t0
    ok = result.passed and wall < budget
    checks = "; ".join(c.describe() for c in result.checks)
    _report(capsys, number, ok, f"[{checks}] wall {wall:.1f}s (budget {budget}s)")
    assert result.passed, result.summary()
    assert wall < budget
