"""Shared fixtures: random checkpoint builders and acceptance reporting."""

from __future__ import annotations

import numpy as np
import pytest

from mergeforge import Checkpoint, write_checkpoint


def random_checkpoint(
    rng: np.random.Generator,
    shapes: dict[str, tuple[int, ...]],
    scale: float = 1.0,
    dtype: str = "F32",
) -> Checkpoint:
    arrays = {
        name: (scale * rng.standard_normal(shape)).astype(np.float32)
        for name, shape in shapes.items()
    }
    return Checkpoint.from_arrays(arrays, {name: dtype for name in arrays})


def write_random_checkpoint(path, rng, shapes, scale=1.0, dtype="F32") -> Checkpoint:
    ck = random_checkpoint(rng, shapes, scale, dtype)
    write_checkpoint(ck, str(path))
    return ck


SMALL_SHAPES = {"embed.w": (4, 8), "layer.0.w": (16,), "head.b": (3, 2, 2)}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per acceptance test, printed in the
# terminal summary so it survives output capture


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid or getattr(report, "when", "call") != "call":
                continue
            name = nodeid.split("::")[-1].removeprefix("test_").removesuffix("_criterion")
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((name, verdict))
    if lines:
        terminalreporter.write_line("")
        for name, verdict in lines:
            terminalreporter.write_line(f"[ACCEPTANCE] {name}: {verdict}")
