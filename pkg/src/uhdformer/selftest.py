"""Built-in self-test: a quick invariant sweep and the full acceptance suite."""

from __future__ import annotations

import time
from contextlib import contextmanager
from typing import Callable

from . import acceptance as A
from . import tensor as T

LEVELS = ("quick", "full")
FAULTS = ("gelu", "conv2d", "layer_norm", "softmax")


@contextmanager
def injected_fault(name: str | None):
    """Corrupt one backward formula while the block runs (negative control)."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(FAULTS)}")
    saved = set(T._FAULTS)
    T._FAULTS.add(name)
    try:
        yield
    finally:
        T._FAULTS.clear()
        T._FAULTS.update(saved)


def quick(seed: int = 0) -> list[A.CheckResult]:
    """Every invariant family at reduced trial counts; no training."""
    res = [A.check_selection_oracle(seed=seed)]
    res += A.check_gradients(seed)
    res += A.check_residual_identities(trials=5, seed=seed)
    res += A.check_structural(seed)
    res.append(A.check_param_budget())
    res += A.check_metrics(seed)
    return res


def run(level: str = "quick", seed: int = 0, fault: str | None = None,
        emit: Callable[[str], None] = print) -> list[A.CheckResult]:
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    start = time.perf_counter()
    with injected_fault(fault):
        results = quick(seed) if level == "quick" else A.run_all(seed)
    for r in results:
        emit(r.line())
    failed = [r.name for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s"
    emit(summary if not failed else f"{summary}; FAILED: {', '.join(failed)}")
    return results
