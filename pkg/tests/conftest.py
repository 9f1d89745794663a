from __future__ import annotations

import numpy as np
import pytest

from kvpacket.model import ModelConfig, ModelWeights


def central_diff(f, arr: np.ndarray, eps: float = 1e-6, n: int | None = None, seed: int = 0):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (in place)."""
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if n is not None and n < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=n, replace=False)
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[int(i)] = (hi - lo) / (2 * eps)
    return out


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig(vocab_size=64, d_model=32, n_layers=2, n_heads=2, head_dim=16, ffn_dim=64,
                       max_position=1024)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg) -> ModelWeights:
    return ModelWeights.init(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def task_cfg() -> ModelConfig:
    # untrained but wide enough for the synthetic task vocabulary
    return ModelConfig(vocab_size=512, d_model=32, n_layers=2, n_heads=2, head_dim=16, ffn_dim=64)


@pytest.fixture(scope="session")
def task_weights(task_cfg) -> ModelWeights:
    return ModelWeights.init(task_cfg, seed=1)


# acceptance criteria report one line each in the terminal summary
_CRITERIA: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    _CRITERIA[number] = (bool(ok), title, detail)
    print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:>2} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")
