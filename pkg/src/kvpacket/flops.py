"""Analytic operation counting for the serving-time preparation phase.

Matmuls report ``2*m*n*k`` into whichever meter is active, under the meter's
current category. Realignment reports one op per rotated key element.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict

_active_meter: contextvars.ContextVar["FlopsMeter | None"] = contextvars.ContextVar(
    "kvpacket_flops_meter", default=None
)

FORWARD = "forward"
SELECTION = "selection"
REALIGN = "realign"
CATEGORIES = (REALIGN, FORWARD, SELECTION)


class MeterStateError(RuntimeError):
    pass


class FlopsMeter:
    """Accumulates counts per category while active (``with meter: ...``)."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)
        self._category = FORWARD
        self._token = None
        self.closed = False

    def __enter__(self) -> "FlopsMeter":
        if self._token is not None:
            raise MeterStateError("meter already active")
        self._token = _active_meter.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_meter.reset(self._token)
        self._token = None
        self.closed = True

    @property
    def active(self) -> bool:
        return self._token is not None

    @contextlib.contextmanager
    def category(self, name: str):
        if name not in CATEGORIES:
            raise ValueError(f"unknown FLOPs category {name!r}")
        prev, self._category = self._category, name
        try:
            yield self
        finally:
            self._category = prev

    def add(self, n: int, category: str | None = None) -> None:
        self.counts[category or self._category] += int(n)

    def reading(self, category: str) -> int:
        if not self.active and not self.closed:
            raise MeterStateError("meter was never run")
        return int(self.counts.get(category, 0))


def current() -> FlopsMeter | None:
    return _active_meter.get()


@contextlib.contextmanager
def suspended():
    """Run a block without counting (e.g. query prefill during a metered run)."""
    token = _active_meter.set(None)
    try:
        yield
    finally:
        _active_meter.reset(token)


def count_matmul(m: int, n: int, k: int) -> None:
    meter = _active_meter.get()
    if meter is not None:
        meter.add(2 * m * n * k)


def count_realign(n_elements: int) -> None:
    meter = _active_meter.get()
    if meter is not None:
        meter.add(n_elements, REALIGN)
