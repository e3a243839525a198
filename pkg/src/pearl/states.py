"""FTL-internal page states and the transition monitor.

The observable model has five states (Empty, V1, I1, V2, I2); the FTL
refines I1 into UI1 (update-invalidated), TI1 (trim-invalidated) and RI1
(relocation-invalidated).  The monitor projects every internal change onto
the five-state graph and asserts it is one of the allowed edges.
"""

from __future__ import annotations

from enum import Enum

from .errors import PearlError


class PageState(Enum):
    EMPTY = "empty"
    V1 = "v1"
    UI1 = "ui1"
    TI1 = "ti1"
    RI1 = "ri1"
    V2 = "v2"
    I2 = "i2"

    @property
    def observable(self) -> str:
        if self in (PageState.UI1, PageState.TI1, PageState.RI1):
            return "I1"
        return {
            PageState.EMPTY: "Empty",
            PageState.V1: "V1",
            PageState.V2: "V2",
            PageState.I2: "I2",
        }[self]


# Edges of the page state transition graph (observable projection).
ALLOWED_EDGES = {
    ("Empty", "V1"),
    ("Empty", "V2"),
    ("V1", "I1"),
    ("I1", "V2"),
    ("I1", "Empty"),
    ("V2", "I2"),
    ("I2", "Empty"),
    ("V1", "Empty"),
}


class TransitionViolation(PearlError):
    pass


class TransitionMonitor:
    """Records every observable page state transition and checks it."""

    def __init__(self, strict: bool = True):
        self.strict = strict
        self.events = []
        self.violations = []

    def record(self, ppn: int, old: PageState, new: PageState, reason: str):
        a, b = old.observable, new.observable
        if a == b:
            return
        self.events.append((ppn, a, b, reason))
        if (a, b) not in ALLOWED_EDGES:
            msg = f"page {ppn}: {a} -> {b} ({reason}) is not an allowed transition"
            self.violations.append(msg)
            if self.strict:
                raise TransitionViolation(msg)
