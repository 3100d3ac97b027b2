from __future__ import annotations

from dataclasses import dataclass


@dataclass
class Check:
    """One invariant evaluation: ``value`` is compared against ``tolerance``."""

    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    @property
    def status(self) -> str:
        return "pass" if self.passed else "FAIL"

    def line(self) -> str:
        extra = f"  [{self.detail}]" if self.detail else ""
        return f"{self.status:4s}  {self.name}: value={self.value:.4g} tol={self.tolerance:.4g}{extra}"


def at_most(name: str, value: float, tolerance: float, detail: str = "") -> Check:
    return Check(name, float(value), float(tolerance), bool(value <= tolerance), detail)
