"""Diminishing step-size and regularisation sequences."""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["Schedule", "ScheduleError"]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Power-law sequences ``gamma(k) = gamma_bar (k+1)^-c1`` and ``alpha(k) = alpha_bar (k+1)^-c2``.

    The iteration counter starts at ``k = 0``; the sequences are evaluated at
    ``k + 1`` so the first step uses ``gamma_bar`` and ``alpha_bar``.
    The exponents must satisfy ``0 < c2 < c1`` and ``c1 + c2 < 1``.
    """

    gamma_bar: float
    alpha_bar: float
    c1: float
    c2: float

    def __post_init__(self):
        errors = self.violations(self.gamma_bar, self.alpha_bar, self.c1, self.c2)
        if errors:
            raise ScheduleError("; ".join(errors))
        for name in ("gamma_bar", "alpha_bar", "c1", "c2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @staticmethod
    def violations(gamma_bar, alpha_bar, c1, c2) -> list[str]:
        out = []
        if not gamma_bar > 0:
            out.append(f"gamma_bar must be positive, got {gamma_bar}")
        if not alpha_bar > 0:
            out.append(f"alpha_bar must be positive, got {alpha_bar}")
        if not 0 < c2 < c1:
            out.append(f"need 0 < c2 < c1, got c1={c1}, c2={c2}")
        if not c1 + c2 < 1:
            out.append(f"need c1 + c2 < 1, got c1 + c2 = {c1 + c2}")
        return out

    def gamma_at(self, k: int) -> float:
        return self.gamma_bar * (k + 1.0) ** -self.c1

    def alpha_at(self, k: int) -> float:
        return self.alpha_bar * (k + 1.0) ** -self.c2
