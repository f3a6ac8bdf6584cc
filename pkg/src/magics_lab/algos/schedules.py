"""Step-size schedules for the critic and actor timescales."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LearningRateSchedule:
    """``a`` (constant) or ``a / (k + b) ** p`` (polynomial) at iteration ``k``."""

    kind: str = "constant"
    a: float = 1e-3
    b: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.a <= 0:
            raise ValueError("schedule scale must be positive")
        if self.kind == "polynomial" and (self.b <= 0 or self.p <= 0):
            raise ValueError("polynomial schedule needs b > 0 and p > 0")

    def __call__(self, k):
        if self.kind == "constant":
            return self.a + 0.0 * k
        return self.a / (k + self.b) ** self.p

    @property
    def square_summable_not_summable(self) -> bool:
        return self.kind == "polynomial" and 0.5 < self.p <= 1.0

    def scaled(self, factor: float) -> "LearningRateSchedule":
        return LearningRateSchedule(self.kind, self.a * factor, self.b, self.p)

    @classmethod
    def from_config(cls, value) -> "LearningRateSchedule":
        """A bare number is a constant rate; a table gives ``kind``, ``a``, ``b``, ``p``."""
        if isinstance(value, (int, float)):
            return cls("constant", float(value))
        return cls(**{k: (float(v) if k != "kind" else v) for k, v in dict(value).items()})


def is_faster_timescale(slow: LearningRateSchedule, fast: LearningRateSchedule) -> bool:
    """True when ``slow(k) / fast(k) -> 0``, i.e. slow = o(fast)."""
    if slow.kind == "constant":
        return False
    if fast.kind == "constant":
        return True
    return slow.p > fast.p
