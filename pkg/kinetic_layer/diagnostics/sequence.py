"""
Windowed geometric-decay bounds for nonnegative sequences.

With ``A_i = max(a_i, ..., a_(i+k))``, the recursion
``a_(i+1+k) <= A_i / 8 + D`` implies, for i >= k + 1, the envelope
``A_i <= 8^-floor(i / (k+1)) * max(A_0, ..., A_k) + (8 + k) / 7 * D``. With a geometric
drift ``C eta^(i+k+1)`` in place of D (0 <= eta < 1, eta^(k+1) >= 1/4) the
constant term becomes ``2 C (8 + k) / 7 * eta^(i+k)``.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ValidationError

SLACK = 1e-12


@dataclass
class SequenceMonitor:
    """History a_i >= 0 with window length k and drift term."""

    k: int = 0
    history: List[float] = field(default_factory=list)
    D: float = 0.0
    eta: Optional[float] = None
    C: float = 0.0

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError(f"Window length must be nonnegative, got {self.k}")
        if any(a < 0 for a in self.history):
            raise ValidationError("Sequence entries must be nonnegative")
        if self.eta is not None and not (0.0 <= self.eta < 1.0 and self.eta ** (self.k + 1) >= 0.25):
            raise ValidationError(f"Geometric drift needs 0 <= eta < 1 and eta^(k+1) >= 1/4, got eta={self.eta}")

    def append(self, value: float) -> None:
        if value < 0:
            raise ValidationError(f"Sequence entries must be nonnegative, got {value}")
        self.history.append(float(value))

    def window_max(self, i: int) -> float:
        return max(self.history[i : i + self.k + 1])

    def drift(self, i: int) -> float:
        """Additive term of the recursion step producing a_(i+1+k)."""
        if self.eta is None:
            return self.D
        return self.C * self.eta ** (i + self.k + 1)

    def initial_max(self) -> float:
        """max(A_0, ..., A_k), which is max(a_0, ..., a_2k) over the available history."""
        return max(self.history[: 2 * self.k + 1])

    def envelope(self, i: int) -> float:
        """Bound on A_i, valid for i >= k + 1."""
        k = self.k
        head = 0.125 ** (i // (k + 1)) * self.initial_max()
        if self.eta is None:
            return head + (8.0 + k) / 7.0 * self.D
        return head + 2.0 * self.C * (8.0 + k) / 7.0 * self.eta ** (i + k)


@dataclass
class SequenceClassification:
    hypothesis_holds: bool
    envelope_holds: bool
    hypothesis_violations: List[int]
    envelope_violations: List[int]
    envelope: List[float]

    @property
    def label(self) -> str:
        if not self.hypothesis_holds:
            return "not contractive"
        return "contractive" if self.envelope_holds else "envelope violated"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "hypothesis_violations": self.hypothesis_violations,
            "envelope_violations": self.envelope_violations,
        }


def sequence_bound(monitor: SequenceMonitor) -> SequenceClassification:
    """Check the recursion along the history and, where it holds, the envelope.

    Raises:
        ValidationError: if the history is not longer than k + 1.
    """

    a = monitor.history
    k = monitor.k
    if len(a) <= k + 1:
        raise ValidationError(f"History of length {len(a)} is too short for window k={k}")

    hypothesis_violations = [
        i
        for i in range(len(a) - k - 1)
        if a[i + 1 + k] > (monitor.window_max(i) / 8.0 + monitor.drift(i)) * (1.0 + SLACK)
    ]

    windows = range(k + 1, len(a) - k)
    envelope = [monitor.envelope(i) for i in windows]
    envelope_violations = [
        i for i, bound in zip(windows, envelope) if monitor.window_max(i) > bound * (1.0 + SLACK)
    ]

    return SequenceClassification(
        hypothesis_holds=not hypothesis_violations,
        envelope_holds=not envelope_violations,
        hypothesis_violations=hypothesis_violations,
        envelope_violations=envelope_violations,
        envelope=envelope,
    )


def classify_history(history: Sequence[float], k_max: int = 8, D: float = 0.0) -> Tuple[Optional[int], SequenceClassification]:
    """Smallest window k <= k_max for which the history satisfies the recursion with drift D."""

    history = [float(a) for a in history]
    last: Optional[SequenceClassification] = None
    for k in range(min(k_max, len(history) - 2) + 1):
        result = sequence_bound(SequenceMonitor(k=k, history=history, D=D))
        if result.hypothesis_holds:
            return k, result
        last = result

    if last is None:
        raise ValidationError(f"History of length {len(history)} is too short to classify")
    return None, last


def history_summary(histories: Sequence[Sequence[float]], k_max: int = 8) -> List[Dict[str, Any]]:
    """Classify several histories (e.g. one per continuation step); short ones are skipped."""

    summary = []
    for history in histories:
        if len(history) < 2 or not np.all(np.isfinite(history)):
            continue
        k, result = classify_history(history, k_max=k_max)
        summary.append({"k": k, **result.to_dict()})
    return summary
