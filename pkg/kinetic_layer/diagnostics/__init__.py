"""
Verification diagnostics: identities, norms and sequence bounds
"""

from .identities import (
    IdentityReport,
    conservation_suite,
    moment_identity_suite,
    operator_suite,
    stored_field_suite,
)
from .norms import WeightedNorms, weighted_norms
from .sequence import SequenceMonitor, classify_history, history_summary, sequence_bound

__all__ = [
    "IdentityReport",
    "conservation_suite",
    "moment_identity_suite",
    "operator_suite",
    "stored_field_suite",
    "WeightedNorms",
    "weighted_norms",
    "SequenceMonitor",
    "classify_history",
    "history_summary",
    "sequence_bound",
]
