"""
Reading and writing run artifacts
"""

from .artifacts import (
    REPORT_SCHEMA,
    RunArtifacts,
    read_profiles,
    read_report,
    read_snapshot,
    write_profiles,
    write_report,
    write_snapshot,
)

__all__ = [
    "REPORT_SCHEMA",
    "RunArtifacts",
    "read_profiles",
    "read_report",
    "read_snapshot",
    "write_profiles",
    "write_report",
    "write_snapshot",
]
