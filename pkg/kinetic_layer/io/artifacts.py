"""
Run artifacts: profiles CSV, binary field snapshot and JSON report
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import jsonschema
import numpy as np
import pandas as pd

from ..core.linear_solver import KineticField, MacroProfile
from ..diagnostics.norms import WeightedNorms
from ..utils.exceptions import ArtifactError
from ..utils.logger import get_logger

logger = get_logger(__name__)

PROFILE_COLUMNS = ["x", "a", "b1", "b2", "b3", "c", "sup_wf", "ip_nu_norm"]

SNAPSHOT_MAGIC = b"KLFIELD\x00"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = np.dtype(
    [
        ("magic", "S8"),
        ("version", "<u4"),
        ("digest", "S32"),
        ("x_count", "<u4"),
        ("v_count", "<u4"),
        ("pad", "V12"),
    ]
)

_IDENTITY = {
    "type": "object",
    "required": ["name", "computed", "target", "provenance", "tolerance", "passed"],
    "properties": {
        "name": {"type": "string"},
        "computed": {"type": "number"},
        "target": {"type": "number"},
        "provenance": {"enum": ["PAPER", "TRIVIAL", "DERIVED"]},
        "tolerance": {"type": "number", "minimum": 0},
        "passed": {"type": "boolean"},
    },
}

REPORT_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "kinetic-layer run report",
    "type": "object",
    "required": ["command", "version", "config", "grid", "operator", "identities", "passed"],
    "properties": {
        "command": {"enum": ["operator", "linear", "nonlinear", "verify"]},
        "version": {"type": "string"},
        "config": {"type": "object"},
        "grid": {
            "type": "object",
            "required": ["digest", "size", "rule", "max_radius"],
            "properties": {
                "digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                "size": {"type": "integer", "minimum": 1},
                "rule": {"enum": ["gauss", "uniform"]},
                "max_radius": {"type": "number"},
            },
        },
        "operator": {
            "type": "object",
            "required": ["c0", "kappa1", "kappa2", "nu0", "nu1"],
            "properties": {
                "c0": {"type": "number", "exclusiveMinimum": 0},
                "kappa1": {"type": "number", "exclusiveMinimum": 0},
                "kappa2": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "identities": {"type": "array", "items": _IDENTITY},
        "conservation": {"type": "array", "items": _IDENTITY},
        "solve": {"type": "object"},
        "artifacts": {"type": "object", "additionalProperties": {"type": "string"}},
        "passed": {"type": "boolean"},
    },
}


@dataclass
class RunArtifacts:
    """Paths of everything a run wrote."""

    directory: Path
    profiles: Optional[Path] = None
    snapshot: Optional[Path] = None
    report: Optional[Path] = None
    operator_cache: Optional[Path] = None

    def to_dict(self) -> Dict[str, str]:
        return {
            name: str(path)
            for name, path in (
                ("profiles", self.profiles),
                ("snapshot", self.snapshot),
                ("report", self.report),
                ("operator_cache", self.operator_cache),
            )
            if path is not None
        }


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    return value


def profiles_frame(macro: MacroProfile, norms: WeightedNorms) -> pd.DataFrame:
    columns = macro.as_columns()
    columns["sup_wf"] = norms.sup_profile
    columns["ip_nu_norm"] = norms.micro_nu_profile
    return pd.DataFrame({name: np.asarray(columns[name], dtype=float) for name in PROFILE_COLUMNS})


def write_profiles(path: Path, macro: MacroProfile, norms: WeightedNorms) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    profiles_frame(macro, norms).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote profiles to {path}")
    return path


def read_profiles(path: Path) -> pd.DataFrame:
    """Read profiles.csv, checking the fixed column schema."""

    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise ArtifactError(f"Cannot read profiles {path}: {e}") from e

    if list(frame.columns) != PROFILE_COLUMNS:
        raise ArtifactError(f"Profiles {path} have columns {list(frame.columns)}, expected {PROFILE_COLUMNS}")
    return frame


def write_snapshot(path: Path, digest: str, field: KineticField) -> Path:
    """Flat little-endian float64 dump behind a 64-byte header."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.zeros(1, dtype=SNAPSHOT_HEADER)
    header["magic"] = SNAPSHOT_MAGIC
    header["version"] = SNAPSHOT_VERSION
    header["digest"] = bytes.fromhex(digest)
    header["x_count"] = field.x.size
    header["v_count"] = field.values.shape[1]

    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(field.x, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    logger.info(f"Wrote field snapshot to {path}")
    return path


def read_snapshot(path: Path) -> Tuple[str, KineticField]:
    """Return the grid digest and the stored field.

    Raises:
        ArtifactError: if the header is malformed or the payload is truncated.
    """

    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ArtifactError(f"Cannot read snapshot {path}: {e}") from e

    if len(raw) < SNAPSHOT_HEADER.itemsize:
        raise ArtifactError(f"Snapshot {path} is shorter than its header")

    header = np.frombuffer(raw[: SNAPSHOT_HEADER.itemsize], dtype=SNAPSHOT_HEADER)[0]
    if header["magic"] != SNAPSHOT_MAGIC.rstrip(b"\x00") or int(header["version"]) != SNAPSHOT_VERSION:
        raise ArtifactError(f"{path} is not a version {SNAPSHOT_VERSION} field snapshot")

    nx, nv = int(header["x_count"]), int(header["v_count"])
    expected = SNAPSHOT_HEADER.itemsize + 8 * nx * (1 + nv)
    if len(raw) != expected:
        raise ArtifactError(f"Snapshot {path} has {len(raw)} bytes, expected {expected}")

    payload = np.frombuffer(raw[SNAPSHOT_HEADER.itemsize :], dtype="<f8")
    x = payload[:nx].copy()
    values = payload[nx:].reshape(nx, nv).copy()
    digest = bytes(raw[12:44]).hex()
    return digest, KineticField(x, values)


def write_report(path: Path, report: Dict[str, Any]) -> Path:
    """Validate against REPORT_SCHEMA and write with sorted keys.

    Raises:
        ArtifactError: if the report does not validate.
    """

    document = _plain(report)
    try:
        jsonschema.validate(document, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ArtifactError(f"Report does not match its schema at {list(e.absolute_path)}: {e.message}") from e

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote report to {path}")
    return path


def read_report(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Cannot read report {path}: {e}") from e

    try:
        jsonschema.validate(document, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ArtifactError(f"Report {path} does not match its schema: {e.message}") from e
    return document
