"""Sensor metadata records, normalization ranges and sidecar parsing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

FIELDS = (
    "utm_zone",
    "timestamp",
    "gsd",
    "cloud_cover",
    "off_nadir_angle",
    "target_azimuth",
    "sun_azimuth",
    "sun_elevation",
)

SECONDS_PER_YEAR = 31_557_600.0

# (low, high, wraps): each field maps affinely from [low, high] onto [0, 100].
# Wrapping fields are reduced modulo their period before scaling.
FIELD_RANGES: dict[str, tuple[float, float, bool]] = {
    "utm_zone": (1.0, 60.0, False),
    "timestamp": (0.0, SECONDS_PER_YEAR, True),
    "gsd": (0.0, 4.0, False),
    "cloud_cover": (0.0, 1.0, False),
    "off_nadir_angle": (0.0, 90.0, False),
    "target_azimuth": (0.0, 360.0, True),
    "sun_azimuth": (0.0, 360.0, True),
    "sun_elevation": (-90.0, 90.0, False),
}

NORMALIZED_MAX = 100.0


class MetadataError(ValueError):
    """A metadata field is non-numeric, non-finite or outside its declared range."""


def neutral_value(name: str) -> float:
    lo, hi, _ = FIELD_RANGES[name]
    return 0.5 * (lo + hi)


@dataclass
class MetadataRecord:
    utm_zone: float = field(default_factory=lambda: neutral_value("utm_zone"))
    timestamp: float = field(default_factory=lambda: neutral_value("timestamp"))
    gsd: float = field(default_factory=lambda: neutral_value("gsd"))
    cloud_cover: float = field(default_factory=lambda: neutral_value("cloud_cover"))
    off_nadir_angle: float = field(default_factory=lambda: neutral_value("off_nadir_angle"))
    target_azimuth: float = field(default_factory=lambda: neutral_value("target_azimuth"))
    sun_azimuth: float = field(default_factory=lambda: neutral_value("sun_azimuth"))
    sun_elevation: float = field(default_factory=lambda: neutral_value("sun_elevation"))
    missing: frozenset = field(default_factory=frozenset, compare=False)

    def __post_init__(self):
        for name in FIELDS:
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError) as exc:
                raise MetadataError(f"{name}: not a number ({value!r})") from exc
            if not math.isfinite(value):
                raise MetadataError(f"{name}: non-finite value {value}")
            lo, hi, wraps = FIELD_RANGES[name]
            if not wraps and not lo <= value <= hi:
                raise MetadataError(f"{name}={value} outside [{lo}, {hi}]")
            setattr(self, name, value)
        self.missing = frozenset(self.missing)

    def values(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FIELDS], dtype=np.float64)

    @classmethod
    def from_values(cls, values) -> "MetadataRecord":
        values = list(values)
        if len(values) != len(FIELDS):
            raise MetadataError(f"expected {len(FIELDS)} metadata values, got {len(values)}")
        return cls(**dict(zip(FIELDS, values)))

    def normalized(self) -> np.ndarray:
        return normalize(self.values())

    def to_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in FIELDS}


def normalize(values: np.ndarray) -> np.ndarray:
    """Map raw field values (..., 8) onto [0, 100] per :data:`FIELD_RANGES`."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for j, name in enumerate(FIELDS):
        lo, hi, wraps = FIELD_RANGES[name]
        v = values[..., j]
        if wraps:
            v = lo + np.mod(v - lo, hi - lo)
        out[..., j] = (v - lo) / (hi - lo) * NORMALIZED_MAX
    return out


def parse_metadata(text: str) -> MetadataRecord:
    """Parse a metadata sidecar.

    Accepts a JSON object or ``key = value`` / ``key: value`` lines (``#``
    starts a comment). Unknown keys are rejected; absent fields take their
    neutral value and are listed in ``record.missing``.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise MetadataError(f"invalid JSON metadata: {exc}") from exc
        if not isinstance(raw, dict):
            raise MetadataError("JSON metadata must be an object")
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            if sep not in line:
                raise MetadataError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split(sep, 1))
            raw[key] = value
    unknown = set(raw) - set(FIELDS)
    if unknown:
        raise MetadataError(f"unknown metadata fields: {sorted(unknown)}")
    values = {}
    for name, value in raw.items():
        try:
            values[name] = float(value)
        except (TypeError, ValueError) as exc:
            raise MetadataError(f"{name}: cannot parse {value!r} as a number") from exc
    missing = frozenset(n for n in FIELDS if n not in values)
    return MetadataRecord(**values, missing=missing)


def format_metadata(record: MetadataRecord) -> str:
    return "".join(f"{n} = {getattr(record, n)!r}\n" for n in FIELDS)


def record_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(MetadataRecord) if f.name != "missing")
