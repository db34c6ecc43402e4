"""Procedural remote-sensing-like images whose appearance is driven by their metadata.

Sun elevation sets overall brightness, sun azimuth sets the orientation of a
fine stripe texture, ground sample distance sets its spatial frequency, the
timestamp (season) tints vegetation, and cloud cover blends in white haze.
The remaining fields are drawn independently and carry no image signal.
"""

from __future__ import annotations

import numpy as np

from .metadata import SECONDS_PER_YEAR, MetadataRecord


def random_record(rng: np.random.Generator) -> MetadataRecord:
    return MetadataRecord(
        utm_zone=float(rng.integers(1, 61)),
        timestamp=float(rng.uniform(0, SECONDS_PER_YEAR)),
        gsd=float(rng.uniform(0.3, 2.0)),
        cloud_cover=float(rng.uniform(0.0, 0.6)),
        off_nadir_angle=float(rng.uniform(0.0, 40.0)),
        target_azimuth=float(rng.uniform(0.0, 360.0)),
        sun_azimuth=float(rng.uniform(0.0, 360.0)),
        sun_elevation=float(rng.uniform(10.0, 80.0)),
    )


def render(record: MetadataRecord, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) float32 image in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    season = 0.5 + 0.5 * np.cos(2 * np.pi * record.timestamp / SECONDS_PER_YEAR)
    base = season * np.array([0.25, 0.55, 0.2]) + (1 - season) * np.array([0.6, 0.45, 0.3])

    gdir = rng.uniform(0, 2 * np.pi)
    gradient = 0.25 * ((np.cos(gdir) * xx + np.sin(gdir) * yy) - 0.5)

    theta = np.deg2rad(record.sun_azimuth)
    freq = 3.0 / record.gsd
    stripes = 0.12 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) * 2 + rng.uniform(0, 2 * np.pi))

    img = base[:, None, None] + gradient + stripes
    for _ in range(rng.integers(1, 4)):
        cy, cx, r = rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.06, 0.2)
        colour = rng.uniform(0.1, 0.9, size=3)
        if rng.random() < 0.5:
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img = np.where(mask, colour[:, None, None], img)

    img = img * (0.35 + 0.65 * np.sin(np.deg2rad(record.sun_elevation)))
    img = (1 - record.cloud_cover) * img + record.cloud_cover * 0.9
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_dataset(n: int, size: int = 32, seed: int = 0) -> tuple[np.ndarray, list[MetadataRecord]]:
    """``n`` images (n, 3, size, size) plus the records that generated them."""
    rng = np.random.default_rng(seed)
    records = [random_record(rng) for _ in range(n)]
    images = np.stack([render(r, size, rng) for r in records]) if n else np.zeros((0, 3, size, size), np.float32)
    return images, records
