import numpy as np
import pytest

from croptopo.heatmap import (
    TYPE_I,
    HeatMap,
    HeatMapConfig,
    build_channels,
    build_target,
)
from croptopo.raster import DEFAULT_BANDS, BandStack


def make_stack(values: dict[str, float] | None = None, size=4, doy=180, year=2018,
               valid=None, bands=DEFAULT_BANDS):
    """Uniform-valued stack over the default bands, for unit tests."""
    values = values or {}
    planes = np.stack([
        np.full((size, size), values.get(b, 0.2), dtype=np.float32) for b in bands
    ])
    if valid is None:
        valid = np.ones((size, size), dtype=bool)
    return BandStack(list(bands), planes, valid, doy, year)


def make_cluster_record(rng, record_id, patch, step, bins=64, category=TYPE_I,
                        n_points=40000):
    """Fabricated recognizer training record: two Gaussian blobs whose
    absolute position varies per record while the lower-left/upper-right
    arrangement stays fixed (type-I), or one merged blob (type-II)."""
    from croptopo.recognizer import TrainingRecord, pair_target

    cfg = HeatMapConfig(bins=bins)
    if category == TYPE_I:
        base = np.array([bins * 0.45 + rng.integers(-5, 6),
                         bins * 0.40 + rng.integers(-4, 5)], dtype=float)
        pts_a = rng.normal(base + [bins * 0.16, -bins * 0.10], (2.0, 4.0), (n_points, 2))
        pts_b = rng.normal(base, (2.0, 4.0), (n_points, 2))
    else:
        base = np.array([bins * 0.31 + rng.integers(-3, 4),
                         bins * 0.48 + rng.integers(-3, 4)], dtype=float)
        pts_a = rng.normal(base, (2.2, 4.2), (n_points, 2))
        pts_b = rng.normal(base + [0.5, 0.5], (2.2, 4.2), (n_points, 2))
    grids = {}
    for cid, pts in ((1, pts_a), (2, pts_b)):
        ij = np.floor(pts).astype(int)
        ok = (ij >= 0).all(axis=1) & (ij < bins).all(axis=1)
        g = np.bincount(ij[ok, 0] * bins + ij[ok, 1], minlength=bins * bins).reshape(bins, bins)
        grids[cid] = HeatMap(g, cfg, int(g.sum()))
    total = grids[1].counts + grids[2].counts
    cand = HeatMap(total, cfg, int(total.sum()))
    nc = np.zeros((bins, bins), np.int64)
    nc[int(bins * 0.7): int(bins * 0.85), int(bins * 0.72): int(bins * 0.87)] = 60
    never = HeatMap(nc, cfg, int(nc.sum()))
    four = build_channels(cand, never)
    if category == TYPE_I:
        target = pair_target(build_target({1: grids[1], 2: grids[2]}, 0.5), (1, 2))
    else:
        target = np.zeros((bins, bins), np.int64)
    return TrainingRecord(record_id, patch, step, four.channels, target, category)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
