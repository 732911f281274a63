import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from croptopo import heatmap as hm
from croptopo.heatmap import (
    HeatMap,
    HeatMapConfig,
    HeatMapRecord,
    apply_manifest_overrides,
    blank_target,
    build_channels,
    build_target,
    categorize,
    inverse_project,
    jm_distance,
    project,
    read_manifest,
    read_pgm,
    screen_feature_pairs,
    write_manifest,
    write_pgm,
)
from croptopo.raster import UNKNOWN, BandStack, LabelRaster

CFG = HeatMapConfig(feature_x="RDEG1", feature_y="SWIR1", bins=64, scale_x=0.3, scale_y=0.6)


def xy_patch(vx, vy, valid=None, doy=200, year=2018):
    """Stack whose RDEG1/SWIR1 planes hold the given value arrays."""
    vx = np.asarray(vx, dtype=np.float32)
    planes = np.stack([vx, np.asarray(vy, dtype=np.float32)])
    if valid is None:
        valid = np.ones(vx.shape, dtype=bool)
    return BandStack(["RDEG1", "SWIR1"], planes, valid, doy, year)


def make_heat(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return HeatMap(counts, HeatMapConfig(bins=counts.shape[0] if counts.shape[0] in (64, 128, 256) else 64),
                   int(counts.sum()))


def grid_heat(bins, coords_counts):
    counts = np.zeros((bins, bins), dtype=np.int64)
    for (i, j), c in coords_counts.items():
        counts[i, j] = c
    cfg = HeatMapConfig(bins=bins)
    return HeatMap(counts, cfg, int(counts.sum()))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_point_mass():
    size = 16
    p = xy_patch(np.full((size, size), 0.15), np.full((size, size), 0.3))
    proj = project(p, CFG)
    assert proj.heatmap.total_in_range == size * size
    assert proj.heatmap.counts.max() == size * size
    assert (proj.heatmap.counts > 0).sum() == 1
    # value 0.15 on a 0.3 scale and 0.3 on a 0.6 scale land mid-axis
    r, c = np.argwhere(proj.heatmap.counts)[0]
    assert c == 32 and r == 63 - 32


def test_project_boundary_value_dropped():
    p = xy_patch([[0.3]], [[0.3]])  # x equals scale_x -> out of range
    proj = project(p, CFG)
    assert proj.heatmap.total_in_range == 0
    assert proj.dropped == 1
    assert proj.index_map.none_mask.all()


def test_project_requires_valid_pixels():
    p = xy_patch([[0.1]], [[0.1]], valid=np.zeros((1, 1), bool))
    with pytest.raises(ValueError, match="no valid pixels"):
        project(p, CFG)


def test_project_uniform_counts_within_poisson_bound(rng):
    side = 640
    vx = rng.uniform(0, 0.3, (side, side)).astype(np.float32)
    vy = rng.uniform(0, 0.6, (side, side)).astype(np.float32)
    proj = project(xy_patch(vx, vy), CFG)
    n = side * side
    mean = n / CFG.bins ** 2
    assert proj.heatmap.total_in_range == n
    assert np.abs(proj.heatmap.counts - mean).max() <= 5 * math.sqrt(mean)


def test_project_per_class_grids_and_mask(rng):
    vx = rng.uniform(0, 0.3, (32, 32)).astype(np.float32)
    vy = rng.uniform(0, 0.6, (32, 32)).astype(np.float32)
    cells = np.where(np.arange(32 * 32).reshape(32, 32) % 2 == 0, 1, 2).astype(np.uint16)
    labels = LabelRaster(cells, {1: "corn", 2: "soybean"})
    mask = cells == 1
    proj = project(xy_patch(vx, vy), CFG, labels=labels, class_ids=[1, 2], pixel_mask=mask)
    assert proj.per_class[1].total_in_range == int(mask.sum())
    assert proj.per_class[2].total_in_range == 0
    assert proj.heatmap.total_in_range == int(mask.sum())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_projection_conservation(seed):
    r = np.random.default_rng(seed)
    shape = (12, 12)
    vx = r.uniform(-0.1, 0.45, shape).astype(np.float32)
    vy = r.uniform(-0.1, 0.8, shape).astype(np.float32)
    valid = r.random(shape) > 0.25
    if not valid.any():
        valid[0, 0] = True
    proj = project(xy_patch(vx, vy, valid=valid), CFG)
    assert proj.heatmap.total_in_range + proj.dropped == int(valid.sum())
    nz_bins = proj.index_map.rows[~proj.index_map.none_mask]
    if nz_bins.size:
        # every assigned bin holds at least one count
        rows = proj.index_map.rows[~proj.index_map.none_mask]
        cols = proj.index_map.cols[~proj.index_map.none_mask]
        assert (proj.heatmap.counts[rows, cols] >= 1).all()


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------

def test_channels_empty_never_crop_gives_zero_ch2():
    cand = grid_heat(64, {(0, 0): 5})
    never = grid_heat(64, {})
    four = build_channels(cand, never)
    assert (four.channels[1] == 0).all()


def test_channels_single_bin_corner():
    cand = grid_heat(64, {(0, 0): 7})
    four = build_channels(cand, grid_heat(64, {}))
    assert four.channels[0][0, 0] == 1.0
    assert four.channels[2][0, 0] == 0.0
    assert four.channels[3][0, 0] == 1.0


def test_channels_log_scaling():
    c = 4
    cand = grid_heat(64, {(3, 5): c, (10, 11): 2 * c})
    four = build_channels(cand, grid_heat(64, {}))
    assert four.channels[0][3, 5] == pytest.approx(math.log1p(c) / math.log1p(2 * c))
    assert four.channels[0][10, 11] == pytest.approx(1.0)


def test_channels_config_mismatch():
    with pytest.raises(ValueError, match="config mismatch"):
        build_channels(grid_heat(64, {}), grid_heat(128, {}))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_channel_invariants_random(seed):
    r = np.random.default_rng(seed)
    counts = r.integers(0, 50, (64, 64))
    cand = grid_heat(64, {})
    cand.counts = counts
    cand.total_in_range = int(counts.sum())
    four = build_channels(cand, grid_heat(64, {}))
    nz = counts > 0
    ch3, ch4 = four.channels[2], four.channels[3]
    assert (ch3[~nz] == 0).all() and (ch4[~nz] == 0).all()
    # x coordinates increase along columns, y coordinates decrease along rows
    full = build_channels(grid_heat(64, {(i, j): 1 for i in range(64) for j in range(64)}),
                          grid_heat(64, {}))
    assert (np.diff(full.channels[2], axis=1) > 0).all()
    assert (np.diff(full.channels[3], axis=0) < 0).all()
    assert (np.diff(full.channels[2], axis=0) == 0).all()


# ---------------------------------------------------------------------------
# target
# ---------------------------------------------------------------------------

def brute_force_target(grids, fraction):
    bins = next(iter(grids.values())).shape[0]
    sel = {}
    for cid, g in grids.items():
        total = g.sum()
        if total == 0:
            continue
        order = sorted(((int(c), i) for i, c in enumerate(g.ravel())), key=lambda t: (-t[0], t[1]))
        acc, chosen = 0, []
        for c, i in order:
            chosen.append(i)
            acc += c
            if acc >= fraction * total:
                break
        sel[cid] = set(chosen)
    out = np.zeros((bins, bins), dtype=np.int32)
    for cid, bins_sel in sel.items():
        for i in bins_sel:
            if sum(i in s for s in sel.values()) == 1:
                out.ravel()[i] = cid
    return out


def test_target_hand_case():
    g = grid_heat(64, {(0, 0): 9, (0, 1): 5, (1, 0): 4, (1, 1): 2})
    t = build_target({1: g}, fraction=0.5)
    assert t.grid[0, 0] == 1 and t.grid[0, 1] == 1
    assert t.grid[1, 0] == 0 and t.grid[1, 1] == 0


def test_target_full_mass_disjoint():
    a = grid_heat(64, {(2, 2): 3, (2, 3): 1})
    b = grid_heat(64, {(50, 50): 9})
    t = build_target({1: a, 2: b}, fraction=1.0)
    assert t.grid[2, 2] == 1 and t.grid[2, 3] == 1 and t.grid[50, 50] == 2
    assert (t.grid > 0).sum() == 3


def test_target_overlap_eliminated():
    a = grid_heat(64, {(5, 5): 4})
    b = grid_heat(64, {(5, 5): 7})
    t = build_target({1: a, 2: b}, fraction=0.5)
    assert t.blank


def test_target_fraction_validation():
    g = grid_heat(64, {(0, 0): 1})
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError, match="fraction"):
            build_target({1: g}, fraction=bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 1.0))
def test_target_matches_brute_force(seed, fraction):
    r = np.random.default_rng(seed)
    grids = {cid: r.integers(0, 20, (64, 64)) * (r.random((64, 64)) < 0.1)
             for cid in (1, 2)}
    heats = {cid: grid_heat(64, {}) for cid in grids}
    for cid in grids:
        heats[cid].counts = grids[cid].astype(np.int64)
        heats[cid].total_in_range = int(grids[cid].sum())
    if all(g.sum() == 0 for g in grids.values()):
        return
    t = build_target(heats, fraction=fraction)
    assert np.array_equal(t.grid, brute_force_target(grids, fraction))


def test_target_mass_window(rng):
    # selected mass lands in [f*total, f*total + max_bin]
    for _ in range(25):
        g = rng.integers(0, 30, (64, 64)) * (rng.random((64, 64)) < 0.05)
        if g.sum() == 0:
            continue
        heat = grid_heat(64, {})
        heat.counts = g.astype(np.int64)
        heat.total_in_range = int(g.sum())
        t = build_target({1: heat}, fraction=0.5)
        mass = g[t.grid == 1].sum()
        assert 0.5 * g.sum() <= mass <= 0.5 * g.sum() + g.max()


# ---------------------------------------------------------------------------
# JM distance
# ---------------------------------------------------------------------------

def test_jm_identical_is_zero(rng):
    a = rng.normal(0, 1, (500, 2))
    assert abs(jm_distance(a, a)) <= 1e-9


def test_jm_saturates(rng):
    a = rng.normal(0, 1, (500, 2))
    b = a + np.array([100.0 * math.sqrt(2.0), 0.0])
    assert jm_distance(a, b) >= 2 - 1e-6


def test_jm_gaussian_closed_form(rng):
    n = 100_000
    a = rng.normal((0, 0), 1.0, (n, 2))
    b = rng.normal((1, 0), 1.0, (n, 2))
    expect = 2 * (1 - math.exp(-1 / 8))
    assert jm_distance(a, b) == pytest.approx(expect, abs=2e-2)


def test_jm_symmetric(rng):
    a = rng.normal(0, 1, (200, 2))
    b = rng.normal(0.7, 1.3, (200, 2))
    assert jm_distance(a, b) == jm_distance(b, a)


def test_jm_monotone_in_separation(rng):
    a = rng.normal(0, 1, (5000, 2))
    base = rng.normal(0, 1, (5000, 2))
    prev = -1.0
    for gap in np.linspace(0, 6, 13):
        val = jm_distance(a, base + np.array([gap, 0.0]))
        assert val >= prev - 1e-6
        prev = val


def test_jm_requires_samples(rng):
    a = rng.normal(0, 1, (4, 2))
    with pytest.raises(ValueError, match="8 samples"):
        jm_distance(a, a)


# ---------------------------------------------------------------------------
# categorization
# ---------------------------------------------------------------------------

def test_categorize_well_separated(rng):
    a = rng.normal((0.10, 0.2), 0.01, (2000, 2))
    b = rng.normal((0.15, 0.3), 0.01, (2000, 2))
    cat, jm = categorize({1: a, 2: b}, (1, 2), threshold=1.5, min_pixels=1000)
    assert cat == hm.TYPE_I and jm >= 1.5


def test_categorize_min_pixels_guard(rng):
    a = rng.normal((0.10, 0.2), 0.01, (500, 2))
    b = rng.normal((0.15, 0.3), 0.01, (2000, 2))
    cat, jm = categorize({1: a, 2: b}, (1, 2), threshold=1.5, min_pixels=1000)
    assert cat == hm.TYPE_II and jm is None


def test_categorize_overlapping(rng):
    a = rng.normal((0.1, 0.2), 0.05, (3000, 2))
    b = rng.normal((0.1, 0.2), 0.05, (3000, 2))
    cat, jm = categorize({1: a, 2: b}, (1, 2), threshold=1.5, min_pixels=1000)
    assert cat == hm.TYPE_II and jm < 0.5


# ---------------------------------------------------------------------------
# inverse projection
# ---------------------------------------------------------------------------

def test_inverse_round_trip_single_class(rng):
    vx = rng.uniform(-0.05, 0.35, (24, 24)).astype(np.float32)
    vy = rng.uniform(-0.05, 0.7, (24, 24)).astype(np.float32)
    valid = rng.random((24, 24)) > 0.2
    patch = xy_patch(vx, vy, valid=valid)
    labels = LabelRaster(np.ones((24, 24), np.uint16), {1: "corn"})
    proj = project(patch, CFG, labels=labels, class_ids=[1])
    target = build_target(proj.per_class, fraction=1.0)
    out = inverse_project(target, proj.index_map, {1: "corn"})
    in_range = ~proj.index_map.none_mask
    assert np.array_equal(out.cells == 1, in_range)
    assert (out.cells[~in_range] == UNKNOWN).all()


def test_inverse_all_none_mask(rng):
    vx = rng.uniform(0, 0.29, (8, 8)).astype(np.float32)
    proj = project(xy_patch(vx, vx), CFG)
    out = inverse_project(blank_target(CFG.bins), proj.index_map, {})
    assert (out.cells == UNKNOWN).all()


def test_inverse_single_bin_definition():
    im = hm.BinIndexMap(np.array([[3]], np.int16), np.array([[7]], np.int16), 64)
    mask = blank_target(64)
    mask.grid[3, 7] = 2
    out = inverse_project(mask, im, {2: "soybean"})
    assert out.cells[0, 0] == 2


def test_inverse_geometry_mismatch():
    im = hm.BinIndexMap(np.zeros((2, 2), np.int16), np.zeros((2, 2), np.int16), 64)
    with pytest.raises(ValueError, match="geometry mismatch"):
        inverse_project(blank_target(128), im, {})


# ---------------------------------------------------------------------------
# feature pair screening
# ---------------------------------------------------------------------------

def test_screen_identical_stats_zero():
    dates = [100, 120]
    stats = {"NIR": (np.array([0.3, 0.4]), np.array([0.05, 0.05])),
             "SWIR1": (np.array([0.2, 0.25]), np.array([0.04, 0.04]))}
    ranked = screen_feature_pairs(dates, stats, stats)
    assert all(score == 0.0 for _, _, score in ranked)


def test_screen_hand_value():
    dates = [100, 120]
    a = {"X": (np.array([0.0, 3.0]), np.array([1.0, 1.0])),
         "Y": (np.array([0.0, 0.0]), np.array([1.0, 1.0]))}
    b = {"X": (np.array([0.0, 0.0]), np.array([1.0, 1.0])),
         "Y": (np.array([0.0, 0.1]), np.array([1.0, 1.0]))}
    ranked = screen_feature_pairs(dates, a, b)
    assert ranked[0][0] == "X/Y"
    assert ranked[0][1] == 120
    assert ranked[0][2] == pytest.approx(1.5)


def test_screen_empty_candidates():
    with pytest.raises(ValueError, match="empty candidate"):
        screen_feature_pairs([1], {}, {})


# ---------------------------------------------------------------------------
# triage bundle
# ---------------------------------------------------------------------------

def test_pgm_round_trip(tmp_path, rng):
    plane = rng.random((32, 32))
    p = tmp_path / "h.pgm"
    write_pgm(plane, p)
    img = read_pgm(p)
    assert img.shape == (32, 32)
    assert np.array_equal(img, np.clip(np.round(plane * 255), 0, 255).astype(np.uint8))


def test_manifest_round_trip(tmp_path):
    recs = [HeatMapRecord(f"r{i}", f"p{i % 2}", i, hm.TYPE_I if i % 2 else hm.TYPE_II,
                          hm.SOURCE_AUTO, 1.2 + i, f"r{i}.pgm") for i in range(4)]
    path = tmp_path / "manifest.jsonl"
    write_manifest(recs, path)
    back = read_manifest(path)
    assert [manifest_dict(r) for r in back] == [manifest_dict(r) for r in recs]


def manifest_dict(r):
    return (r.id, r.patch, r.time_step, r.category, r.category_source, r.jm_value, r.image)


def test_human_override_wins():
    recs = [HeatMapRecord("a", "p0", 1, hm.TYPE_I, hm.SOURCE_AUTO, 1.8),
            HeatMapRecord("b", "p0", 2, hm.TYPE_II, hm.SOURCE_AUTO, 0.3)]
    edited = [HeatMapRecord("a", "p0", 1, hm.TYPE_II, hm.SOURCE_HUMAN, 1.8),
              HeatMapRecord("b", "p0", 2, hm.TYPE_II, hm.SOURCE_AUTO, 0.3)]
    merged = apply_manifest_overrides(recs, edited)
    assert merged[0].category == hm.TYPE_II and merged[0].category_source == hm.SOURCE_HUMAN
    assert merged[1].category == hm.TYPE_II and merged[1].category_source == hm.SOURCE_AUTO
