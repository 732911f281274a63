"""2D feature-space heat maps and their inverse mapping back to pixels.

A patch is projected into a density grid over a pair of spectral features
(image convention: x axis along columns, y axis up, so row 0 is the top of
the y scale).  Per-class density grids yield supervision targets covering
the densest half of each class's mass; labeled bin masks are projected back
to the pixels that fell in those bins.  Jeffries-Matusita separability
pre-categorizes heat maps into those that show a usable cluster arrangement
(type-I) and those that do not (type-II).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .raster import UNKNOWN, BandStack, LabelRaster

TYPE_I = "type-I"
TYPE_II = "type-II"
UNCATEGORIZED = "uncategorized"
SOURCE_AUTO = "jm-auto"
SOURCE_HUMAN = "human"

DEFAULT_JM_THRESHOLD = 1.5
DEFAULT_MIN_PIXELS = 1000


@dataclass(frozen=True)
class HeatMapConfig:
    feature_x: str = "RDEG1"
    feature_y: str = "SWIR1"
    bins: int = 128
    scale_x: float = 0.3
    scale_y: float = 0.6

    def __post_init__(self):
        if self.bins not in (64, 128, 256):
            raise ValueError("bins must be one of 64, 128, 256")
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise ValueError("scales must be positive")


@dataclass
class HeatMap:
    counts: np.ndarray  # (bins, bins) non-negative ints, [row, col]
    config: HeatMapConfig
    total_in_range: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.config.bins, self.config.bins):
            raise ValueError("counts grid does not match configured bins")
        if (self.counts < 0).any() or self.counts.sum() != self.total_in_range:
            raise ValueError("counts must be non-negative and sum to total_in_range")


@dataclass
class BinIndexMap:
    """Per-pixel (row, col) bin coordinate; -1 marks out-of-range/invalid."""

    rows: np.ndarray
    cols: np.ndarray
    bins: int

    @property
    def none_mask(self) -> np.ndarray:
        return self.rows < 0


@dataclass
class Projection:
    heatmap: HeatMap
    index_map: BinIndexMap
    dropped: int
    per_class: dict[int, HeatMap] | None = None


@dataclass
class FourChannelInput:
    """Recognizer input: densities plus coordinate planes.

    ch1 crop-candidate density, ch2 never-crop density (both log-scaled to
    [0,1]), ch3/ch4 the x/y coordinate of every nonzero ch1 bin.
    """

    channels: np.ndarray  # (4, bins, bins) float32
    config: HeatMapConfig

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.shape != (4, self.config.bins, self.config.bins):
            raise ValueError("channels must be (4, bins, bins)")


@dataclass
class TargetMask:
    """Per-bin class assignment; 0 marks an unlabeled bin."""

    grid: np.ndarray  # (bins, bins) int
    bins: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int32)
        if self.grid.shape != (self.bins, self.bins):
            raise ValueError("target grid does not match bins")

    @property
    def blank(self) -> bool:
        return not self.grid.any()


@dataclass
class HeatMapRecord:
    """Bookkeeping for one (patch, time step) heat map in the triage manifest."""

    id: str
    patch: str
    time_step: int
    category: str = UNCATEGORIZED
    category_source: str = SOURCE_AUTO
    jm_value: float | None = None
    image: str = ""
    extra: dict = field(default_factory=dict)


def project(
    patch: BandStack,
    config: HeatMapConfig,
    labels: LabelRaster | None = None,
    class_ids: list[int] | None = None,
    pixel_mask: np.ndarray | None = None,
) -> Projection:
    """Project a patch into feature space.

    Counts fall in a ``bins x bins`` grid; pixels whose feature value is
    negative or at/above the axis scale are dropped (recorded, not clamped).
    With ``labels``, per-class count grids are produced for ``class_ids``
    over the same pixel selection.  ``pixel_mask`` restricts which pixels
    participate (e.g. crop candidates vs never-crop).
    """
    if not patch.valid.any():
        raise ValueError("no valid pixels in patch")
    vx = patch.feature(config.feature_x).astype(np.float64)
    vy = patch.feature(config.feature_y).astype(np.float64)
    ok = patch.valid & np.isfinite(vx) & np.isfinite(vy)
    if pixel_mask is not None:
        ok = ok & pixel_mask
    b = config.bins
    in_range = ok & (vx >= 0) & (vx < config.scale_x) & (vy >= 0) & (vy < config.scale_y)
    vx = np.nan_to_num(vx, nan=-1.0)
    vy = np.nan_to_num(vy, nan=-1.0)
    col = np.floor(vx / config.scale_x * b).astype(np.int32)
    yb = np.floor(vy / config.scale_y * b).astype(np.int32)
    # guard the value < scale ulp case where division rounds up to the edge
    np.clip(col, 0, b - 1, out=col)
    np.clip(yb, 0, b - 1, out=yb)
    row = (b - 1) - yb

    rows = np.where(in_range, row, -1).astype(np.int16)
    cols = np.where(in_range, col, -1).astype(np.int16)
    flat = (row * b + col)[in_range]
    counts = np.bincount(flat, minlength=b * b).reshape(b, b)
    total = int(counts.sum())
    dropped = int(ok.sum()) - total

    per_class = None
    if labels is not None:
        if labels.cells.shape != patch.valid.shape:
            raise ValueError("labels geometry mismatch")
        ids = class_ids if class_ids is not None else sorted(labels.class_table)
        per_class = {}
        for cid in ids:
            sel = in_range & (labels.cells == cid)
            cflat = (row * b + col)[sel]
            cgrid = np.bincount(cflat, minlength=b * b).reshape(b, b)
            per_class[cid] = HeatMap(cgrid, config, int(cgrid.sum()))
    return Projection(
        heatmap=HeatMap(counts, config, total),
        index_map=BinIndexMap(rows, cols, b),
        dropped=dropped,
        per_class=per_class,
    )


def _log_normalize(counts: np.ndarray) -> np.ndarray:
    peak = counts.max()
    if peak <= 0:
        return np.zeros(counts.shape, dtype=np.float32)
    return (np.log1p(counts) / math.log1p(peak)).astype(np.float32)


def build_channels(crop_candidate: HeatMap, never_crop: HeatMap) -> FourChannelInput:
    """Stack the 4-channel recognizer input from the two density grids."""
    if crop_candidate.config != never_crop.config:
        raise ValueError("config mismatch between heat maps")
    b = crop_candidate.config.bins
    ch1 = _log_normalize(crop_candidate.counts)
    ch2 = _log_normalize(never_crop.counts)
    nz = crop_candidate.counts > 0
    ii, jj = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")  # row, col
    ch3 = np.where(nz, jj / (b - 1), 0.0).astype(np.float32)
    ch4 = np.where(nz, 1.0 - ii / (b - 1), 0.0).astype(np.float32)
    return FourChannelInput(np.stack([ch1, ch2, ch3, ch4]), crop_candidate.config)


def blank_target(bins: int) -> TargetMask:
    return TargetMask(np.zeros((bins, bins), dtype=np.int32), bins)


def build_target(per_class: dict[int, HeatMap], fraction: float = 0.5) -> TargetMask:
    """Select, per class, the densest bins covering ``fraction`` of its mass.

    Bins are taken in decreasing count order (ties by row-major index) until
    the cumulative count first reaches ``fraction * total``.  A bin claimed
    by more than one class is removed from the target entirely.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    grids = {cid: hm.counts for cid, hm in per_class.items() if hm.counts.sum() > 0}
    if not grids:
        raise ValueError("need at least one class grid with positive mass")
    bins = next(iter(per_class.values())).config.bins
    claimed = np.zeros((bins, bins), dtype=np.int32)
    times_claimed = np.zeros((bins, bins), dtype=np.int32)
    for cid in sorted(grids):
        counts = grids[cid].ravel()
        order = np.lexsort((np.arange(counts.size), -counts))
        csum = np.cumsum(counts[order])
        need = fraction * counts.sum()
        k = int(np.searchsorted(csum, need, side="left")) + 1
        chosen = order[:k]
        sel = np.zeros(counts.size, dtype=bool)
        sel[chosen] = True
        sel = sel.reshape(bins, bins)
        claimed[sel] = cid
        times_claimed[sel] += 1
    claimed[times_claimed > 1] = 0
    return TargetMask(claimed, bins)


def jm_distance(samples_a: np.ndarray, samples_b: np.ndarray, eps: float = 1e-6) -> float:
    """Jeffries-Matusita distance between two point clouds in feature space.

    Gaussian fit per class with covariance regularized by ``eps * I``;
    JM = 2(1 - exp(-B)) with B the Bhattacharyya distance, giving a value
    in [0, 2] that saturates at 2 for fully separable classes.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("samples must be (n, d) with matching d")
    if len(a) < 8 or len(b) < 8:
        raise ValueError("need at least 8 samples per class")
    d = a.shape[1]
    mu = a.mean(axis=0) - b.mean(axis=0)
    ca = np.cov(a, rowvar=False) + eps * np.eye(d)
    cb = np.cov(b, rowvar=False) + eps * np.eye(d)
    avg = 0.5 * (ca + cb)
    sign, logdet_avg = np.linalg.slogdet(avg)
    sign_a, logdet_a = np.linalg.slogdet(ca)
    sign_b, logdet_b = np.linalg.slogdet(cb)
    if sign <= 0 or sign_a <= 0 or sign_b <= 0:
        raise ValueError("degenerate covariance")
    bhat = 0.125 * float(mu @ np.linalg.solve(avg, mu))
    bhat += 0.5 * (logdet_avg - 0.5 * (logdet_a + logdet_b))
    return 2.0 * (1.0 - math.exp(-bhat))


def categorize(
    samples_by_class: dict[int, np.ndarray],
    pair: tuple[int, int],
    threshold: float = DEFAULT_JM_THRESHOLD,
    min_pixels: int = DEFAULT_MIN_PIXELS,
) -> tuple[str, float | None]:
    """Pre-categorize one heat map from its class samples.

    Type-I requires a JM distance at or above ``threshold`` for the class
    pair and at least ``min_pixels`` crop-candidate pixels of each class in
    the patch (scarce classes get obscured by the background density).
    """
    a = samples_by_class.get(pair[0])
    b = samples_by_class.get(pair[1])
    na = 0 if a is None else len(a)
    nb = 0 if b is None else len(b)
    if na < max(min_pixels, 8) or nb < max(min_pixels, 8):
        return TYPE_II, None
    jm = jm_distance(a, b)
    return (TYPE_I if jm >= threshold else TYPE_II), jm


def inverse_project(
    mask: TargetMask,
    index_map: BinIndexMap,
    class_table: dict[int, str],
) -> LabelRaster:
    """Map a labeled bin mask back to the pixels that fell in those bins.

    Pixels without a bin, or whose bin is unlabeled, come back unknown.
    """
    if mask.bins != index_map.bins:
        raise ValueError("geometry mismatch between mask and bin index map")
    cells = np.full(index_map.rows.shape, UNKNOWN, dtype=np.uint16)
    has_bin = ~index_map.none_mask
    labels = mask.grid[index_map.rows[has_bin], index_map.cols[has_bin]]
    vals = np.where(labels > 0, labels, UNKNOWN).astype(np.uint16)
    cells[has_bin] = vals
    return LabelRaster(cells, dict(class_table))


def screen_feature_pairs(
    dates: list[int],
    stats_a: dict[str, tuple[np.ndarray, np.ndarray]],
    stats_b: dict[str, tuple[np.ndarray, np.ndarray]],
) -> list[tuple[str, int, float]]:
    """Rank candidate feature pairs by how well either axis separates the classes.

    ``stats_*`` map feature name to (means, stds) arrays over ``dates``.
    Separability on one axis at one date is |mean_a - mean_b| / (std_a + std_b);
    a pair scores the max over its two axes and all dates.  Returns
    (pair, best_date, score) sorted by descending score, ties by pair name.
    """
    features = sorted(set(stats_a) & set(stats_b))
    if not features:
        raise ValueError("empty candidate feature set")
    axis_sep = {}
    for f in features:
        ma, sa = (np.asarray(v, dtype=np.float64) for v in stats_a[f])
        mb, sb = (np.asarray(v, dtype=np.float64) for v in stats_b[f])
        num = np.abs(ma - mb)
        den = sa + sb
        with np.errstate(divide="ignore", invalid="ignore"):
            sep = np.where(den > 0, num / den, np.where(num > 0, np.inf, 0.0))
        axis_sep[f] = sep
    ranked = []
    for i, f in enumerate(features):
        for g in features[i + 1:]:
            sep = np.maximum(axis_sep[f], axis_sep[g])
            best = int(np.argmax(sep))
            ranked.append((f"{f}/{g}", dates[best], float(sep[best])))
    ranked.sort(key=lambda t: (-t[2], t[0]))
    return ranked


# ---------------------------------------------------------------------------
# triage bundle: grayscale images + manifest
# ---------------------------------------------------------------------------

def write_pgm(plane: np.ndarray, path) -> None:
    """8-bit binary portable graymap, linear from a [0,1] plane."""
    gray = np.clip(np.round(np.asarray(plane, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("unsupported graymap")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)


def manifest_row(rec: HeatMapRecord) -> dict:
    return {
        "id": rec.id,
        "patch": rec.patch,
        "time_step": rec.time_step,
        "jm_value": rec.jm_value,
        "category": rec.category,
        "category_source": rec.category_source,
        "image": rec.image,
    }


def write_manifest(records: list[HeatMapRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(manifest_row(rec), sort_keys=True) + "\n")


def read_manifest(path) -> list[HeatMapRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            records.append(HeatMapRecord(
                id=row["id"],
                patch=row["patch"],
                time_step=int(row["time_step"]),
                category=row["category"],
                category_source=row["category_source"],
                jm_value=row["jm_value"],
                image=row.get("image", ""),
            ))
    return records


def apply_manifest_overrides(
    records: list[HeatMapRecord], manifest: list[HeatMapRecord],
) -> list[HeatMapRecord]:
    """Replace categories with human decisions from an edited manifest."""
    human = {m.id: m for m in manifest if m.category_source == SOURCE_HUMAN}
    out = []
    for rec in records:
        edit = human.get(rec.id)
        if edit is not None:
            rec = HeatMapRecord(rec.id, rec.patch, rec.time_step, edit.category,
                                SOURCE_HUMAN, rec.jm_value, rec.image, rec.extra)
        out.append(rec)
    return out
