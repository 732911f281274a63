"""In-season crop classification from accumulated generated labels.

Features are 20-day window medians (bands plus NDVI/EVI/GCVI/LSWI) from
day-of-year 91 up to the current date, using only windows that have fully
elapsed so earlier feature values never change as the season advances.
The scene is split into a 3x3 grid; each cell trains its own forest on up
to ``n_per_class`` labels, borrowing a neighbour cell's pool for classes it
lacks, with background samples drawn from never-cultivated pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import ForestHyper, ForestModel, fit_forest
from .raster import (
    BACKGROUND,
    UNKNOWN,
    BandStack,
    CompositeWindow,
    LabelRaster,
    compute_index,
    lower_median,
)

GRID_DIM = 3
WINDOW_START_DOY = 91
WINDOW_LENGTH = 20
INDEX_FEATURES = ("NDVI", "EVI", "GCVI", "LSWI")

_S_SAMPLE, _S_CELL = 11, 12


@dataclass(frozen=True)
class SceneLayout:
    """Row-major mosaic of equally sized square patches."""

    n_patches: int
    patch_size: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        rows = max(d for d in range(1, int(np.sqrt(self.n_patches)) + 1)
                   if self.n_patches % d == 0)
        return rows, self.n_patches // rows

    @property
    def extent(self) -> tuple[int, int]:
        r, c = self.grid_shape
        return r * self.patch_size, c * self.patch_size

    def origin(self, patch: int) -> tuple[int, int]:
        _, c = self.grid_shape
        return (patch // c) * self.patch_size, (patch % c) * self.patch_size

    def cell_of(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        h, w = self.extent
        r = np.minimum(ys * GRID_DIM // h, GRID_DIM - 1)
        c = np.minimum(xs * GRID_DIM // w, GRID_DIM - 1)
        return (r * GRID_DIM + c).astype(np.int64)

    def cell_centers(self) -> np.ndarray:
        h, w = self.extent
        centers = []
        for r in range(GRID_DIM):
            for c in range(GRID_DIM):
                centers.append(((r + 0.5) * h / GRID_DIM, (c + 0.5) * w / GRID_DIM))
        return np.asarray(centers)


def windows_through(doy: int) -> list[CompositeWindow]:
    """All 20-day windows from DOY 91 that have fully elapsed by ``doy``."""
    out = []
    k = 0
    while WINDOW_START_DOY + WINDOW_LENGTH * (k + 1) - 1 <= doy:
        start = WINDOW_START_DOY + WINDOW_LENGTH * k
        out.append(CompositeWindow(start, start + WINDOW_LENGTH - 1))
        k += 1
    return out


def feature_names(band_names: list[str], n_windows: int) -> list[str]:
    per = list(band_names) + list(INDEX_FEATURES)
    return [f"w{k}:{name}" for k in range(n_windows) for name in per]


def extract_patch_features(stacks: list[BandStack], windows: list[CompositeWindow]) -> np.ndarray:
    """Per-window median feature planes, shape (windows, bands+4, H, W).

    Indices are computed per observation date and median-composited like the
    bands; pixels with no valid observation in a window carry NaN.
    """
    if not stacks:
        raise ValueError("no stacks to extract features from")
    bands = stacks[0].band_names
    h, w = stacks[0].height, stacks[0].width
    n_feat = len(bands) + len(INDEX_FEATURES)
    out = np.full((len(windows), n_feat, h, w), np.nan, dtype=np.float32)
    for wi, window in enumerate(windows):
        chosen = [s for s in stacks if window.contains(s.doy)]
        if not chosen:
            continue
        planes = np.stack([s.planes for s in chosen])       # (T, B, H, W)
        valid = np.stack([s.valid for s in chosen])         # (T, H, W)
        med, _ = lower_median(planes, valid[:, None, :, :])
        out[wi, : len(bands)] = med
        for ii, idx_name in enumerate(INDEX_FEATURES):
            vals = np.stack([compute_index(s, idx_name) for s in chosen])
            med_i, _ = lower_median(vals, np.isfinite(vals))
            out[wi, len(bands) + ii] = med_i
    return out


def gather_feature_rows(fplanes: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                        n_windows: int | None = None) -> np.ndarray:
    k = fplanes.shape[0] if n_windows is None else n_windows
    rows = fplanes[:k, :, ys, xs]            # (k, F, n)
    return rows.reshape(k * fplanes.shape[1], -1).T.astype(np.float32)


# ---------------------------------------------------------------------------
# gridded sampling
# ---------------------------------------------------------------------------

def sample_training(
    label_cells: list[np.ndarray],
    never_crop: list[np.ndarray],
    layout: SceneLayout,
    class_codes: list[int],
    class_names: dict[int, str],
    n_per_class: int = 2000,
    seed: int = 0,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Draw up to ``n_per_class`` pixels per class per grid cell.

    ``label_cells`` holds one per-patch array of usable class labels
    (anything not in ``class_codes`` is ignored); background pixels come
    from the never-crop masks.  A cell missing a class borrows the pool of
    the nearest cell that has it (Euclidean centre distance, ties by
    row-major cell index).  Returns per cell (coords (n,3): patch,y,x) and
    class codes, sampling uniformly without replacement.
    """
    all_codes = [BACKGROUND] + [c for c in class_codes if c != BACKGROUND]
    pools: dict[int, dict[int, list[np.ndarray]]] = {
        cell: {c: [] for c in all_codes} for cell in range(GRID_DIM ** 2)
    }
    for p, cells in enumerate(label_cells):
        oy, ox = layout.origin(p)
        for code in all_codes:
            sel = never_crop[p] if code == BACKGROUND else (cells == code)
            ys, xs = np.nonzero(sel)
            if ys.size == 0:
                continue
            cell_idx = layout.cell_of(ys + oy, xs + ox)
            order = np.argsort(cell_idx, kind="stable")
            cell_sorted = cell_idx[order]
            bounds = np.searchsorted(cell_sorted, np.arange(GRID_DIM ** 2 + 1))
            for cell in range(GRID_DIM ** 2):
                lo, hi = bounds[cell], bounds[cell + 1]
                if hi > lo:
                    take = order[lo:hi]
                    coords = np.column_stack([
                        np.full(hi - lo, p, dtype=np.int32),
                        ys[take].astype(np.int32),
                        xs[take].astype(np.int32),
                    ])
                    pools[cell][code].append(coords)
    merged = {cell: {c: (np.concatenate(v) if v else np.empty((0, 3), np.int32))
                     for c, v in by_class.items()}
              for cell, by_class in pools.items()}
    for code in all_codes:
        if all(len(merged[cell][code]) == 0 for cell in merged):
            name = "background" if code == BACKGROUND else class_names.get(code, str(code))
            raise ValueError(f"no usable labels anywhere for class {name!r}")

    centers = layout.cell_centers()
    dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    out = {}
    for cell in range(GRID_DIM ** 2):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, _S_SAMPLE, cell]))
        coords_parts, y_parts = [], []
        for code in all_codes:
            pool = merged[cell][code]
            if len(pool) == 0:
                order = np.lexsort((np.arange(GRID_DIM ** 2), dist[cell]))
                donor = next(c for c in order if len(merged[c][code]) > 0)
                pool = merged[donor][code]
            take = rng.choice(len(pool), size=min(n_per_class, len(pool)), replace=False)
            coords_parts.append(pool[np.sort(take)])
            y_parts.append(np.full(len(take), code, dtype=np.int64))
        out[cell] = (np.concatenate(coords_parts), np.concatenate(y_parts))
    return out


# ---------------------------------------------------------------------------
# per-cell forest training and scene classification
# ---------------------------------------------------------------------------

def build_cell_matrices(
    samples: dict[int, tuple[np.ndarray, np.ndarray]],
    patch_features: list[np.ndarray],
    n_windows: int,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Gather feature rows for sampled pixels, patch by patch."""
    out = {}
    for cell, (coords, y) in samples.items():
        rows = np.empty((len(coords), n_windows * patch_features[0].shape[1]), np.float32)
        for p in np.unique(coords[:, 0]):
            sel = coords[:, 0] == p
            rows[sel] = gather_feature_rows(patch_features[p], coords[sel, 1],
                                            coords[sel, 2], n_windows)
        out[cell] = (rows, y)
    return out


def train_cell_forests(
    matrices: dict[int, tuple[np.ndarray, np.ndarray]],
    hyper: ForestHyper,
    seed: int = 0,
) -> dict[int, ForestModel]:
    models = {}
    for cell in sorted(matrices):
        X, y = matrices[cell]
        cell_seed = int(np.random.SeedSequence([seed & 0xFFFFFFFF, _S_CELL, cell])
                        .generate_state(1)[0])
        models[cell] = fit_forest(X, y, hyper, seed=cell_seed)
    return models


def classify_patch(
    models: dict[int, ForestModel],
    fplanes: np.ndarray,
    layout: SceneLayout,
    patch: int,
    class_table: dict[int, str],
    n_windows: int,
    chunk: int = 1 << 16,
) -> LabelRaster:
    """Classify one patch with each pixel's grid-cell model.

    Pixels whose features are all missing come back unknown.
    """
    _, n_feat, h, w = fplanes.shape
    flat = fplanes[:n_windows].reshape(n_windows * n_feat, h * w).T
    ys, xs = np.divmod(np.arange(h * w), w)
    oy, ox = layout.origin(patch)
    cell_idx = layout.cell_of(ys + oy, xs + ox)
    cells_out = np.full(h * w, UNKNOWN, dtype=np.uint16)
    observable = ~np.isnan(flat).all(axis=1)
    for cell in np.unique(cell_idx):
        sel = np.nonzero((cell_idx == cell) & observable)[0]
        model = models[int(cell)]
        for i in range(0, len(sel), chunk):
            part = sel[i: i + chunk]
            cells_out[part] = model.predict(flat[part]).astype(np.uint16)
    return LabelRaster(cells_out.reshape(h, w), dict(class_table))


# ---------------------------------------------------------------------------
# harmonic regression baseline machinery
# ---------------------------------------------------------------------------

HARMONIC_PERIOD = 365.0
HARMONIC_TERMS = 6  # intercept, trend, two harmonic pairs
MIN_HARMONIC_OBS = 7


def harmonic_design(doys: np.ndarray) -> np.ndarray:
    t = np.asarray(doys, dtype=np.float64)
    w = 2.0 * np.pi * t / HARMONIC_PERIOD
    return np.column_stack([
        np.ones_like(t), t,
        np.cos(w), np.sin(w),
        np.cos(2 * w), np.sin(2 * w),
    ])


def fit_harmonic(doys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Least-squares harmonic fit y(t) = c0 + c1 t + sum_k a_k cos + b_k sin.

    Returns [c0, c1, a1, b1, a2, b2]; requires at least 7 observations and a
    full-rank design.
    """
    doys = np.asarray(doys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(doys) < MIN_HARMONIC_OBS:
        raise ValueError("need at least 7 observations for a harmonic fit")
    X = harmonic_design(doys)
    if np.linalg.matrix_rank(X) < HARMONIC_TERMS:
        raise ValueError("rank-deficient harmonic design (too few distinct dates)")
    coef, *_ = np.linalg.lstsq(X, values, rcond=None)
    return coef


def harmonic_patch_features(stacks: list[BandStack]) -> np.ndarray:
    """Per-pixel per-band harmonic coefficients, shape (bands*6, H, W).

    Pixels with fewer than 7 valid observations in a band get NaN for that
    band's coefficients.  Pixels are grouped by their validity pattern so
    each distinct pattern is solved once.
    """
    bands = stacks[0].band_names
    h, w = stacks[0].height, stacks[0].width
    doys = np.array([s.doy for s in stacks], dtype=np.float64)
    X_full = harmonic_design(doys)
    valid = np.stack([s.valid for s in stacks]).reshape(len(stacks), -1)  # (T, N)
    out = np.full((len(bands) * HARMONIC_TERMS, h * w), np.nan, dtype=np.float32)
    patterns, inverse = np.unique(valid.T, axis=0, return_inverse=True)
    values = np.stack([s.planes for s in stacks])  # (T, B, H, W)
    values = values.reshape(len(stacks), len(bands), -1)
    for gi, pattern in enumerate(patterns):
        rows = np.nonzero(pattern)[0]
        if len(rows) < MIN_HARMONIC_OBS:
            continue
        X = X_full[rows]
        if np.linalg.matrix_rank(X) < HARMONIC_TERMS:
            continue
        cols = np.nonzero(inverse == gi)[0]
        for b in range(len(bands)):
            y = values[:, b][np.ix_(rows, cols)]
            coef, *_ = np.linalg.lstsq(X, y, rcond=None)
            out[b * HARMONIC_TERMS: (b + 1) * HARMONIC_TERMS, cols] = coef.astype(np.float32)
    return out.reshape(len(bands) * HARMONIC_TERMS, h, w)


def gather_harmonic_rows(hplanes: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    return hplanes[:, ys, xs].T.astype(np.float32)


def classify_patch_harmonic(
    models: dict[int, ForestModel],
    hplanes: np.ndarray,
    layout: SceneLayout,
    patch: int,
    class_table: dict[int, str],
    chunk: int = 1 << 16,
) -> LabelRaster:
    n_feat, h, w = hplanes.shape
    flat = hplanes.reshape(n_feat, h * w).T
    ys, xs = np.divmod(np.arange(h * w), w)
    oy, ox = layout.origin(patch)
    cell_idx = layout.cell_of(ys + oy, xs + ox)
    cells_out = np.full(h * w, UNKNOWN, dtype=np.uint16)
    observable = ~np.isnan(flat).all(axis=1)
    for cell in np.unique(cell_idx):
        sel = np.nonzero((cell_idx == cell) & observable)[0]
        model = models[int(cell)]
        for i in range(0, len(sel), chunk):
            part = sel[i: i + chunk]
            cells_out[part] = model.predict(flat[part]).astype(np.uint16)
    return LabelRaster(cells_out.reshape(h, w), dict(class_table))
