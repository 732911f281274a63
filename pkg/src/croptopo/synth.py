"""Synthetic multi-year scenes with class-conditional spectral trajectories.

Stands in for real satellite archives at desk scale: rectangular fields tile
each patch, every class follows a per-band seasonal trajectory with Gaussian
pixel noise, and per-year additive offsets plus a planting delay model
inter-annual variability while preserving the relative position of crop
clusters in feature space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import BACKGROUND, BandStack, LabelRaster

BACKGROUND_NAME = "background"

# sub-stream tags for seed derivation
_S_LAYOUT, _S_ASSIGN, _S_NOISE, _S_CLOUD, _S_JITTER = range(5)

DEFAULT_STEP_DOYS = (151, 161, 171, 181, 191, 201, 211, 221, 231, 241, 251, 261)

SYNTH_BANDS = ("Blue", "Green", "Red", "RDEG1", "NIR", "SWIR1")


@dataclass
class ClassTrajectory:
    """Seasonal mean/std reflectance anchors for one class, per band.

    ``means``/``stds`` are (anchors, bands); values between anchor days are
    linearly interpolated and clamped at the season ends.  ``year_offset``
    adds a per-band shift and ``year_delay`` slides the whole season later,
    modelling inter-annual weather/management variability.
    """

    name: str
    band_names: list[str]
    anchor_doys: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    year_offset: dict[int, np.ndarray] = field(default_factory=dict)
    year_delay: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.anchor_doys = np.asarray(self.anchor_doys, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.shape != (len(self.anchor_doys), len(self.band_names)):
            raise ValueError("means shape must be (anchors, bands)")
        if self.stds.shape != self.means.shape:
            raise ValueError("stds shape must match means")
        if (self.stds < 0).any():
            raise ValueError("stds must be non-negative")

    def mean_at(self, doy: float, year: int) -> np.ndarray:
        t = doy - self.year_delay.get(year, 0.0)
        base = np.array([
            np.interp(t, self.anchor_doys, self.means[:, b])
            for b in range(len(self.band_names))
        ])
        off = self.year_offset.get(year)
        return base if off is None else base + np.asarray(off, dtype=np.float64)

    def std_at(self, doy: float, year: int) -> np.ndarray:
        t = doy - self.year_delay.get(year, 0.0)
        return np.array([
            np.interp(t, self.anchor_doys, self.stds[:, b])
            for b in range(len(self.band_names))
        ])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "band_names": list(self.band_names),
            "anchor_doys": self.anchor_doys.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "year_offset": {str(y): np.asarray(v).tolist() for y, v in self.year_offset.items()},
            "year_delay": {str(y): float(v) for y, v in self.year_delay.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTrajectory":
        return cls(
            name=d["name"],
            band_names=list(d["band_names"]),
            anchor_doys=np.asarray(d["anchor_doys"]),
            means=np.asarray(d["means"]),
            stds=np.asarray(d["stds"]),
            year_offset={int(y): np.asarray(v) for y, v in d.get("year_offset", {}).items()},
            year_delay={int(y): float(v) for y, v in d.get("year_delay", {}).items()},
        )


@dataclass
class SceneConfig:
    proportions: dict[str, float]
    patch_size: int = 512
    patches: int = 8
    field_side: tuple[int, int] = (16, 96)
    step_doys: tuple[int, ...] = DEFAULT_STEP_DOYS
    cloud_prob: float = 0.1
    cloud_block: int = 32
    patch_jitter_std: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 64:
            raise ValueError("patch_size must be at least 64")
        if abs(sum(self.proportions.values()) - 1.0) > 1e-9:
            raise ValueError("class proportions must sum to 1")
        if BACKGROUND_NAME not in self.proportions:
            raise ValueError("proportions must include a background class")
        lo, hi = self.field_side
        if not 1 <= lo <= hi:
            raise ValueError("bad field side range")

    def to_dict(self) -> dict:
        return {
            "proportions": dict(self.proportions),
            "patch_size": self.patch_size,
            "patches": self.patches,
            "field_side": list(self.field_side),
            "step_doys": list(self.step_doys),
            "cloud_prob": self.cloud_prob,
            "cloud_block": self.cloud_block,
            "patch_jitter_std": self.patch_jitter_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "field_side" in d:
            d["field_side"] = tuple(d["field_side"])
        if "step_doys" in d:
            d["step_doys"] = tuple(d["step_doys"])
        return cls(**d)


@dataclass
class ScenePatch:
    index: int
    stacks: list[BandStack]
    truth: LabelRaster
    never_crop: np.ndarray


@dataclass
class Scene:
    year: int
    step_doys: tuple[int, ...]
    class_table: dict[int, str]
    patches: list[ScenePatch]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *stream]))


def _tile_patch(rng: np.random.Generator, size: int, lo: int, hi: int) -> list[tuple[int, int, int, int]]:
    rects = []
    y = 0
    while y < size:
        h = min(int(rng.integers(lo, hi + 1)), size - y)
        x = 0
        while x < size:
            w = min(int(rng.integers(lo, hi + 1)), size - x)
            rects.append((y, y + h, x, x + w))
            x += w
        y += h
    return rects


def _greedy_assign(rng, areas: np.ndarray, names: list[str], targets: dict[str, float]) -> list[str]:
    """Assign rectangles to classes, tracking the remaining area deficit.

    Rectangles are processed largest first (random tie-break among equal
    areas) so the end-game uses the smallest fields to trim each class to
    its target share; a final repair pass moves single rectangles while it
    strictly reduces the total absolute error.
    """
    n = len(areas)
    order = np.lexsort((rng.random(n), -areas))
    deficit = {c: float(targets[c]) for c in names}
    owner = [""] * n
    for k in order:
        c = max(names, key=lambda m: deficit[m])
        owner[k] = c
        deficit[c] -= areas[k]
    for _ in range(4 * n):
        over = min(names, key=lambda m: deficit[m])
        under = max(names, key=lambda m: deficit[m])
        best_gain, best_k = 0.0, -1
        for k in range(n):
            if owner[k] != over:
                continue
            gain = (abs(deficit[over]) + abs(deficit[under])
                    - abs(deficit[over] + areas[k]) - abs(deficit[under] - areas[k]))
            if gain > best_gain:
                best_gain, best_k = gain, k
        if best_k < 0:
            break
        owner[best_k] = under
        deficit[over] += areas[best_k]
        deficit[under] -= areas[best_k]
    return owner


def _paint(size: int, rects, owner, code_of: dict[str, int]) -> np.ndarray:
    out = np.zeros((size, size), dtype=np.uint16)
    for (y0, y1, x0, x1), name in zip(rects, owner):
        out[y0:y1, x0:x1] = code_of[name]
    return out


def class_table_for(trajectories: list[ClassTrajectory]) -> dict[int, str]:
    crops = [t.name for t in trajectories if t.name != BACKGROUND_NAME]
    return {i + 1: name for i, name in enumerate(crops)}


def generate_scene(
    config: SceneConfig,
    trajectories: list[ClassTrajectory],
    year: int,
    seed: int | None = None,
) -> Scene:
    """Generate one year of a scene: per-step stacks, truth and never-crop mask.

    The field layout and the background/crop split are derived from the seed
    alone, so every year of an experiment shares them: the never-crop mask
    (background in all years) is the layout's background area.  Crop classes
    are (re)assigned to the remaining fields per year.
    """
    seed = config.seed if seed is None else seed
    by_name = {t.name: t for t in trajectories}
    if BACKGROUND_NAME not in by_name:
        raise ValueError("need a background trajectory")
    crops = [t.name for t in trajectories if t.name != BACKGROUND_NAME]
    if len(crops) < 2:
        raise ValueError("need at least two crop classes")
    unknown = set(config.proportions) - set(by_name)
    if unknown:
        raise ValueError(f"proportions name classes without trajectories: {sorted(unknown)}")
    bands = list(trajectories[0].band_names)
    for t in trajectories:
        if list(t.band_names) != bands:
            raise ValueError("trajectories must share band order")
    table = class_table_for(trajectories)
    code_of = {name: cid for cid, name in table.items()}
    code_of[BACKGROUND_NAME] = BACKGROUND

    size, lo, hi = config.patch_size, *config.field_side
    if hi > size:
        raise ValueError("field sides exceed patch size")
    n_classes = len(table) + 1  # + background
    # per-class (step, band) lookup tables for this year
    mean_lut = np.zeros((n_classes, len(config.step_doys), len(bands)), dtype=np.float64)
    std_lut = np.zeros_like(mean_lut)
    for name, cid in code_of.items():
        t = by_name[name]
        for s, doy in enumerate(config.step_doys):
            mean_lut[cid, s] = t.mean_at(doy, year)
            std_lut[cid, s] = t.std_at(doy, year)

    patches = []
    for p in range(config.patches):
        layout_rng = _rng(seed, p, _S_LAYOUT)
        rects = _tile_patch(layout_rng, size, lo, hi)
        areas = np.array([(y1 - y0) * (x1 - x0) for (y0, y1, x0, x1) in rects], dtype=np.float64)
        total = float(areas.sum())
        # background fields are fixed across years; crop fields rotate
        bg_split = _greedy_assign(
            layout_rng, areas, [BACKGROUND_NAME, "crop"],
            {BACKGROUND_NAME: config.proportions[BACKGROUND_NAME] * total,
             "crop": (1.0 - config.proportions[BACKGROUND_NAME]) * total},
        )
        crop_idx = [k for k, c in enumerate(bg_split) if c == "crop"]
        crop_area = float(areas[crop_idx].sum())
        crop_props = {c: config.proportions.get(c, 0.0) for c in crops}
        crop_total = sum(crop_props.values())
        assign_rng = _rng(seed, p, _S_ASSIGN, year)
        crop_owner = _greedy_assign(
            assign_rng, areas[crop_idx], crops,
            {c: (crop_props[c] / crop_total) * crop_area for c in crops},
        ) if crop_total > 0 else []
        owner = list(bg_split)
        for k, name in zip(crop_idx, crop_owner):
            owner[k] = name
        truth_cells = _paint(size, rects, owner, code_of)
        never_crop = truth_cells == BACKGROUND
        cls_map = truth_cells.astype(np.intp)  # background==0 indexes row 0

        noise_rng = _rng(seed, p, _S_NOISE, year)
        jitter_rng = _rng(seed, p, _S_JITTER, year)
        cloud_rng = _rng(seed, p, _S_CLOUD, year)
        stacks = []
        for s, doy in enumerate(config.step_doys):
            jitter = jitter_rng.normal(0.0, config.patch_jitter_std, len(bands))
            planes = np.empty((len(bands), size, size), dtype=np.float32)
            for b in range(len(bands)):
                mean_plane = mean_lut[cls_map, s, b]
                std_plane = std_lut[cls_map, s, b]
                noise = noise_rng.standard_normal((size, size))
                planes[b] = mean_plane + jitter[b] + noise * std_plane
            gb = -(-size // config.cloud_block)
            blocks = cloud_rng.random((gb, gb)) < config.cloud_prob
            cloud = np.kron(blocks, np.ones((config.cloud_block, config.cloud_block), bool))
            cloud = cloud[:size, :size]
            planes[:, cloud] = np.nan
            stacks.append(BandStack(list(bands), planes, ~cloud, int(doy), year))
        truth = LabelRaster(truth_cells, dict(table))
        patches.append(ScenePatch(p, stacks, truth, never_crop))
    return Scene(year, tuple(config.step_doys), table, patches)


def configured_jm(
    traj_a: ClassTrajectory,
    traj_b: ClassTrajectory,
    doy: float,
    year: int,
    feature_x: str,
    feature_y: str,
) -> float:
    """Closed-form JM distance between two configured class Gaussians.

    Evaluated in the (feature_x, feature_y) plane with diagonal covariance;
    shared patch jitter shifts both classes equally so it drops out.
    """
    bands = traj_a.band_names
    ix, iy = bands.index(feature_x), bands.index(feature_y)
    mu = traj_a.mean_at(doy, year)[[ix, iy]] - traj_b.mean_at(doy, year)[[ix, iy]]
    va = traj_a.std_at(doy, year)[[ix, iy]] ** 2
    vb = traj_b.std_at(doy, year)[[ix, iy]] ** 2
    avg = 0.5 * (va + vb)
    bhat = 0.125 * float((mu ** 2 / avg).sum())
    bhat += 0.5 * float(np.log(avg.prod() / np.sqrt(va.prod() * vb.prod())))
    return 2.0 * (1.0 - np.exp(-bhat))


def first_separable_step(
    config: SceneConfig,
    trajectories: list[ClassTrajectory],
    year: int,
    pair: tuple[str, str],
    feature_x: str,
    feature_y: str,
    threshold: float = 1.5,
) -> int | None:
    """First step index whose configured class Gaussians reach the JM threshold."""
    by_name = {t.name: t for t in trajectories}
    a, b = by_name[pair[0]], by_name[pair[1]]
    for s, doy in enumerate(config.step_doys):
        if configured_jm(a, b, doy, year, feature_x, feature_y) >= threshold:
            return s
    return None


# ---------------------------------------------------------------------------
# default experiment configurations
# ---------------------------------------------------------------------------

_ANCHORS = (91, 151, 161, 171, 181, 191, 201, 221, 241, 261, 281)

# per-band seasonal anchors (rows follow _ANCHORS); green-up runs over two
# anchor intervals so delayed years sample mid-transition cluster positions
# that training years also visit
_CORN = {
    "Blue":  (0.055, 0.055, 0.055, 0.049, 0.044, 0.043, 0.042, 0.042, 0.046, 0.050, 0.054),
    "Green": (0.080, 0.080, 0.080, 0.075, 0.070, 0.069, 0.068, 0.068, 0.072, 0.076, 0.080),
    "Red":   (0.095, 0.095, 0.095, 0.078, 0.060, 0.057, 0.055, 0.055, 0.065, 0.080, 0.092),
    "RDEG1": (0.145, 0.145, 0.145, 0.123, 0.100, 0.098, 0.096, 0.096, 0.112, 0.125, 0.140),
    "NIR":   (0.220, 0.220, 0.225, 0.300, 0.370, 0.380, 0.390, 0.385, 0.350, 0.300, 0.250),
    "SWIR1": (0.330, 0.330, 0.330, 0.255, 0.175, 0.168, 0.160, 0.158, 0.170, 0.205, 0.260),
}
_SOY = {
    "Blue":  (0.057, 0.057, 0.057, 0.057, 0.056, 0.050, 0.045, 0.044, 0.044, 0.050, 0.055),
    "Green": (0.083, 0.083, 0.083, 0.083, 0.082, 0.077, 0.072, 0.071, 0.071, 0.077, 0.082),
    "Red":   (0.098, 0.098, 0.098, 0.098, 0.096, 0.082, 0.060, 0.058, 0.058, 0.070, 0.090),
    "RDEG1": (0.150, 0.150, 0.150, 0.150, 0.148, 0.140, 0.128, 0.124, 0.122, 0.132, 0.146),
    "NIR":   (0.225, 0.225, 0.225, 0.228, 0.235, 0.330, 0.430, 0.420, 0.390, 0.320, 0.260),
    "SWIR1": (0.335, 0.335, 0.335, 0.335, 0.330, 0.290, 0.245, 0.240, 0.248, 0.272, 0.315),
}
_RICE = {
    "Blue":  (0.052, 0.052, 0.052, 0.045, 0.044, 0.043, 0.042, 0.042, 0.044, 0.048, 0.053),
    "Green": (0.078, 0.078, 0.078, 0.065, 0.064, 0.064, 0.063, 0.063, 0.065, 0.070, 0.076),
    "Red":   (0.090, 0.090, 0.090, 0.058, 0.056, 0.054, 0.052, 0.052, 0.055, 0.065, 0.080),
    "RDEG1": (0.140, 0.140, 0.140, 0.108, 0.110, 0.112, 0.115, 0.118, 0.120, 0.130, 0.140),
    "NIR":   (0.210, 0.210, 0.210, 0.140, 0.200, 0.280, 0.360, 0.380, 0.370, 0.330, 0.270),
    "SWIR1": (0.315, 0.315, 0.315, 0.105, 0.108, 0.112, 0.118, 0.125, 0.135, 0.160, 0.220),
}
_BACKGROUND = {
    "Blue":  (0.090,) * 11,
    "Green": (0.115,) * 11,
    "Red":   (0.130,) * 11,
    "RDEG1": (0.210,) * 11,
    "NIR":   (0.280,) * 11,
    "SWIR1": (0.420,) * 11,
}

# crop noise narrows at canopy closure; visible bands are quieter
_CROP_STD = (0.013, 0.013, 0.013, 0.012, 0.012, 0.010, 0.010, 0.010, 0.011, 0.012, 0.014)
_VIS_FACTOR = 0.6

# Inter-annual shifts move the whole season along the baseline classifier's
# favourite axes (SWIR1 crosses the historical corn/soy decision boundary in
# the target year) while the cluster arrangement itself stays put; the
# slightly negative RDEG1 drift keeps target-year clusters 2D-distinct from
# every historical cluster position.
_DEFAULT_YEAR_OFFSET = {
    2017: {b: 0.0 for b in SYNTH_BANDS},
    2018: {"Blue": 0.004, "Green": 0.004, "Red": 0.004, "RDEG1": -0.006, "NIR": 0.026, "SWIR1": 0.055},
    2019: {"Blue": 0.008, "Green": 0.008, "Red": 0.008, "RDEG1": -0.012, "NIR": 0.050, "SWIR1": 0.078},
}
_DEFAULT_YEAR_DELAY = {2017: 0.0, 2018: 5.0, 2019: 12.0}


def _build_trajectory(name: str, table: dict[str, tuple], std_scale: float = 1.0,
                      flat_std: float | None = None) -> ClassTrajectory:
    bands = list(SYNTH_BANDS)
    means = np.column_stack([np.asarray(table[b], dtype=np.float64) for b in bands])
    if flat_std is not None:
        base = np.full(len(_ANCHORS), flat_std)
    else:
        base = np.asarray(_CROP_STD, dtype=np.float64) * std_scale
    factors = np.array([_VIS_FACTOR if b in ("Blue", "Green", "Red") else 1.0 for b in bands])
    stds = np.outer(base, factors)
    offs = {y: np.array([v[b] for b in bands]) for y, v in _DEFAULT_YEAR_OFFSET.items()}
    return ClassTrajectory(
        name=name,
        band_names=bands,
        anchor_doys=np.asarray(_ANCHORS, dtype=np.float64),
        means=means,
        stds=stds,
        year_offset=offs,
        year_delay=dict(_DEFAULT_YEAR_DELAY),
    )


def default_corn_soy_config() -> tuple[SceneConfig, list[ClassTrajectory]]:
    """Corn/soybean scene: corn sits bottom-left of soybeans in RDEG1/SWIR1
    during green-up, then directly below once both canopies close."""
    config = SceneConfig(
        proportions={"corn": 0.36, "soybean": 0.34, BACKGROUND_NAME: 0.30},
    )
    trajectories = [
        _build_trajectory("corn", _CORN),
        _build_trajectory("soybean", _SOY),
        _build_trajectory(BACKGROUND_NAME, _BACKGROUND, flat_std=0.015),
    ]
    return config, trajectories


def default_rice_corn_soy_config() -> tuple[SceneConfig, list[ClassTrajectory]]:
    """Rice/corn/soybean scene: flooded paddies keep rice below corn in
    RDEG1/SWIR1 at every step; corn and soybeans behave as in the two-crop
    configuration."""
    config = SceneConfig(
        proportions={"rice": 0.22, "corn": 0.28, "soybean": 0.24, BACKGROUND_NAME: 0.26},
        patches=6,
    )
    trajectories = [
        _build_trajectory("rice", _RICE),
        _build_trajectory("corn", _CORN),
        _build_trajectory("soybean", _SOY),
        _build_trajectory(BACKGROUND_NAME, _BACKGROUND, flat_std=0.015),
    ]
    return config, trajectories
