"""Multi-band raster patches: band math, indices, masking, compositing, file I/O.

A :class:`BandStack` holds one multi-band reflectance patch observed (or
composited) around one day of year.  A :class:`LabelRaster` holds per-pixel
class assignments.  Both have a simple on-disk container: a UTF-8 key/value
text header terminated by a blank line, followed by a little-endian binary
body (float32 planes + a validity byte plane for ``.bst``, one uint16 code
plane for ``.lbl``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Reflectance sanity bounds: values outside are treated as garbage and the
# pixel is masked invalid (tolerates atmospheric-correction overshoot).
REFLECTANCE_MIN = -0.2
REFLECTANCE_MAX = 1.6

# Bands every default experiment expects to find in a stack.
DEFAULT_BANDS = ("Blue", "Green", "Red", "RDEG1", "NIR", "SWIR1")

# Label raster cell codes.
BACKGROUND = 0
CONFLICT = 65534
UNKNOWN = 65535

FORMAT_VERSION = "1"

INDEX_NAMES = ("NDVI", "EVI", "GCVI", "LSWI")

_INDEX_BANDS = {
    "NDVI": ("NIR", "Red"),
    "EVI": ("NIR", "Red", "Blue"),
    "GCVI": ("NIR", "Green"),
    "LSWI": ("NIR", "SWIR1"),
}

_DENOM_EPS = 1e-6


@dataclass
class BandStack:
    """One multi-band raster patch at one date.

    ``planes`` is a (bands, height, width) float32 array ordered like
    ``band_names``.  ``valid`` marks clear observations; construction
    additionally invalidates pixels holding non-finite or out-of-range
    values in any band.
    """

    band_names: list[str]
    planes: np.ndarray
    valid: np.ndarray
    doy: int
    year: int
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float32)
        if self.planes.ndim != 3:
            raise ValueError("planes must be (bands, height, width)")
        if len(self.band_names) != self.planes.shape[0]:
            raise ValueError("band count does not match plane count")
        if len(set(self.band_names)) != len(self.band_names):
            raise ValueError("band names must be unique")
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.planes.shape[1:]:
            raise ValueError("valid mask shape does not match planes")
        bad = ~np.isfinite(self.planes)
        bad |= (self.planes < REFLECTANCE_MIN) | (self.planes > REFLECTANCE_MAX)
        self.valid &= ~bad.any(axis=0)

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def band(self, name: str) -> np.ndarray:
        try:
            return self.planes[self.band_names.index(name)]
        except ValueError:
            raise ValueError(f"missing band {name!r}") from None

    def has_band(self, name: str) -> bool:
        return name in self.band_names

    def feature(self, name: str) -> np.ndarray:
        """Band plane or derived index plane, by name."""
        if name in self.band_names:
            return self.band(name)
        return compute_index(self, name)


@dataclass(frozen=True)
class TimeStep:
    """One position in a composited series."""

    index: int
    doy_start: int
    doy_end: int

    def __post_init__(self):
        if self.index < 0 or self.doy_start > self.doy_end:
            raise ValueError("bad time step window")


@dataclass(frozen=True)
class CompositeWindow:
    doy_start: int
    doy_end: int  # inclusive
    statistic: str = "median"

    def __post_init__(self):
        if self.doy_end < self.doy_start:
            raise ValueError("window length must be positive")
        if self.statistic != "median":
            raise ValueError(f"unsupported statistic {self.statistic!r}")

    def contains(self, doy: int) -> bool:
        return self.doy_start <= doy <= self.doy_end


@dataclass
class LabelRaster:
    """Per-pixel class assignments with a class table.

    Cell codes: 0 background, 1..N class ids, 65534 conflict, 65535 unknown.
    """

    cells: np.ndarray
    class_table: dict[int, str]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint16)
        if self.cells.ndim != 2:
            raise ValueError("cells must be 2-D")
        special = {BACKGROUND, CONFLICT, UNKNOWN}
        referenced = set(np.unique(self.cells).tolist()) - special
        missing = referenced - set(self.class_table)
        if missing:
            raise ValueError(f"cells reference unknown class ids {sorted(missing)}")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def mask_of(self, code: int) -> np.ndarray:
        return self.cells == code

    @property
    def is_class(self) -> np.ndarray:
        """True where the cell holds a real class id."""
        return (self.cells != BACKGROUND) & (self.cells != CONFLICT) & (self.cells != UNKNOWN)

    def copy(self) -> "LabelRaster":
        return LabelRaster(self.cells.copy(), dict(self.class_table), dict(self.meta))


def compute_index(stack: BandStack, index_name: str) -> np.ndarray:
    """Derived vegetation/water index plane for ``stack``.

    Invalid pixels and near-zero denominators (|den| < 1e-6) yield NaN.
    """
    if index_name not in _INDEX_BANDS:
        raise ValueError(f"unknown index {index_name!r}")
    for b in _INDEX_BANDS[index_name]:
        if not stack.has_band(b):
            raise ValueError(f"missing band {b!r} for {index_name}")
    nir = stack.band("NIR").astype(np.float64)
    if index_name == "NDVI":
        red = stack.band("Red").astype(np.float64)
        num, den = nir - red, nir + red
    elif index_name == "EVI":
        red = stack.band("Red").astype(np.float64)
        blue = stack.band("Blue").astype(np.float64)
        num, den = 2.5 * (nir - red), nir + 6.0 * red - 7.5 * blue + 1.0
    elif index_name == "GCVI":
        green = stack.band("Green").astype(np.float64)
        num, den = nir - green, green  # NIR/Green - 1 == (NIR - Green)/Green
    else:  # LSWI
        swir = stack.band("SWIR1").astype(np.float64)
        num, den = nir - swir, nir + swir
    ok = stack.valid & (np.abs(den) >= _DENOM_EPS)
    out = np.full(num.shape, np.nan, dtype=np.float32)
    np.divide(num, den, out=out, where=ok, casting="unsafe")
    out[~ok] = np.nan
    return out


def lower_median(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel lower median of ``values`` (T, ...) over ``valid`` entries.

    Returns (median, count); pixels with count 0 get NaN.  The lower median
    (element at index (k-1)//2 of the sorted valid values) is deterministic
    and independent of input order.
    """
    values = np.asarray(values, dtype=np.float32)
    work = np.where(valid, values, np.float32(np.inf))
    work = np.sort(work, axis=0)
    count = valid.sum(axis=0)
    idx = np.maximum(count - 1, 0) // 2
    med = np.take_along_axis(work, idx[None, ...], axis=0)[0]
    med = np.where(count > 0, med, np.float32(np.nan))
    return med, count


def composite(series: list[BandStack], window: CompositeWindow) -> BandStack:
    """Per-band lower-median composite of the stacks whose doy falls in ``window``.

    Output pixels are valid iff at least one contributing observation is
    valid there; output doy is the window midpoint.
    """
    if not series:
        raise ValueError("no observations in window")
    chosen = [s for s in series if window.contains(s.doy)]
    if not chosen:
        raise ValueError("no observations in window")
    first = chosen[0]
    for s in chosen[1:]:
        if s.band_names != first.band_names or s.planes.shape != first.planes.shape:
            raise ValueError("stacks must share geometry and band order")
    planes = np.stack([s.planes for s in chosen])          # (T, B, H, W)
    valid = np.stack([s.valid for s in chosen])            # (T, H, W)
    med, count = lower_median(planes, valid[:, None, :, :])
    out_valid = count.max(axis=0) > 0                      # same count per band
    return BandStack(
        band_names=list(first.band_names),
        planes=med,
        valid=out_valid,
        doy=(window.doy_start + window.doy_end) // 2,
        year=first.year,
    )


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------

_MAGIC_STACK = "croptopo-bandstack"
_MAGIC_LABEL = "croptopo-labelraster"


def _write_header(fh, magic: str, fields: dict[str, str]) -> None:
    lines = [f"format: {magic}", f"version: {FORMAT_VERSION}"]
    lines += [f"{k}: {v}" for k, v in fields.items()]
    fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))


def _read_header(fh, magic: str) -> dict[str, str]:
    raw = bytearray()
    while True:
        chunk = fh.read(1)
        if not chunk:
            raise ValueError("malformed header: unterminated")
        raw += chunk
        if raw.endswith(b"\n\n"):
            break
        if len(raw) > 65536:
            raise ValueError("malformed header: too long")
    fields = {}
    for line in raw.decode("utf-8").strip().split("\n"):
        if ":" not in line:
            raise ValueError(f"malformed header line {line!r}")
        k, v = line.split(":", 1)
        fields[k.strip()] = v.strip()
    if fields.pop("format", None) != magic:
        raise ValueError("malformed header: wrong format tag")
    if fields.pop("version", None) != FORMAT_VERSION:
        raise ValueError("unknown format version")
    return fields


_CORE_STACK_KEYS = ("width", "height", "bands", "doy", "year", "byteorder")
_CORE_LABEL_KEYS = ("width", "height", "classes", "byteorder")


def write_stack(stack: BandStack, path) -> None:
    fields = {
        "width": str(stack.width),
        "height": str(stack.height),
        "bands": ",".join(stack.band_names),
        "doy": str(stack.doy),
        "year": str(stack.year),
        "byteorder": "little",
    }
    fields.update({k: v for k, v in stack.meta.items() if k not in fields})
    with open(path, "wb") as fh:
        _write_header(fh, _MAGIC_STACK, fields)
        fh.write(stack.planes.astype("<f4", copy=False).tobytes())
        fh.write(stack.valid.astype(np.uint8).tobytes())


def read_stack(path) -> BandStack:
    with open(path, "rb") as fh:
        fields = _read_header(fh, _MAGIC_STACK)
        try:
            width, height = int(fields["width"]), int(fields["height"])
            bands = fields["bands"].split(",") if fields["bands"] else []
            doy, year = int(fields["doy"]), int(fields["year"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed header: {exc}") from None
        if fields.get("byteorder", "little") != "little":
            raise ValueError("malformed header: unsupported byte order")
        body = fh.read()
    n = len(bands) * height * width
    expect = 4 * n + height * width
    if len(body) != expect:
        raise ValueError(f"plane size mismatch: expected {expect} body bytes, found {len(body)}")
    planes = np.frombuffer(body[: 4 * n], dtype="<f4").reshape(len(bands), height, width)
    valid = np.frombuffer(body[4 * n:], dtype=np.uint8).reshape(height, width) != 0
    meta = {k: v for k, v in fields.items() if k not in _CORE_STACK_KEYS}
    return BandStack(bands, planes.copy(), valid, doy, year, meta)


def write_label(raster: LabelRaster, path) -> None:
    classes = ",".join(f"{cid}:{name}" for cid, name in sorted(raster.class_table.items()))
    fields = {
        "width": str(raster.width),
        "height": str(raster.height),
        "classes": classes,
        "byteorder": "little",
    }
    fields.update({k: v for k, v in raster.meta.items() if k not in fields})
    with open(path, "wb") as fh:
        _write_header(fh, _MAGIC_LABEL, fields)
        fh.write(raster.cells.astype("<u2", copy=False).tobytes())


def read_label(path) -> LabelRaster:
    with open(path, "rb") as fh:
        fields = _read_header(fh, _MAGIC_LABEL)
        try:
            width, height = int(fields["width"]), int(fields["height"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed header: {exc}") from None
        table = {}
        if fields.get("classes"):
            for entry in fields["classes"].split(","):
                cid, name = entry.split(":", 1)
                table[int(cid)] = name
        body = fh.read()
    if len(body) != 2 * width * height:
        raise ValueError("plane size mismatch in label raster body")
    cells = np.frombuffer(body, dtype="<u2").reshape(height, width)
    meta = {k: v for k, v in fields.items() if k not in _CORE_LABEL_KEYS}
    return LabelRaster(cells.copy(), table, meta)
