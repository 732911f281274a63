"""Cluster-arrangement recognizer: a small encoder-decoder over heat maps.

Trained on historical 4-channel inputs with half-mass targets (blank for
heat maps without a usable arrangement), then applied per time step in the
target year; labeled bins are projected back to pixels and accumulated
first-label-wins, with cross-model disagreements turning pixels into
conflicts that are excluded from classifier training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .heatmap import (
    TYPE_I,
    BinIndexMap,
    FourChannelInput,
    HeatMapConfig,
    TargetMask,
    build_channels,
    inverse_project,
    project,
)
from .raster import CONFLICT, UNKNOWN, BandStack, LabelRaster

DEFAULT_MIN_BINS = 20


class TopologyNet(nn.Module):
    """4-channel input, three pooled encoder stages mirrored by three
    up-sampling stages with skip connections, base width 16, three logits
    per bin (none / first class / second class)."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.enc1 = nn.Conv2d(4, base, 3, padding=1)
        self.enc2 = nn.Conv2d(base, base * 2, 3, padding=1)
        self.enc3 = nn.Conv2d(base * 2, base * 4, 3, padding=1)
        self.bott = nn.Conv2d(base * 4, base * 8, 3, padding=1)
        self.up3 = nn.ConvTranspose2d(base * 8, base * 4, 2, stride=2)
        self.dec3 = nn.Conv2d(base * 8, base * 4, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = nn.Conv2d(base * 4, base * 2, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = nn.Conv2d(base * 2, base, 3, padding=1)
        self.head = nn.Conv2d(base, 3, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(self.pool(e1)))
        e3 = F.relu(self.enc3(self.pool(e2)))
        b = F.relu(self.bott(self.pool(e3)))
        d3 = F.relu(self.dec3(torch.cat([self.up3(b), e3], dim=1)))
        d2 = F.relu(self.dec2(torch.cat([self.up2(d3), e2], dim=1)))
        d1 = F.relu(self.dec1(torch.cat([self.up1(d2), e1], dim=1)))
        return self.head(d1)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-3
    class_weights: tuple[float, float, float] | None = None  # None = tempered inverse frequency
    weight_cap: float = 2.0        # cap on the class/none weight ratio
    validation_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ValueError("validation fraction must be in [0, 0.5]")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "class_weights": list(self.class_weights) if self.class_weights else None,
                "weight_cap": self.weight_cap,
                "validation_fraction": self.validation_fraction, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("class_weights"):
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


@dataclass
class TrainingRecord:
    """One heat-map training example: channels plus a {0,1,2} bin target."""

    record_id: str
    patch: str
    time_step: int
    channels: np.ndarray  # (4, bins, bins) float32
    target: np.ndarray    # (bins, bins) int64, 0 none / 1 first / 2 second
    category: str


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_patches: list[str] = field(default_factory=list)


@dataclass
class RecognizerModel:
    pair_codes: tuple[int, int]
    pair_names: tuple[str, str]
    bins: int
    net: TopologyNet
    seed: int
    history: TrainHistory = field(default_factory=TrainHistory)


def pair_target(mask: TargetMask, pair_codes: tuple[int, int]) -> np.ndarray:
    """Map a class-coded target mask to the model's {0, 1, 2} vocabulary."""
    out = np.zeros(mask.grid.shape, dtype=np.int64)
    out[mask.grid == pair_codes[0]] = 1
    out[mask.grid == pair_codes[1]] = 2
    return out


def _class_weights(targets: torch.Tensor, override, cap: float) -> torch.Tensor:
    """Inverse-frequency weights with the ratio to the rarest-weight class
    capped: the none class dominates so heavily that uncapped weights push
    the argmax decision far outside the dense target cores."""
    if override is not None:
        return torch.tensor(override, dtype=torch.float32)
    counts = torch.bincount(targets.flatten(), minlength=3).double()
    total = counts.sum()
    w = torch.where(counts > 0, total / (3.0 * counts), torch.ones_like(counts))
    w = torch.minimum(w, w.min() * cap)
    return (w / w.mean()).float()


def training_loss(net: nn.Module, x: torch.Tensor, y: torch.Tensor,
                  weights: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(net(x), y, weight=weights)


def train(
    records: list[TrainingRecord],
    pair_codes: tuple[int, int],
    pair_names: tuple[str, str],
    cfg: TrainConfig,
) -> RecognizerModel:
    """Fit the recognizer on type-I records plus blank type-II records.

    Validation splits by patch id so time steps of one patch never straddle
    the split.  Deterministic given the seed.
    """
    if not any(r.category == TYPE_I for r in records):
        raise ValueError("nothing to learn: no type-I records")
    bins = records[0].channels.shape[-1]
    for r in records:
        if r.channels.shape != (4, bins, bins):
            raise ValueError("records must share bins")

    torch.manual_seed(cfg.seed)
    patches = sorted({r.patch for r in records})
    g = torch.Generator().manual_seed(cfg.seed)
    order = torch.randperm(len(patches), generator=g).tolist()
    n_val = int(round(cfg.validation_fraction * len(patches)))
    val_patches = {patches[i] for i in order[:n_val]}
    train_recs = [r for r in records if r.patch not in val_patches]
    val_recs = [r for r in records if r.patch in val_patches]
    if not any(r.category == TYPE_I for r in train_recs):
        train_recs, val_recs = list(records), []
        val_patches = set()

    x = torch.from_numpy(np.stack([r.channels for r in train_recs]))
    y = torch.from_numpy(np.stack([r.target for r in train_recs]))
    weights = _class_weights(y, cfg.class_weights, cfg.weight_cap)
    net = TopologyNet()
    # prior-shift init: nudge the class logits up so optimization does not
    # start inside the abstain-everywhere basin the none class creates
    with torch.no_grad():
        net.head.bias.copy_(torch.tensor([0.0, 2.0, 2.0]))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    history = TrainHistory(val_patches=sorted(val_patches))

    xv = yv = None
    if val_recs:
        xv = torch.from_numpy(np.stack([r.channels for r in val_recs]))
        yv = torch.from_numpy(np.stack([r.target for r in val_recs]))

    n = len(train_recs)
    for _epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        net.train()
        for i in range(0, n, cfg.batch_size):
            sel = perm[i: i + cfg.batch_size]
            opt.zero_grad()
            loss = training_loss(net, x[sel], y[sel], weights)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(sel)
        history.train_loss.append(total / n)
        if xv is not None:
            net.eval()
            with torch.no_grad():
                acc = []
                for i in range(0, len(xv), cfg.batch_size):
                    pred = net(xv[i: i + cfg.batch_size]).argmax(dim=1)
                    acc.append((pred == yv[i: i + cfg.batch_size]).float().mean().item())
                history.val_accuracy.append(float(np.mean(acc)))
    return RecognizerModel(tuple(pair_codes), tuple(pair_names), bins, net, cfg.seed, history)


def infer(model: RecognizerModel, four: FourChannelInput,
          min_bins: int = DEFAULT_MIN_BINS) -> np.ndarray:
    """Per-bin {0,1,2} mask; declared blank when too few bins are labeled."""
    if four.channels.shape[-1] != model.bins:
        raise ValueError("input bins do not match model")
    model.net.eval()
    with torch.no_grad():
        logits = model.net(torch.from_numpy(four.channels[None]))
        mask = logits.argmax(dim=1)[0].numpy().astype(np.int32)
    if (mask > 0).sum() < min_bins:
        return np.zeros_like(mask)
    return mask


def _merge_step(per_model: list[tuple[np.ndarray, tuple[int, int]]],
                index_map: BinIndexMap, class_table: dict[int, str]) -> LabelRaster:
    cells = np.full(index_map.rows.shape, UNKNOWN, dtype=np.uint16)
    for mask, pair in per_model:
        coded = np.zeros(mask.shape, dtype=np.int32)
        coded[mask == 1] = pair[0]
        coded[mask == 2] = pair[1]
        raster = inverse_project(TargetMask(coded, index_map.bins), index_map, class_table)
        new = raster.cells
        labeled = (new != UNKNOWN)
        fresh = labeled & (cells == UNKNOWN)
        clash = labeled & (cells != UNKNOWN) & (cells != CONFLICT) & (cells != new)
        cells[fresh] = new[fresh]
        cells[clash] = CONFLICT
    return LabelRaster(cells, dict(class_table))


def generate_labels(
    models: list[RecognizerModel],
    stacks: list[BandStack],
    never_crop: np.ndarray,
    config: HeatMapConfig,
    class_table: dict[int, str],
    min_bins: int = DEFAULT_MIN_BINS,
) -> list[LabelRaster]:
    """Label one patch: project, recognize and back-project every time step.

    Pixels assigned different classes by different pair models in the same
    step become conflicts; fully clouded steps yield all-unknown rasters.
    """
    if not models:
        raise ValueError("need at least one recognizer model")
    out = []
    for stack in stacks:
        if not stack.valid.any():
            out.append(LabelRaster(np.full(never_crop.shape, UNKNOWN, np.uint16),
                                   dict(class_table)))
            continue
        cand = project(stack, config, pixel_mask=~never_crop)
        never = project(stack, config, pixel_mask=never_crop)
        four = build_channels(cand.heatmap, never.heatmap)
        per_model = [(infer(m, four, min_bins=min_bins), m.pair_codes) for m in models]
        out.append(_merge_step(per_model, cand.index_map, class_table))
    return out


@dataclass
class AccumulatedLabels:
    raster: LabelRaster               # class / conflict / unknown per pixel
    first_step: np.ndarray            # int32, -1 where never labeled
    counts: dict[int, list[int]]      # per class: usable labels through step s
    conflicts: list[int]              # conflicted pixels through step s

    def usable_mask(self) -> np.ndarray:
        return self.raster.is_class


def accumulate(per_step: list[LabelRaster]) -> AccumulatedLabels:
    """First-label-wins accumulation with sticky conflicts.

    A pixel later assigned a different class (or flagged conflict by the
    merge) becomes conflict and is excluded from the usable counts, which
    are therefore non-decreasing per class.
    """
    if not per_step:
        raise ValueError("no label rasters to accumulate")
    shape = per_step[0].cells.shape
    table = dict(per_step[0].class_table)
    cells = np.full(shape, UNKNOWN, dtype=np.uint16)
    first = np.full(shape, -1, dtype=np.int32)
    conflict_at = np.full(shape, -1, dtype=np.int32)
    for s, raster in enumerate(per_step):
        if raster.cells.shape != shape:
            raise ValueError("geometry mismatch across steps")
        new = raster.cells
        is_new_class = raster.is_class
        was_conflict = cells == CONFLICT
        fresh = is_new_class & (cells == UNKNOWN)
        clash = (is_new_class & ~was_conflict & (cells != UNKNOWN) & (cells != new))
        clash |= (new == CONFLICT) & ~was_conflict
        cells[fresh] = new[fresh]
        first[fresh] = s
        cells[clash] = CONFLICT
        conflict_at[clash & (conflict_at < 0)] = s
    steps = len(per_step)
    usable = (cells != UNKNOWN) & (cells != CONFLICT)
    counts = {}
    for cid in sorted(table):
        sel = usable & (cells == cid)
        fs = first[sel]
        counts[cid] = np.cumsum(np.bincount(fs, minlength=steps)).tolist() if fs.size \
            else [0] * steps
    conf_first = conflict_at[conflict_at >= 0]
    conflicts = np.cumsum(np.bincount(conf_first, minlength=steps)).tolist() if conf_first.size \
        else [0] * steps
    return AccumulatedLabels(LabelRaster(cells, table), first, counts, conflicts)


def agreement(labels: LabelRaster, truth: LabelRaster, class_code: int) -> float | None:
    """Fraction of generated labels of one class that match the truth."""
    if labels.cells.shape != truth.cells.shape:
        raise ValueError("geometry mismatch")
    sel = labels.cells == class_code
    n = int(sel.sum())
    if n == 0:
        return None
    return float((truth.cells[sel] == class_code).sum()) / n


# ---------------------------------------------------------------------------
# checkpoint I/O: text header + flat little-endian float32 weights in
# named_parameters order
# ---------------------------------------------------------------------------

ARCH_DESCRIPTOR = "enc16-32-64/bott128/dec64-32-16/head3"


def save_model(model: RecognizerModel, path) -> None:
    n_params = sum(p.numel() for p in model.net.parameters())
    lines = [
        "format: croptopo-recognizer",
        "version: 1",
        f"architecture: {ARCH_DESCRIPTOR}",
        f"bins: {model.bins}",
        f"class_a: {model.pair_codes[0]}:{model.pair_names[0]}",
        f"class_b: {model.pair_codes[1]}:{model.pair_names[1]}",
        f"seed: {model.seed}",
        f"n_params: {n_params}",
        "byteorder: little",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for _name, p in model.net.named_parameters():
            fh.write(p.detach().numpy().astype("<f4", copy=False).tobytes())


def load_model(path) -> RecognizerModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, body = blob.partition(b"\n\n")
    if not sep:
        raise ValueError("malformed recognizer checkpoint")
    fields = dict(line.split(": ", 1) for line in head.decode("utf-8").split("\n"))
    if fields.get("format") != "croptopo-recognizer" or fields.get("version") != "1":
        raise ValueError("unknown recognizer checkpoint format")
    if fields.get("architecture") != ARCH_DESCRIPTOR:
        raise ValueError("unsupported architecture descriptor")
    ca, na = fields["class_a"].split(":", 1)
    cb, nb = fields["class_b"].split(":", 1)
    net = TopologyNet()
    flat = np.frombuffer(body, dtype="<f4")
    expect = int(fields["n_params"])
    if flat.size != expect:
        raise ValueError("weight vector size mismatch")
    off = 0
    with torch.no_grad():
        for _name, p in net.named_parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[off: off + n].reshape(p.shape).copy()))
            off += n
    return RecognizerModel((int(ca), int(cb)), (na, nb), int(fields["bins"]),
                           net, int(fields["seed"]))


def gradient_check(bins: int = 16, seed: int = 0, probes_per_param: int = 4,
                   eps: float = 1e-6, atol: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Runs a double-precision miniature of the training loss and probes a few
    entries of every parameter tensor.  Entries whose gradient magnitude sits
    below ``atol`` are measured against the ``atol`` scale instead, since
    central differences of a ~1.0 loss carry ~1e-10 roundoff of their own.
    """
    torch.manual_seed(seed)
    net = TopologyNet().double()
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.rand(2, 4, bins, bins, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (2, bins, bins), generator=g)
    weights = torch.tensor([0.5, 1.5, 1.0], dtype=torch.float64)

    loss = training_loss(net, x, y, weights)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, gmat in zip(net.parameters(), grads):
            flat = p.view(-1)
            gflat = gmat.view(-1)
            idx = rng.choice(flat.numel(), size=min(probes_per_param, flat.numel()),
                             replace=False)
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + eps
                hi = float(training_loss(net, x, y, weights))
                flat[i] = orig - eps
                lo = float(training_loss(net, x, y, weights))
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                an = float(gflat[i])
                denom = max(abs(fd), abs(an), atol)
                worst = max(worst, abs(fd - an) / denom)
    return worst
