"""File-based experiment stages: synthesize scenes, build heat maps,
pre-categorize, train recognizers, generate labels, train/apply the
in-season classifier and the three comparison baselines, and evaluate.

Every stage reads its inputs from the output directory of earlier stages,
writes self-describing artifacts (headers carry the experiment config hash)
plus a JSON run record, and derives its randomness from the global seed, so
re-running any stage with unchanged inputs reproduces its outputs bit for
bit.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, classifier, evalmetrics, heatmap, recognizer, synth
from .forest import ForestHyper, load_forest, save_forest
from .raster import BACKGROUND, UNKNOWN, LabelRaster, read_label, read_stack, write_label, write_stack

SEASON_LAST_DOY = max(synth.DEFAULT_STEP_DOYS)

STAGES = ("synth", "heatmaps", "pretriage", "train-recognizer", "gen-labels",
          "train-classifier", "classify", "evaluate",
          "baseline-boundary", "baseline-postseason", "baseline-harmonic")

_JM_SAMPLE_CAP = 20000


@dataclass
class ExperimentConfig:
    training_years: list[int]
    target_year: int
    preset: str = "corn_soy"
    feature_pair: tuple[str, str] = ("RDEG1", "SWIR1")
    class_pairs: list[tuple[str, str]] | None = None
    scene: dict = field(default_factory=dict)
    bins: int = 128
    scale_x: float = 0.3
    scale_y: float = 0.6
    jm_threshold: float = 1.5
    min_pixels: int = 1000
    target_fraction: float = 0.5
    min_bins: int = recognizer.DEFAULT_MIN_BINS
    recognizer_train: dict = field(default_factory=dict)
    n_per_class: int = 2000
    forest: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.target_year in self.training_years:
            raise ValueError("training years must not include the target year")
        if self.preset not in ("corn_soy", "rice_corn_soy"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.class_pairs is None:
            self.class_pairs = ([("corn", "soybean")] if self.preset == "corn_soy"
                                else [("rice", "corn"), ("corn", "soybean")])
        self.class_pairs = [tuple(p) for p in self.class_pairs]
        self.feature_pair = tuple(self.feature_pair)

    # --- resolved module configs -------------------------------------------------
    def scene_setup(self) -> tuple[synth.SceneConfig, list[synth.ClassTrajectory]]:
        base, trajectories = (synth.default_corn_soy_config() if self.preset == "corn_soy"
                              else synth.default_rice_corn_soy_config())
        merged = base.to_dict()
        merged.update(self.scene)
        return synth.SceneConfig.from_dict(merged), trajectories

    def heatmap_config(self) -> heatmap.HeatMapConfig:
        return heatmap.HeatMapConfig(self.feature_pair[0], self.feature_pair[1],
                                     self.bins, self.scale_x, self.scale_y)

    def train_config(self, pair_seed: int) -> recognizer.TrainConfig:
        d = dict(self.recognizer_train)
        d.setdefault("seed", pair_seed)
        return recognizer.TrainConfig.from_dict(d)

    def forest_hyper(self) -> ForestHyper:
        return ForestHyper.from_dict(self.forest) if self.forest else ForestHyper()

    def to_dict(self) -> dict:
        return {
            "training_years": list(self.training_years),
            "target_year": self.target_year,
            "preset": self.preset,
            "feature_pair": list(self.feature_pair),
            "class_pairs": [list(p) for p in self.class_pairs],
            "scene": dict(self.scene),
            "bins": self.bins,
            "scale_x": self.scale_x,
            "scale_y": self.scale_y,
            "jm_threshold": self.jm_threshold,
            "min_pixels": self.min_pixels,
            "target_fraction": self.target_fraction,
            "min_bins": self.min_bins,
            "recognizer_train": dict(self.recognizer_train),
            "n_per_class": self.n_per_class,
            "forest": dict(self.forest),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "feature_pair" in d:
            d["feature_pair"] = tuple(d["feature_pair"])
        if d.get("class_pairs"):
            d["class_pairs"] = [tuple(p) for p in d["class_pairs"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canon).hexdigest()[:16]


def derive_seed(global_seed: int, stage: str, *extra: int) -> int:
    """Stage seeds come from a documented hash of the global seed."""
    h = hashlib.sha256(f"{global_seed}:{stage}:{':'.join(map(str, extra))}".encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFF


def _check_hash(meta: dict, expect: str, what: str) -> None:
    got = meta.get("config_hash")
    if got is not None and got != expect:
        raise ValueError(f"config hash mismatch on {what}: stage chain broken")


class Workspace:
    """Paths and run-record bookkeeping under one output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.hash = cfg.hash()

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*[str(x) for x in parts])
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def stack_path(self, year, patch, step) -> Path:
        return self.path("scenes", year, f"patch{patch}", f"step{step}.bst")

    def truth_path(self, year, patch) -> Path:
        return self.path("scenes", year, f"patch{patch}", "truth.lbl")

    def never_crop_path(self, year, patch) -> Path:
        return self.path("scenes", year, f"patch{patch}", "never_crop.lbl")

    def record_path(self, rec_id) -> Path:
        return self.path("heatmaps", "records", f"{rec_id}.npz")

    def bundle_dir(self, pair) -> Path:
        d = self.path("heatmaps", "bundle", f"{pair[0]}-{pair[1]}")
        d.mkdir(parents=True, exist_ok=True)
        return d

    def model_path(self, pair) -> Path:
        return self.path("models", f"recognizer_{pair[0]}-{pair[1]}.ckpt")

    def labels_path(self, step, patch) -> Path:
        return self.path("labels", f"step{step}", f"patch{patch}.lbl")

    def map_path(self, method, step, patch) -> Path:
        if step is None:
            return self.path("maps", method, f"patch{patch}.lbl")
        return self.path("maps", method, f"step{step}", f"patch{patch}.lbl")

    def write_config(self) -> None:
        with open(self.path("config.json"), "w", encoding="utf-8") as fh:
            json.dump(self.cfg.to_dict(), fh, indent=2, sort_keys=True)

    def run_record(self, stage: str, seed: int, outputs: list[str], extra: dict | None = None):
        import torch

        rec = {
            "stage": stage,
            "config_hash": self.hash,
            "global_seed": self.cfg.seed,
            "stage_seed": seed,
            "versions": {"croptopo": __version__, "numpy": np.__version__,
                         "torch": torch.__version__},
            "finished_unix": int(time.time()),
            "outputs": outputs,
        }
        if extra:
            rec.update(extra)
        with open(self.path("runrecords", f"{stage}.json"), "w", encoding="utf-8") as fh:
            json.dump(rec, fh, indent=2, sort_keys=True)
        return rec

    # --- common loads -------------------------------------------------------------
    def load_stacks(self, year, patch) -> list:
        scene_cfg = self.scene_cfg
        stacks = []
        for s in range(len(scene_cfg.step_doys)):
            stack = read_stack(self.stack_path(year, patch, s))
            _check_hash(stack.meta, self.hash, f"scene {year}/patch{patch}/step{s}")
            stacks.append(stack)
        return stacks

    @property
    def scene_cfg(self) -> synth.SceneConfig:
        return self.cfg.scene_setup()[0]

    def class_table(self) -> dict[int, str]:
        return synth.class_table_for(self.cfg.scene_setup()[1])

    def never_crop_from_history(self, patch) -> np.ndarray:
        mask = None
        for year in self.cfg.training_years:
            truth = read_label(self.truth_path(year, patch))
            bg = truth.cells == BACKGROUND
            mask = bg if mask is None else (mask & bg)
        return mask

    def record_id(self, year, patch, step) -> str:
        return f"y{year}_p{patch}_s{step}"


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_synth(ws: Workspace) -> dict:
    cfg = ws.cfg
    scene_cfg, trajectories = cfg.scene_setup()
    seed = derive_seed(cfg.seed, "synth")
    outputs = []
    for year in list(cfg.training_years) + [cfg.target_year]:
        scene = synth.generate_scene(scene_cfg, trajectories, year, seed=seed)
        for patch in scene.patches:
            for s, stack in enumerate(patch.stacks):
                stack.meta.update({"config_hash": ws.hash, "patch": str(patch.index),
                                   "step": str(s)})
                p = ws.stack_path(year, patch.index, s)
                write_stack(stack, p)
                outputs.append(str(p))
            patch.truth.meta["config_hash"] = ws.hash
            write_label(patch.truth, ws.truth_path(year, patch.index))
            nc = LabelRaster(patch.never_crop.astype(np.uint16), {1: "never_crop"},
                             {"config_hash": ws.hash})
            write_label(nc, ws.never_crop_path(year, patch.index))
    ws.write_config()
    return ws.run_record("synth", seed, outputs[:4] + ["..."],
                         {"years": list(cfg.training_years) + [cfg.target_year]})


def stage_heatmaps(ws: Workspace) -> dict:
    """Project training-year patches; store channels, per-class grids and
    JM feature samples per record."""
    cfg = ws.cfg
    hm_cfg = cfg.heatmap_config()
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    seed = derive_seed(cfg.seed, "heatmaps")
    outputs = []
    for year in cfg.training_years:
        for p in range(scene_cfg.patches):
            never = ws.never_crop_from_history(p)
            truth = read_label(ws.truth_path(year, p))
            stacks = ws.load_stacks(year, p)
            for s, stack in enumerate(stacks):
                rec_id = ws.record_id(year, p, s)
                if not stack.valid.any():
                    continue
                cand = heatmap.project(stack, hm_cfg, labels=truth,
                                       class_ids=sorted(table), pixel_mask=~never)
                nc = heatmap.project(stack, hm_cfg, pixel_mask=never)
                four = heatmap.build_channels(cand.heatmap, nc.heatmap)
                rng = np.random.default_rng(derive_seed(cfg.seed, "jm-sample", year, p, s))
                payload = {
                    "channels": four.channels,
                    "year": year, "patch": p, "step": s,
                    "class_ids": np.array(sorted(table)),
                }
                vx = stack.feature(hm_cfg.feature_x)
                vy = stack.feature(hm_cfg.feature_y)
                for cid in sorted(table):
                    payload[f"grid_{cid}"] = cand.per_class[cid].counts
                    sel = (truth.cells == cid) & ~never & stack.valid \
                        & np.isfinite(vx) & np.isfinite(vy)
                    pts = np.column_stack([vx[sel], vy[sel]]).astype(np.float32)
                    payload[f"count_{cid}"] = np.int64(len(pts))
                    if len(pts) > _JM_SAMPLE_CAP:
                        pts = pts[rng.choice(len(pts), _JM_SAMPLE_CAP, replace=False)]
                    payload[f"samples_{cid}"] = pts
                path = ws.record_path(rec_id)
                np.savez(path, **payload)
                outputs.append(str(path))
    return ws.run_record("heatmaps", seed, outputs[:4] + ["..."], {"records": len(outputs)})


def _load_record(ws: Workspace, rec_id: str) -> dict:
    with np.load(ws.record_path(rec_id)) as z:
        return {k: z[k] for k in z.files}


def _training_record_ids(ws: Workspace) -> list[str]:
    ids = []
    scene_cfg = ws.scene_cfg
    for year in ws.cfg.training_years:
        for p in range(scene_cfg.patches):
            for s in range(len(scene_cfg.step_doys)):
                if ws.record_path(ws.record_id(year, p, s)).exists():
                    ids.append(ws.record_id(year, p, s))
    return ids


def stage_pretriage(ws: Workspace) -> dict:
    """JM pre-categorization per class pair; writes the triage bundle."""
    cfg = ws.cfg
    table = ws.class_table()
    name_to_code = {v: k for k, v in table.items()}
    seed = derive_seed(cfg.seed, "pretriage")
    outputs = []
    for pair in cfg.class_pairs:
        pair_codes = (name_to_code[pair[0]], name_to_code[pair[1]])
        bundle = ws.bundle_dir(pair)
        manifest_path = bundle / "manifest.jsonl"
        prior = {}
        if manifest_path.exists():
            prior = {m.id: m for m in heatmap.read_manifest(manifest_path)
                     if m.category_source == heatmap.SOURCE_HUMAN}
        records = []
        for rec_id in _training_record_ids(ws):
            data = _load_record(ws, rec_id)
            samples = {int(c): data[f"samples_{int(c)}"] for c in data["class_ids"]}
            counts = {int(c): int(data[f"count_{int(c)}"]) for c in data["class_ids"]}
            # the min-pixels guard uses full patch counts, not the stored subsample
            if min(counts.get(pair_codes[0], 0), counts.get(pair_codes[1], 0)) < cfg.min_pixels:
                category, jm = heatmap.TYPE_II, None
            else:
                category, jm = heatmap.categorize(
                    samples, pair_codes, threshold=cfg.jm_threshold, min_pixels=8)
            rec = heatmap.HeatMapRecord(
                id=rec_id, patch=f"y{data['year']}p{data['patch']}",
                time_step=int(data["step"]), category=category,
                category_source=heatmap.SOURCE_AUTO,
                jm_value=None if jm is None else round(float(jm), 6),
                image=f"{rec_id}.pgm")
            if rec_id in prior:
                rec.category = prior[rec_id].category
                rec.category_source = heatmap.SOURCE_HUMAN
            heatmap.write_pgm(data["channels"][0], bundle / f"{rec_id}.pgm")
            records.append(rec)
        heatmap.write_manifest(records, manifest_path)
        outputs.append(str(manifest_path))
    return ws.run_record("pretriage", seed, outputs)


def stage_train_recognizer(ws: Workspace) -> dict:
    cfg = ws.cfg
    table = ws.class_table()
    name_to_code = {v: k for k, v in table.items()}
    outputs = []
    histories = {}
    for pair in cfg.class_pairs:
        pair_codes = (name_to_code[pair[0]], name_to_code[pair[1]])
        manifest = heatmap.read_manifest(ws.bundle_dir(pair) / "manifest.jsonl")
        train_records = []
        for m in manifest:
            data = _load_record(ws, m.id)
            if m.category == heatmap.TYPE_I:
                grids = {code: heatmap.HeatMap(data[f"grid_{code}"], cfg.heatmap_config(),
                                               int(data[f"grid_{code}"].sum()))
                         for code in pair_codes}
                target = recognizer.pair_target(
                    heatmap.build_target(grids, cfg.target_fraction), pair_codes)
            else:
                target = np.zeros((cfg.bins, cfg.bins), dtype=np.int64)
            train_records.append(recognizer.TrainingRecord(
                m.id, m.patch, m.time_step, data["channels"], target, m.category))
        pair_seed = derive_seed(cfg.seed, "train-recognizer", name_to_code[pair[0]],
                                name_to_code[pair[1]])
        model = recognizer.train(train_records, pair_codes, pair, cfg.train_config(pair_seed))
        path = ws.model_path(pair)
        recognizer.save_model(model, path)
        outputs.append(str(path))
        histories[f"{pair[0]}-{pair[1]}"] = {
            "train_loss": model.history.train_loss,
            "val_accuracy": model.history.val_accuracy,
            "n_records": len(train_records),
            "n_type1": sum(r.category == heatmap.TYPE_I for r in train_records),
        }
    seed = derive_seed(cfg.seed, "train-recognizer")
    return ws.run_record("train-recognizer", seed, outputs, {"history": histories})


def stage_gen_labels(ws: Workspace) -> dict:
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    models = [recognizer.load_model(ws.model_path(pair)) for pair in cfg.class_pairs]
    outputs = []
    for p in range(scene_cfg.patches):
        never = ws.never_crop_from_history(p)
        stacks = ws.load_stacks(cfg.target_year, p)
        rasters = recognizer.generate_labels(models, stacks, never, cfg.heatmap_config(),
                                             table, min_bins=cfg.min_bins)
        for s, raster in enumerate(rasters):
            raster.meta["config_hash"] = ws.hash
            path = ws.labels_path(s, p)
            write_label(raster, path)
            outputs.append(str(path))
    seed = derive_seed(cfg.seed, "gen-labels")
    return ws.run_record("gen-labels", seed, outputs[:4] + ["..."],
                         {"patches": scene_cfg.patches})


def _load_generated_labels(ws: Workspace) -> list[list[LabelRaster]]:
    """per patch -> per step label rasters."""
    scene_cfg = ws.scene_cfg
    out = []
    for p in range(scene_cfg.patches):
        rasters = []
        for s in range(len(scene_cfg.step_doys)):
            raster = read_label(ws.labels_path(s, p))
            _check_hash(raster.meta, ws.hash, f"labels step{s}/patch{p}")
            rasters.append(raster)
        out.append(rasters)
    return out


def _accumulated_by_step(per_patch_labels) -> list[list]:
    """acc[s][p] = accumulation of steps 0..s for patch p (in-season view)."""
    steps = len(per_patch_labels[0])
    return [[recognizer.accumulate(rasters[: s + 1]) for rasters in per_patch_labels]
            for s in range(steps)]


def label_steps(acc_by_step) -> list[int]:
    """Steps with at least one usable accumulated label."""
    out = []
    for s, accs in enumerate(acc_by_step):
        total = sum(sum(counts[-1] for counts in a.counts.values()) for a in accs
                    if a.counts)
        if total > 0:
            out.append(s)
    return out


def _scene_never_crop(ws: Workspace) -> list[np.ndarray]:
    return [ws.never_crop_from_history(p) for p in range(ws.cfg.scene_setup()[0].patches)]


def stage_train_classifier(ws: Workspace) -> dict:
    """Main path, training half: per label-available step, sample the
    accumulated labels and fit one forest per grid cell; checkpoints go to
    forests/ for the classify stage."""
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    layout = classifier.SceneLayout(scene_cfg.patches, scene_cfg.patch_size)
    step_doys = scene_cfg.step_doys
    per_patch_labels = _load_generated_labels(ws)
    acc_by_step = _accumulated_by_step(per_patch_labels)
    steps = [s for s in label_steps(acc_by_step)
             if len(classifier.windows_through(step_doys[s])) > 0]
    never = _scene_never_crop(ws)
    hyper = cfg.forest_hyper()

    full_windows = classifier.windows_through(SEASON_LAST_DOY)
    samples_by_step = {}
    for s in steps:
        usable = [np.where(acc_by_step[s][p].usable_mask(), acc_by_step[s][p].raster.cells,
                           UNKNOWN).astype(np.uint16) for p in range(scene_cfg.patches)]
        # classes whose labels exist by this step; later crops join the
        # training set once their first labels appear
        present = [c for c in sorted(table)
                   if sum(a.counts.get(c, [0] * (s + 1))[s] for a in acc_by_step[s]) > 0]
        samples_by_step[s] = classifier.sample_training(
            usable, never, layout, present, table,
            n_per_class=cfg.n_per_class, seed=derive_seed(cfg.seed, "sample", s))
    matrices = {s: {} for s in steps}
    n_windows_at = {s: len(classifier.windows_through(step_doys[s])) for s in steps}
    for p in range(scene_cfg.patches):
        stacks = ws.load_stacks(cfg.target_year, p)
        fplanes = classifier.extract_patch_features(stacks, full_windows)
        for s in steps:
            for cell, (coords, y) in samples_by_step[s].items():
                sel = coords[:, 0] == p
                if not sel.any():
                    continue
                rows = classifier.gather_feature_rows(
                    fplanes, coords[sel, 1], coords[sel, 2], n_windows_at[s])
                matrices[s].setdefault(cell, ([], []))
                matrices[s][cell][0].append(rows)
                matrices[s][cell][1].append(y[sel])
    outputs = []
    for s in steps:
        cell_mats = {cell: (np.concatenate(rs), np.concatenate(ys))
                     for cell, (rs, ys) in matrices[s].items()}
        models = classifier.train_cell_forests(
            cell_mats, hyper, seed=derive_seed(cfg.seed, "forest", s))
        for cell, model in models.items():
            path = ws.path("forests", "main", f"step{s}_cell{cell}.forest")
            save_forest(model, path)
            outputs.append(str(path))
    seed = derive_seed(cfg.seed, "train-classifier")
    return ws.run_record("train-classifier", seed, outputs[:4] + ["..."],
                         {"label_steps": steps})


def stage_classify(ws: Workspace) -> dict:
    """Main path, application half: classify every patch at every step that
    has trained forests on disk."""
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    layout = classifier.SceneLayout(scene_cfg.patches, scene_cfg.patch_size)
    step_doys = scene_cfg.step_doys
    forest_dir = ws.out / "forests" / "main"
    if not forest_dir.exists():
        raise ValueError("no trained classifier forests; run train-classifier first")
    steps = sorted({int(p.name.split("_")[0].replace("step", ""))
                    for p in forest_dir.glob("step*_cell*.forest")})
    models_by_step = {}
    for s in steps:
        models_by_step[s] = {
            cell: load_forest(forest_dir / f"step{s}_cell{cell}.forest")
            for cell in range(classifier.GRID_DIM ** 2)
        }
    full_windows = classifier.windows_through(SEASON_LAST_DOY)
    outputs = []
    for p in range(scene_cfg.patches):
        stacks = ws.load_stacks(cfg.target_year, p)
        fplanes = classifier.extract_patch_features(stacks, full_windows)
        for s, models in models_by_step.items():
            k = len(classifier.windows_through(step_doys[s]))
            raster = classifier.classify_patch(models, fplanes, layout, p, table, k)
            raster.meta["config_hash"] = ws.hash
            path = ws.map_path("main", s, p)
            write_label(raster, path)
            outputs.append(str(path))
    seed = derive_seed(cfg.seed, "classify")
    return ws.run_record("classify", seed, outputs[:4] + ["..."], {"steps": steps})


def _historical_sample_matrices(ws: Workspace, n_windows: int | None,
                                harmonic: bool = False):
    """Per-cell training matrices from training-year pseudo truth.

    Labels are sampled per year (n_per_class split evenly) with features from
    that year's imagery; background comes from never-cultivated pixels.
    """
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    layout = classifier.SceneLayout(scene_cfg.patches, scene_cfg.patch_size)
    never = _scene_never_crop(ws)
    full_windows = classifier.windows_through(SEASON_LAST_DOY)
    n_years = len(cfg.training_years)
    per_year_n = max(1, cfg.n_per_class // n_years)
    merged: dict[int, tuple[list, list]] = {}
    for yi, year in enumerate(cfg.training_years):
        usable = []
        for p in range(scene_cfg.patches):
            truth = read_label(ws.truth_path(year, p))
            cells = np.where(never[p], UNKNOWN, truth.cells).astype(np.uint16)
            cells[cells == BACKGROUND] = UNKNOWN
            usable.append(cells)
        samples = classifier.sample_training(
            usable, never, layout, sorted(table), table, n_per_class=per_year_n,
            seed=derive_seed(cfg.seed, "baseline-sample", year))
        for p in range(scene_cfg.patches):
            stacks = ws.load_stacks(year, p)
            if harmonic:
                planes = classifier.harmonic_patch_features(stacks)
            else:
                planes = classifier.extract_patch_features(stacks, full_windows)
            for cell, (coords, y) in samples.items():
                sel = coords[:, 0] == p
                if not sel.any():
                    continue
                if harmonic:
                    rows = classifier.gather_harmonic_rows(planes, coords[sel, 1],
                                                           coords[sel, 2])
                else:
                    rows = classifier.gather_feature_rows(planes, coords[sel, 1],
                                                          coords[sel, 2], n_windows)
                merged.setdefault(cell, ([], []))
                merged[cell][0].append(rows)
                merged[cell][1].append(y[sel])
    return {cell: (np.concatenate(rs), np.concatenate(ys))
            for cell, (rs, ys) in merged.items()}


def stage_baseline_boundary(ws: Workspace) -> dict:
    """Decision-boundary transfer: forests trained on historical features and
    pseudo labels, applied unchanged to the target year at each date."""
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    layout = classifier.SceneLayout(scene_cfg.patches, scene_cfg.patch_size)
    hyper = cfg.forest_hyper()
    step_doys = scene_cfg.step_doys
    steps = [s for s in range(len(step_doys))
             if len(classifier.windows_through(step_doys[s])) > 0]
    full_windows = classifier.windows_through(SEASON_LAST_DOY)
    full_matrices = _historical_sample_matrices(ws, len(full_windows))
    outputs = []
    models_by_step = {}
    for s in steps:
        k = len(classifier.windows_through(step_doys[s]))
        n_feat_per_win = full_matrices[0][0].shape[1] // len(full_windows)
        cut = {cell: (X[:, : k * n_feat_per_win], y) for cell, (X, y) in full_matrices.items()}
        models_by_step[s] = classifier.train_cell_forests(
            cut, hyper, seed=derive_seed(cfg.seed, "baseline-forest", s))
    for p in range(scene_cfg.patches):
        stacks = ws.load_stacks(cfg.target_year, p)
        fplanes = classifier.extract_patch_features(stacks, full_windows)
        for s in steps:
            k = len(classifier.windows_through(step_doys[s]))
            raster = classifier.classify_patch(models_by_step[s], fplanes, layout, p,
                                               table, k)
            raster.meta["config_hash"] = ws.hash
            path = ws.map_path("boundary", s, p)
            write_label(raster, path)
            outputs.append(str(path))
    seed = derive_seed(cfg.seed, "baseline-boundary")
    return ws.run_record("baseline-boundary", seed, outputs[:4] + ["..."],
                         {"steps": steps})


def stage_baseline_postseason(ws: Workspace) -> dict:
    """Full-series transfer: one forest on the complete historical season."""
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    layout = classifier.SceneLayout(scene_cfg.patches, scene_cfg.patch_size)
    full_windows = classifier.windows_through(SEASON_LAST_DOY)
    matrices = _historical_sample_matrices(ws, len(full_windows))
    models = classifier.train_cell_forests(
        matrices, cfg.forest_hyper(), seed=derive_seed(cfg.seed, "postseason-forest"))
    outputs = []
    for p in range(scene_cfg.patches):
        stacks = ws.load_stacks(cfg.target_year, p)
        fplanes = classifier.extract_patch_features(stacks, full_windows)
        raster = classifier.classify_patch(models, fplanes, layout, p, table,
                                           len(full_windows))
        raster.meta["config_hash"] = ws.hash
        path = ws.map_path("postseason", None, p)
        write_label(raster, path)
        outputs.append(str(path))
    seed = derive_seed(cfg.seed, "baseline-postseason")
    return ws.run_record("baseline-postseason", seed, outputs)


def stage_baseline_harmonic(ws: Workspace) -> dict:
    """Harmonic-coefficient transfer: forests on per-band regression
    coefficients of the full historical season."""
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    layout = classifier.SceneLayout(scene_cfg.patches, scene_cfg.patch_size)
    matrices = _historical_sample_matrices(ws, None, harmonic=True)
    models = classifier.train_cell_forests(
        matrices, cfg.forest_hyper(), seed=derive_seed(cfg.seed, "harmonic-forest"))
    outputs = []
    for p in range(scene_cfg.patches):
        stacks = ws.load_stacks(cfg.target_year, p)
        hplanes = classifier.harmonic_patch_features(stacks)
        raster = classifier.classify_patch_harmonic(models, hplanes, layout, p, table)
        raster.meta["config_hash"] = ws.hash
        path = ws.map_path("harmonic", None, p)
        write_label(raster, path)
        outputs.append(str(path))
    seed = derive_seed(cfg.seed, "baseline-harmonic")
    return ws.run_record("baseline-harmonic", seed, outputs)


def _curve_for_maps(ws: Workspace, method: str, steps: list[int],
                    acc_by_step=None, per_patch_labels=None) -> evalmetrics.AccuracyCurve:
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    classes = [BACKGROUND] + sorted(table)
    metrics = []
    for s in steps:
        counts = None
        for p in range(scene_cfg.patches):
            truth = read_label(ws.truth_path(cfg.target_year, p))
            pred = read_label(ws.map_path(method, s if method in ("main", "boundary")
                                          else None, p))
            cm = evalmetrics.confusion(pred, truth, classes=classes)
            counts = cm.counts if counts is None else counts + cm.counts
        cm = evalmetrics.ConfusionMatrix(counts, classes, {0: "background", **table})
        f1s, degen = {}, {}
        for c in classes:
            score = evalmetrics.class_score(cm, c)
            f1s[c], degen[c] = score.f1, score.degenerate
        m = evalmetrics.StepMetrics(step=s + 1, doy=scene_cfg.step_doys[s],
                                    oa=evalmetrics.oa(cm), f1=f1s, degenerate=degen)
        if acc_by_step is not None:
            m.label_counts = {c: sum(a.counts.get(c, [0])[-1] for a in acc_by_step[s])
                              for c in sorted(table)}
        if per_patch_labels is not None:
            for c in sorted(table):
                num = den = 0
                for p in range(scene_cfg.patches):
                    truth = read_label(ws.truth_path(cfg.target_year, p))
                    lab = per_patch_labels[p][s]
                    sel = lab.cells == c
                    den += int(sel.sum())
                    num += int((truth.cells[sel] == c).sum())
                m.agreement[c] = (num / den) if den else None
        metrics.append(m)
    return evalmetrics.AccuracyCurve(metrics)


def stage_evaluate(ws: Workspace) -> dict:
    cfg = ws.cfg
    scene_cfg = ws.scene_cfg
    table = ws.class_table()
    per_patch_labels = _load_generated_labels(ws)
    acc_by_step = _accumulated_by_step(per_patch_labels)
    main_steps = sorted(int(p.name.replace("step", ""))
                        for p in (ws.out / "maps" / "main").glob("step*"))
    curves = {"main": _curve_for_maps(ws, "main", main_steps, acc_by_step,
                                      per_patch_labels)}
    baselines = {}
    bdir = ws.out / "maps" / "boundary"
    if bdir.exists():
        bsteps = sorted(int(p.name.replace("step", "")) for p in bdir.glob("step*"))
        baselines["boundary"] = _curve_for_maps(ws, "boundary", bsteps)
    for method in ("postseason", "harmonic"):
        if (ws.out / "maps" / method).exists():
            last = len(scene_cfg.step_doys) - 1
            baselines[method] = _curve_for_maps(ws, method, [last])
    class_names = {0: "background", **table}
    text, csv = evalmetrics.report(curves["main"], baselines, class_names)
    outputs = []
    for name, content in (("report.txt", text), ("comparison.csv", csv)):
        path = ws.path("reports", name)
        path.write_text(content, encoding="utf-8")
        outputs.append(str(path))
    # agreement / label-count series for the generated labels
    rows = ["step,doy," + ",".join(f"agreement_{table[c]}" for c in sorted(table))
            + "," + ",".join(f"labels_{table[c]}" for c in sorted(table))]
    for m in curves["main"].steps:
        ag = ",".join("" if m.agreement.get(c) is None else f"{m.agreement[c]:.6f}"
                      for c in sorted(table))
        lc = ",".join(str(m.label_counts.get(c, 0)) for c in sorted(table))
        rows.append(f"{m.step},{m.doy},{ag},{lc}")
    path = ws.path("reports", "labels.csv")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    outputs.append(str(path))
    seed = derive_seed(cfg.seed, "evaluate")
    summary = {
        "best_oa_main": max((m.oa for m in curves["main"].steps), default=0.0),
        "earliest_step_085": evalmetrics.earliest_date(curves["main"], 0.85),
    }
    for name, curve in baselines.items():
        summary[f"best_oa_{name}"] = max((m.oa for m in curve.steps), default=0.0)
    return ws.run_record("evaluate", seed, outputs, summary)


STAGE_FUNCS = {
    "synth": stage_synth,
    "heatmaps": stage_heatmaps,
    "pretriage": stage_pretriage,
    "train-recognizer": stage_train_recognizer,
    "gen-labels": stage_gen_labels,
    "train-classifier": stage_train_classifier,
    "classify": stage_classify,
    "baseline-boundary": stage_baseline_boundary,
    "baseline-postseason": stage_baseline_postseason,
    "baseline-harmonic": stage_baseline_harmonic,
    "evaluate": stage_evaluate,
}

RUN_ALL_ORDER = ("synth", "heatmaps", "pretriage", "train-recognizer", "gen-labels",
                 "train-classifier", "classify", "baseline-boundary",
                 "baseline-postseason", "baseline-harmonic", "evaluate")


def run_all(ws: Workspace) -> dict:
    results = {}
    for stage in RUN_ALL_ORDER:
        results[stage] = STAGE_FUNCS[stage](ws)
    return results
