"""Manifest-driven dataset handling and the synthetic ultrasound generator.

Videos are the atomic unit: every frame of a video lands in the same split,
so no video (or patient, when patient ids are present) ever straddles
train/val/test. The synthetic generator produces lung-ultrasound-like
frames -- multiplicative speckle, a bright pleural band, A-line repeats on
negatives, band breakages plus B-line streaks and white-lung patches on
positives -- together with per-frame binary masks marking exactly the
discriminative evidence.

Manifest CSV columns: video_id,[patient_id,]frame_path,source_class,probe[,split]
Normalization sidecar: JSON {mean, std, train_seed}.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, IntegrityError, ManifestError
from .tensor import Tensor

__all__ = [
    "VideoRecord",
    "DatasetManifest",
    "SynthConfig",
    "NormalizationStats",
    "load_manifest",
    "save_manifest",
    "grouped_split",
    "compute_norm_stats",
    "save_norm_stats",
    "load_norm_stats",
    "load_frames",
    "load_mask",
    "mask_path_for",
    "synth_generate",
    "summarize",
]

SOURCE_CLASSES = ("covid", "normal", "pneumonia", "other")
PROBES = ("convex", "linear")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    frames: tuple
    source_class: str
    probe: str
    patient_id: str | None = None

    @property
    def label(self):
        """Binary label: positive iff the source class is covid."""
        return "positive" if self.source_class == "covid" else "negative"

    @property
    def is_positive(self):
        return self.source_class == "covid"

    @property
    def group_key(self):
        return self.patient_id if self.patient_id is not None else self.video_id


class DatasetManifest:
    """Ordered video records plus an optional video_id -> split assignment."""

    def __init__(self, records, splits=None):
        self.records = list(records)
        self.splits = dict(splits) if splits else None
        seen = set()
        for r in self.records:
            if r.video_id in seen:
                raise ManifestError(f"duplicate video_id {r.video_id!r} in record list")
            seen.add(r.video_id)
        if self.splits is not None:
            missing = [r.video_id for r in self.records if r.video_id not in self.splits]
            if missing:
                raise ManifestError(f"split assignment missing for video(s): {missing[:5]}")

    def __len__(self):
        return len(self.records)

    @property
    def frame_count(self):
        return sum(len(r.frames) for r in self.records)

    def filter_convex(self):
        """Drop every linear-probe video."""
        kept = [r for r in self.records if r.probe == "convex"]
        splits = {r.video_id: self.splits[r.video_id] for r in kept} if self.splits else None
        return DatasetManifest(kept, splits)

    def split_records(self, split):
        if self.splits is None:
            raise DataError("manifest has no split assignment; run grouped_split first")
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if self.splits[r.video_id] == split]


# ---------------------------------------------------------------------------
# manifest I/O


def load_manifest(path):
    """Parse a manifest CSV; reports the offending row number on failure.

    Relative frame paths are resolved against the manifest's directory, so
    a dataset folder can be moved or loaded from any working directory.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest file")
        cols = set(reader.fieldnames)
        required = {"video_id", "frame_path", "source_class", "probe"}
        missing = required - cols
        if missing:
            raise ManifestError(f"{path}: missing required column(s): {', '.join(sorted(missing))}")
        has_patient = "patient_id" in cols
        has_split = "split" in cols

        by_video = {}
        order = []
        seen_paths = {}
        for row_no, row in enumerate(reader, start=2):
            vid = (row.get("video_id") or "").strip()
            fp = (row.get("frame_path") or "").strip()
            sc = (row.get("source_class") or "").strip()
            probe = (row.get("probe") or "").strip()
            if not vid:
                raise ManifestError(f"{path} row {row_no}: empty video_id")
            if not fp:
                raise ManifestError(f"{path} row {row_no}: empty frame_path")
            if not os.path.isabs(fp):
                fp = os.path.normpath(os.path.join(base_dir, fp))
            if sc not in SOURCE_CLASSES:
                raise ManifestError(
                    f"{path} row {row_no}: source_class {sc!r} not in {SOURCE_CLASSES}")
            if probe not in PROBES:
                raise ManifestError(f"{path} row {row_no}: probe {probe!r} not in {PROBES}")
            if fp in seen_paths:
                raise IntegrityError(
                    f"{path} row {row_no}: frame_path {fp!r} already appears at row {seen_paths[fp]}")
            seen_paths[fp] = row_no

            pid = (row.get("patient_id") or "").strip() if has_patient else None
            if has_patient and not pid:
                raise ManifestError(f"{path} row {row_no}: empty patient_id (column is present)")
            split = (row.get("split") or "").strip() if has_split else None
            if has_split:
                if split not in SPLITS:
                    raise ManifestError(f"{path} row {row_no}: split {split!r} not in {SPLITS}")

            if vid not in by_video:
                by_video[vid] = {"frames": [], "source_class": sc, "probe": probe,
                                 "patient_id": pid, "split": split, "first_row": row_no}
                order.append(vid)
            else:
                rec = by_video[vid]
                for field_name, value in (("source_class", sc), ("probe", probe),
                                          ("patient_id", pid), ("split", split)):
                    if rec[field_name] != value:
                        raise ManifestError(
                            f"{path} row {row_no}: {field_name} {value!r} conflicts with "
                            f"{rec[field_name]!r} for video {vid!r} (row {rec['first_row']})")
            by_video[vid]["frames"].append(fp)

    records = [
        VideoRecord(
            video_id=vid,
            frames=tuple(by_video[vid]["frames"]),
            source_class=by_video[vid]["source_class"],
            probe=by_video[vid]["probe"],
            patient_id=by_video[vid]["patient_id"],
        )
        for vid in order
    ]
    splits = {vid: by_video[vid]["split"] for vid in order} if has_split else None
    return DatasetManifest(records, splits)


def save_manifest(manifest, path):
    """Write the manifest as CSV with frame paths relative to its location."""
    out_dir = os.path.dirname(os.path.abspath(path))
    has_patient = any(r.patient_id is not None for r in manifest.records)
    cols = ["video_id"] + (["patient_id"] if has_patient else []) + [
        "frame_path", "source_class", "probe"]
    if manifest.splits is not None:
        cols.append("split")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in manifest.records:
        for fp in r.frames:
            row = [r.video_id]
            if has_patient:
                row.append(r.patient_id or "")
            row += [os.path.relpath(os.path.abspath(fp), out_dir), r.source_class, r.probe]
            if manifest.splits is not None:
                row.append(manifest.splits[r.video_id])
            writer.writerow(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


# ---------------------------------------------------------------------------
# grouped, stratified splitting


def _largest_remainder(n, fractions):
    """Integer allocation of n items closest to the requested fractions."""
    quotas = [n * f for f in fractions]
    base = [int(q) for q in quotas]
    short = n - sum(base)
    remainders = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in remainders[:short]:
        base[i] += 1
    return base


def grouped_split(manifest, fractions=(0.7, 0.15, 0.15), seed=0):
    """Assign whole videos (or whole patients) to train/val/test.

    Groups are stratified by binary label and shuffled deterministically by
    seed; per label, split counts follow the largest-remainder rule, so they
    deviate from the requested fractions by strictly less than one group.
    Returns a new manifest; the input is untouched.
    """
    if len(fractions) != 3:
        raise ConfigError(f"need 3 fractions (train,val,test), got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")

    # group by patient when patient ids exist, else by video
    groups = {}
    for r in manifest.records:
        groups.setdefault(r.group_key, []).append(r)
    group_label = {
        key: ("positive" if any(r.is_positive for r in recs) else "negative")
        for key, recs in groups.items()
    }

    rng = np.random.default_rng(seed)
    assignment = {}
    for label in ("positive", "negative"):
        keys = sorted(k for k, lab in group_label.items() if lab == label)
        if not keys:
            continue
        if len(keys) < len(SPLITS):
            raise DataError(
                f"label {label!r} has only {len(keys)} group(s); need at least {len(SPLITS)} "
                f"to populate every split")
        keys = [keys[i] for i in rng.permutation(len(keys))]
        counts = _largest_remainder(len(keys), fractions)
        pos = 0
        for split, c in zip(SPLITS, counts):
            for k in keys[pos : pos + c]:
                assignment[k] = split
            pos += c

    splits = {r.video_id: assignment[r.group_key] for r in manifest.records}
    return DatasetManifest(manifest.records, splits)


# ---------------------------------------------------------------------------
# frame loading and normalization


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float
    train_seed: int | None = None


def _read_gray(path):
    """8-bit grayscale image as float64 in [0,1]; I/O errors name the path."""
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise OSError(f"{path}: expected 8-bit grayscale (mode L), got mode {img.mode}")
            arr = np.asarray(img, dtype=np.float64)
    except FileNotFoundError as exc:
        raise OSError(f"{path}: cannot read image: {exc}") from exc
    except Image.UnidentifiedImageError as exc:
        raise OSError(f"{path}: not a recognized image file") from exc
    return arr / 255.0


def _ordered_frames(records):
    """(frame_path, label) pairs sorted by (video_id, frame index)."""
    out = []
    for r in sorted(records, key=lambda r: r.video_id):
        for fp in r.frames:
            out.append((fp, 1 if r.is_positive else 0))
    return out


def compute_norm_stats(manifest, train_seed=None):
    """Mean/std of raw [0,1] train-split pixels; train split only, by design."""
    pairs = _ordered_frames(manifest.split_records("train"))
    if not pairs:
        raise DataError("train split is empty; cannot compute normalization stats")
    total = 0.0
    total_sq = 0.0
    count = 0
    for fp, _ in pairs:
        a = _read_gray(fp)
        total += a.sum()
        total_sq += (a * a).sum()
        count += a.size
    mean = total / count
    var = total_sq / count - mean * mean
    std = float(np.sqrt(max(var, 0.0)))
    if std < 1e-9:
        raise DataError("train split pixels have (near-)zero variance; cannot standardize")
    return NormalizationStats(mean=float(mean), std=std, train_seed=train_seed)


def save_norm_stats(stats, path):
    doc = {"mean": stats.mean, "std": stats.std, "train_seed": stats.train_seed}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_norm_stats(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid stats file: {exc.msg}") from exc
    try:
        return NormalizationStats(mean=float(doc["mean"]), std=float(doc["std"]),
                                  train_seed=doc.get("train_seed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: stats file needs numeric 'mean' and 'std'") from exc


def load_frames(manifest, split, stats=None):
    """(Tensor[N,1,H,W], labels[N]) for one split, standardized by train stats.

    Frames are ordered by (video_id, frame index). When stats is None they
    are computed from the manifest's train split.
    """
    if stats is None:
        stats = compute_norm_stats(manifest)
    pairs = _ordered_frames(manifest.split_records(split))
    if not pairs:
        raise DataError(f"split {split!r} contains no frames")
    first = _read_gray(pairs[0][0])
    h, w = first.shape
    x = np.empty((len(pairs), 1, h, w), dtype=np.float64)
    labels = np.empty(len(pairs), dtype=np.int64)
    for i, (fp, lab) in enumerate(pairs):
        a = first if i == 0 else _read_gray(fp)
        if a.shape != (h, w):
            raise DataError(f"{fp}: frame is {a.shape[1]}x{a.shape[0]}, expected {w}x{h}")
        x[i, 0] = (a - stats.mean) / stats.std
        labels[i] = lab
    return Tensor(x), labels


def mask_path_for(frame_path):
    """Ground-truth mask path convention: masks/<same filename> next to frames/."""
    d, name = os.path.split(frame_path)
    parent, leaf = os.path.split(d)
    if leaf == "frames":
        return os.path.join(parent, "masks", name)
    return os.path.join(d, "masks", name)


def load_mask(path):
    """Binary mask (H,W) bool; any nonzero pixel counts as marked."""
    return _read_gray(path) > 0.5


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic lung-ultrasound corpus.

    videos_per_class counts videos per *binary* class; negatives are spread
    round-robin over the normal/pneumonia/other source classes.
    """

    seed: int
    size: int = 128
    videos_per_class: int = 60
    frames_per_video: int = 20
    pleural_depth_range: tuple = (0.25, 0.55)
    gap_intensity: float = 0.75  # how deeply breakages cut the band
    bline_intensity: float = 0.45
    white_lung_prob: float = 0.5

    def validate(self):
        if self.size < 32:
            raise ConfigError(f"size must be >= 32, got {self.size}")
        if self.videos_per_class < 1 or self.frames_per_video < 1:
            raise ConfigError("videos_per_class and frames_per_video must be >= 1")
        lo, hi = self.pleural_depth_range
        if not (0.05 <= lo < hi <= 0.9):
            raise ConfigError(f"pleural_depth_range must satisfy 0.05 <= lo < hi <= 0.9, got {self.pleural_depth_range}")


def _write_pgm(path, arr_u8):
    h, w = arr_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr_u8.tobytes())


def _speckle_field(rng, size):
    """Smoothed multiplicative speckle texture, mean ~1."""
    noise = rng.random((size, size))
    smooth = ndimage.gaussian_filter(noise, sigma=1.5)
    coarse = ndimage.gaussian_filter(rng.random((size, size)), sigma=size / 8)
    f = 0.55 + 0.9 * smooth + 0.35 * coarse
    return f / f.mean()


def _band_profile(size, y0, thickness):
    """Vertical intensity profile of a horizontal band centered at row y0."""
    rows = np.arange(size)
    return np.exp(-0.5 * ((rows - y0) / thickness) ** 2)


def _render_video(rng, cfg, positive):
    """All frames of one synthetic video plus their evidence masks."""
    size = cfg.size
    lo, hi = cfg.pleural_depth_range
    y0 = int(rng.uniform(lo, hi) * size)
    thickness = rng.uniform(1.6, 2.6)
    band_gain = rng.uniform(0.55, 0.8)
    video_gain = rng.uniform(0.82, 1.18)  # per-video brightness jitter
    base_speckle = _speckle_field(rng, size)
    attenuation = np.linspace(1.0, 0.55, size)[:, None]  # darker with depth

    # layout decisions shared by all frames of the video
    if positive:
        n_gaps = rng.integers(2, 6)
        gap_cols = []
        for _ in range(n_gaps):
            c = int(rng.uniform(0.05, 0.95) * size)
            half = int(rng.uniform(0.03, 0.07) * size)
            gap_cols.append((max(0, c - half), min(size, c + half)))
        n_blines = rng.integers(1, 4)
        bline_cols = []
        for _ in range(n_blines):
            c = int(rng.uniform(0.1, 0.9) * size)
            half = max(1, int(0.012 * size))
            bline_cols.append((max(0, c - half), min(size, c + half)))
        has_patch = rng.random() < cfg.white_lung_prob
        if has_patch:
            py = int(rng.uniform(y0 + 10, max(y0 + 11, size - 15)))
            px = int(rng.uniform(0.15, 0.85) * size)
            pr = int(rng.uniform(0.08, 0.16) * size)
        n_alines = 0
    else:
        gap_cols, bline_cols, has_patch = [], [], False
        n_alines = int(rng.integers(2, 4))

    frames = []
    masks = []
    for _ in range(cfg.frames_per_video):
        img = 0.16 * base_speckle * (1.0 + 0.08 * rng.standard_normal((size, size)))
        img *= attenuation

        band = band_gain * _band_profile(size, y0, thickness)[:, None] * np.ones((1, size))
        mask = np.zeros((size, size), dtype=bool)
        band_rows = np.abs(np.arange(size) - y0) <= int(2 * thickness) + 1

        if positive:
            suppress = np.ones(size)
            for c0, c1 in gap_cols:
                suppress[c0:c1] = 1.0 - cfg.gap_intensity
                mask[np.ix_(band_rows, np.arange(c0, c1))] = True
            band = band * suppress[None, :]
        img += band

        if positive:
            for c0, c1 in bline_cols:
                depth = np.zeros((size, 1))
                depth[y0:, 0] = np.linspace(1.0, 0.35, size - y0)
                streak = np.zeros((size, size))
                streak[:, c0:c1] = cfg.bline_intensity * depth
                img += streak
                mask[y0:, c0:c1] = True
            if has_patch:
                yy, xx = np.ogrid[:size, :size]
                blob = ((yy - py) ** 2 + (xx - px) ** 2) <= pr * pr
                img += 0.35 * blob * (0.7 + 0.3 * base_speckle)
                mask |= blob
        else:
            for a in range(2, 2 + n_alines):
                ay = a * y0
                if ay >= size - 2:
                    break
                img += (0.35 * band_gain / a) * _band_profile(size, ay, thickness)[:, None]

        img *= video_gain
        img = np.clip(img, 0.0, 1.0)
        frames.append((img * 255.0 + 0.5).astype(np.uint8))
        masks.append(mask)
    return frames, masks


def synth_generate(config, out_dir):
    """Write frames, masks, and manifest.csv; returns the loaded manifest.

    Fully deterministic: one child generator per video, spawned from the
    config seed, so file bytes are identical across runs.
    """
    config.validate()
    out_dir = os.path.abspath(out_dir)
    frames_dir = os.path.join(out_dir, "frames")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    master = np.random.default_rng(config.seed)
    neg_classes = ("normal", "pneumonia", "other")
    plan = []
    for i in range(config.videos_per_class):
        plan.append((f"pos{i:03d}", "covid", True))
    for i in range(config.videos_per_class):
        plan.append((f"neg{i:03d}", neg_classes[i % len(neg_classes)], False))

    records = []
    for vid, source_class, positive in plan:
        child = np.random.default_rng(master.integers(0, 2**63 - 1))
        frames, masks = _render_video(child, config, positive)
        paths = []
        for j, (img, mask) in enumerate(zip(frames, masks)):
            name = f"{vid}_f{j:03d}.pgm"
            fp = os.path.join(frames_dir, name)
            _write_pgm(fp, img)
            _write_pgm(os.path.join(masks_dir, name), mask.astype(np.uint8) * 255)
            paths.append(fp)
        records.append(VideoRecord(video_id=vid, frames=tuple(paths),
                                   source_class=source_class, probe="convex"))

    manifest = DatasetManifest(records)
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest


# ---------------------------------------------------------------------------
# summaries


def summarize(manifest):
    """Exact per-split/label frame counts and per-class video counts."""
    by_class = {c: 0 for c in SOURCE_CLASSES}
    by_label = {"positive": 0, "negative": 0}
    for r in manifest.records:
        by_class[r.source_class] += 1
        by_label[r.label] += 1

    frame_rows = {}
    keys = list(SPLITS) if manifest.splits is not None else ["unsplit"]
    for k in keys:
        frame_rows[k] = {"positive": 0, "negative": 0, "total": 0}
    for r in manifest.records:
        k = manifest.splits[r.video_id] if manifest.splits is not None else "unsplit"
        frame_rows[k][r.label] += len(r.frames)
        frame_rows[k]["total"] += len(r.frames)

    return {
        "videos": {"total": len(manifest.records), "by_class": by_class, "by_label": by_label},
        "frames": {"total": manifest.frame_count, "by_split": frame_rows},
    }


def summary_table(summary):
    lines = [
        f"videos: {summary['videos']['total']}  "
        + "  ".join(f"{c}={n}" for c, n in summary["videos"]["by_class"].items()),
        f"frames: {summary['frames']['total']}",
    ]
    for split, row in summary["frames"]["by_split"].items():
        lines.append(f"  {split:<7} total={row['total']:<6} pos={row['positive']:<6} neg={row['negative']}")
    return "\n".join(lines) + "\n"
