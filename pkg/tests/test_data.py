"""Manifests, grouped splitting, normalization, and the synthetic generator."""

import os

import numpy as np
import pytest

from usattn.data import (
    SOURCE_CLASSES,
    SynthConfig,
    VideoRecord,
    _largest_remainder,
    _write_pgm,
    compute_norm_stats,
    grouped_split,
    load_frames,
    load_manifest,
    load_mask,
    load_norm_stats,
    mask_path_for,
    save_manifest,
    save_norm_stats,
    summarize,
    summary_table,
    synth_generate,
)
from usattn.errors import ConfigError, DataError, IntegrityError, ManifestError
from usattn.data import DatasetManifest


HEADER = "video_id,frame_path,source_class,probe\n"


def write_csv(tmp_path, body, header=HEADER, name="m.csv"):
    path = tmp_path / name
    path.write_text(header + body)
    return str(path)


def make_records(n_pos, n_neg, frames_each=2, patient=None):
    recs = []
    for i in range(n_pos):
        recs.append(VideoRecord(
            video_id=f"p{i}", frames=tuple(f"frames/p{i}_{j}.pgm" for j in range(frames_each)),
            source_class="covid", probe="convex",
            patient_id=patient(i, True) if patient else None))
    for i in range(n_neg):
        recs.append(VideoRecord(
            video_id=f"n{i}", frames=tuple(f"frames/n{i}_{j}.pgm" for j in range(frames_each)),
            source_class="normal", probe="convex",
            patient_id=patient(i, False) if patient else None))
    return recs


class TestManifestParsing:
    def test_minimal_round_trip(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,convex\n"
                                   "v1,frames/b.pgm,covid,convex\n"
                                   "v2,frames/c.pgm,normal,linear\n")
        m = load_manifest(path)
        assert len(m) == 2
        assert m.records[0].label == "positive"
        assert m.records[1].label == "negative"
        assert len(m.records[0].frames) == 2

    def test_relative_paths_resolve_against_manifest_dir(self, tmp_path):
        sub = tmp_path / "deep" / "dir"
        sub.mkdir(parents=True)
        path = write_csv(sub, "v1,frames/a.pgm,covid,convex\n")
        m = load_manifest(path)
        assert m.records[0].frames[0] == str(sub / "frames" / "a.pgm")

    def test_save_writes_relative_paths(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,convex\n")
        m = load_manifest(path)
        out = tmp_path / "copy.csv"
        save_manifest(m, str(out))
        assert "v1,frames/a.pgm,covid,convex" in out.read_text()

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path, "v1,covid\n", header="video_id,source_class\n")
        with pytest.raises(ManifestError, match="frame_path"):
            load_manifest(path)

    def test_bad_source_class_reports_row(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,convex\n"
                                   "v2,frames/b.pgm,influenza,convex\n")
        with pytest.raises(ManifestError, match="row 3"):
            load_manifest(path)

    def test_bad_probe(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,matrix\n")
        with pytest.raises(ManifestError, match="probe"):
            load_manifest(path)

    def test_duplicate_frame_cites_both_rows(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,convex\n"
                                   "v1,frames/a.pgm,covid,convex\n")
        with pytest.raises(IntegrityError, match="row 2"):
            load_manifest(path)

    def test_video_fields_must_agree(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,convex\n"
                                   "v1,frames/b.pgm,normal,convex\n")
        with pytest.raises(ManifestError, match="source_class"):
            load_manifest(path)

    def test_empty_patient_id_rejected_when_column_present(self, tmp_path):
        path = write_csv(tmp_path, "v1,,frames/a.pgm,covid,convex\n",
                         header="video_id,patient_id,frame_path,source_class,probe\n")
        with pytest.raises(ManifestError, match="patient_id"):
            load_manifest(path)

    def test_split_column_round_trip(self, tmp_path):
        m = DatasetManifest(make_records(3, 3),
                            splits={"p0": "train", "p1": "val", "p2": "test",
                                    "n0": "train", "n1": "val", "n2": "test"})
        out = tmp_path / "s.csv"
        save_manifest(m, str(out))
        m2 = load_manifest(str(out))
        assert m2.splits == m.splits

    def test_unknown_split_value(self, tmp_path):
        path = write_csv(tmp_path, "v1,frames/a.pgm,covid,convex,holdout\n",
                         header=HEADER.rstrip() + ",split\n")
        with pytest.raises(ManifestError, match="holdout"):
            load_manifest(path)

    def test_filter_convex(self):
        recs = make_records(2, 2)
        recs.append(VideoRecord(video_id="lin", frames=("frames/l.pgm",),
                                source_class="covid", probe="linear"))
        m = DatasetManifest(recs).filter_convex()
        assert all(r.probe == "convex" for r in m.records)
        assert len(m) == 4

    def test_duplicate_video_id_in_constructor(self):
        recs = make_records(1, 0) + make_records(1, 0)
        with pytest.raises(ManifestError):
            DatasetManifest(recs)


class TestLargestRemainder:
    def test_allocations_sum(self):
        for n in range(1, 40):
            alloc = _largest_remainder(n, (0.7, 0.15, 0.15))
            assert sum(alloc) == n
            assert all(a >= 0 for a in alloc)

    def test_matches_exhaustive_small_case(self):
        # best integer allocation of 10 at 70/15/15 is unambiguously 7/1.5/1.5
        # rounded to 7/2/1 or 7/1/2; largest-remainder breaks ties by index
        assert _largest_remainder(10, (0.7, 0.15, 0.15)) == [7, 2, 1]

    def test_deviation_below_one(self):
        for n in (5, 17, 100, 643):
            for fr in ((0.5, 0.25, 0.25), (0.7, 0.15, 0.15), (0.6, 0.2, 0.2)):
                alloc = _largest_remainder(n, fr)
                for a, f in zip(alloc, fr):
                    assert abs(a - n * f) < 1.0


class TestGroupedSplit:
    def test_videos_stay_whole(self):
        m = DatasetManifest(make_records(6, 6, frames_each=3))
        out = grouped_split(m, seed=0)
        # split is per-video: every frame of a video shares its assignment
        assert set(out.splits.values()) == {"train", "val", "test"}
        assert len(out.splits) == 12

    def test_disjoint_and_stratified(self):
        m = DatasetManifest(make_records(10, 10))
        out = grouped_split(m, (0.7, 0.15, 0.15), seed=1)
        buckets = {"train": [], "val": [], "test": []}
        for r in out.records:
            buckets[out.splits[r.video_id]].append(r)
        for label in (True, False):
            counts = [sum(1 for r in buckets[s] if r.is_positive == label)
                      for s in ("train", "val", "test")]
            assert sum(counts) == 10
            for got, frac in zip(counts, (0.7, 0.15, 0.15)):
                assert abs(got - 10 * frac) <= 1.0

    def test_patient_grouping_overrides_video(self):
        # two videos of one patient must land in the same split
        m = DatasetManifest(make_records(8, 8, patient=lambda i, pos: f"{'P' if pos else 'N'}{i // 2}"))
        out = grouped_split(m, seed=2)
        by_patient = {}
        for r in out.records:
            by_patient.setdefault(r.patient_id, set()).add(out.splits[r.video_id])
        assert all(len(s) == 1 for s in by_patient.values())

    def test_deterministic_and_seed_sensitive(self):
        m = DatasetManifest(make_records(12, 12))
        a = grouped_split(m, seed=5).splits
        b = grouped_split(m, seed=5).splits
        c = grouped_split(m, seed=6).splits
        assert a == b
        assert a != c

    def test_fraction_validation(self):
        m = DatasetManifest(make_records(5, 5))
        with pytest.raises(ConfigError):
            grouped_split(m, (0.5, 0.2, 0.2))
        with pytest.raises(ConfigError):
            grouped_split(m, (1.0, 0.0, 0.0))

    def test_too_few_groups(self):
        m = DatasetManifest(make_records(2, 5))
        with pytest.raises(DataError, match="group"):
            grouped_split(m)

    def test_input_manifest_not_mutated(self):
        m = DatasetManifest(make_records(5, 5))
        grouped_split(m, seed=0)
        assert m.splits is None


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdata")
    cfg = SynthConfig(seed=42, size=32, videos_per_class=4, frames_per_video=3)
    manifest = synth_generate(cfg, str(root))
    return str(root), manifest


class TestSynthGenerator:
    def test_layout_and_counts(self, synth_dir):
        root, manifest = synth_dir
        assert len(manifest) == 8
        assert manifest.frame_count == 24
        assert os.path.isdir(os.path.join(root, "frames"))
        assert os.path.isdir(os.path.join(root, "masks"))
        assert os.path.exists(os.path.join(root, "manifest.csv"))

    def test_negatives_rotate_source_classes(self, synth_dir):
        _, manifest = synth_dir
        neg_classes = [r.source_class for r in manifest.records if not r.is_positive]
        assert set(neg_classes) == {"normal", "pneumonia", "other"}

    def test_deterministic_bytes(self, tmp_path, synth_dir):
        root, _ = synth_dir
        cfg = SynthConfig(seed=42, size=32, videos_per_class=4, frames_per_video=3)
        again = tmp_path / "again"
        synth_generate(cfg, str(again))
        name = "pos000_f000.pgm"
        assert (again / "frames" / name).read_bytes() == \
            open(os.path.join(root, "frames", name), "rb").read()

    def test_different_seed_different_bytes(self, tmp_path, synth_dir):
        root, _ = synth_dir
        cfg = SynthConfig(seed=43, size=32, videos_per_class=4, frames_per_video=3)
        other = tmp_path / "other"
        synth_generate(cfg, str(other))
        name = "pos000_f000.pgm"
        assert (other / "frames" / name).read_bytes() != \
            open(os.path.join(root, "frames", name), "rb").read()

    def test_positive_masks_nonempty_negative_masks_empty(self, synth_dir):
        _, manifest = synth_dir
        for r in manifest.records:
            mask = load_mask(mask_path_for(r.frames[0]))
            if r.is_positive:
                assert mask.any(), r.video_id
            else:
                assert not mask.any(), r.video_id

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(seed=0, size=16).validate()
        with pytest.raises(ConfigError):
            SynthConfig(seed=0, videos_per_class=0).validate()
        with pytest.raises(ConfigError):
            SynthConfig(seed=0, pleural_depth_range=(0.6, 0.5)).validate()

    def test_pgm_is_valid_8bit(self, synth_dir):
        root, manifest = synth_dir
        blob = open(manifest.records[0].frames[0], "rb").read()
        assert blob.startswith(b"P5\n32 32\n255\n")
        assert len(blob) == len(b"P5\n32 32\n255\n") + 32 * 32


class TestNormalizationAndLoading:
    def test_stats_match_direct_computation(self, synth_dir):
        _, manifest = synth_dir
        split = grouped_split(manifest, (0.5, 0.25, 0.25), seed=0)
        stats = compute_norm_stats(split)
        imgs = []
        for r in split.split_records("train"):
            for fp in r.frames:
                blob = open(fp, "rb").read()
                imgs.append(np.frombuffer(blob[len(b"P5\n32 32\n255\n"):], dtype=np.uint8) / 255.0)
        all_px = np.concatenate(imgs)
        assert stats.mean == pytest.approx(all_px.mean(), abs=1e-12)
        assert stats.std == pytest.approx(all_px.std(), abs=1e-12)

    def test_load_frames_standardizes(self, synth_dir):
        _, manifest = synth_dir
        split = grouped_split(manifest, (0.5, 0.25, 0.25), seed=0)
        stats = compute_norm_stats(split)
        x, y = load_frames(split, "train", stats)
        assert x.data.mean() == pytest.approx(0.0, abs=1e-9)
        assert x.data.std() == pytest.approx(1.0, abs=1e-9)
        assert set(np.unique(y)) <= {0, 1}
        assert x.shape[1:] == (1, 32, 32)

    def test_frame_order_is_stable(self, synth_dir):
        _, manifest = synth_dir
        split = grouped_split(manifest, (0.5, 0.25, 0.25), seed=0)
        stats = compute_norm_stats(split)
        a, ya = load_frames(split, "val", stats)
        b, yb = load_frames(split, "val", stats)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(ya, yb)

    def test_stats_json_round_trip(self, tmp_path):
        from usattn.data import NormalizationStats
        stats = NormalizationStats(mean=0.25, std=0.1, train_seed=7)
        p = tmp_path / "stats.json"
        save_norm_stats(stats, str(p))
        back = load_norm_stats(str(p))
        assert back.mean == 0.25 and back.std == 0.1 and back.train_seed == 7

    def test_black_frame_standardizes_to_constant(self, tmp_path):
        from usattn.data import NormalizationStats, VideoRecord, DatasetManifest
        frame = tmp_path / "black.pgm"
        frame.write_bytes(b"P5\n4 4\n255\n" + bytes(16))
        m = DatasetManifest(
            [VideoRecord("v0", (str(frame),), "covid", "convex", None)],
            {"v0": "train"})
        stats = NormalizationStats(mean=0.25, std=0.5)
        x, _ = load_frames(m, "train", stats)
        assert np.all(x.data == -0.25 / 0.5)

    def test_mask_path_convention(self):
        assert mask_path_for("/d/frames/a.pgm") == "/d/masks/a.pgm"


class TestSummaries:
    def test_counts(self, synth_dir):
        _, manifest = synth_dir
        s = summarize(manifest)
        assert s["videos"]["total"] == 8
        assert s["videos"]["by_label"] == {"positive": 4, "negative": 4}
        assert s["frames"]["total"] == 24

    def test_table_mentions_every_split(self, synth_dir):
        _, manifest = synth_dir
        split = grouped_split(manifest, (0.5, 0.25, 0.25), seed=0)
        text = summary_table(summarize(split))
        for word in ("train", "val", "test", "videos", "frames"):
            assert word in text

    def test_empty_manifest_counts_are_zero(self):
        from usattn.data import DatasetManifest
        s = summarize(DatasetManifest([]))
        assert s["videos"]["total"] == 0
        assert s["frames"]["total"] == 0
        assert all(v == 0 for v in s["videos"]["by_label"].values())
