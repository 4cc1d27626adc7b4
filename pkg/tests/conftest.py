"""Shared fixtures: synthetic corpora at three scales and one trained model.

The heavy fixtures (full-size corpus, 10-epoch training run) are session
scoped and only materialize when a test actually requests them, so the unit
files stay fast when run on their own.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from usattn.data import (
    SynthConfig,
    compute_norm_stats,
    grouped_split,
    load_frames,
    load_manifest,
    save_manifest,
    synth_generate,
)

CLI = [sys.executable, "-m", "usattn.cli"]


def run_cli(*args, cwd=None):
    return subprocess.run(CLI + [str(a) for a in args], cwd=cwd,
                          capture_output=True, text=True)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """24 frames at 32x32 — enough for manifest/CLI plumbing tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(seed=11, size=32, videos_per_class=6, frames_per_video=2)
    manifest = synth_generate(cfg, str(root / "data"))
    split = grouped_split(manifest, (0.7, 0.15, 0.15), seed=3)
    split_path = str(root / "split.csv")
    save_manifest(split, split_path)
    return {
        "root": str(root),
        "manifest": str(root / "data" / "manifest.csv"),
        "split_manifest": split_path,
        "size": 32,
    }


@pytest.fixture(scope="session")
def search_corpus(tmp_path_factory):
    """600 frames at 64x64, preloaded as arrays, for search/training tests."""
    root = tmp_path_factory.mktemp("search")
    cfg = SynthConfig(seed=99, size=64, videos_per_class=30, frames_per_video=10)
    manifest = synth_generate(cfg, str(root / "data"))
    split = grouped_split(manifest, (0.7, 0.15, 0.15), seed=4)
    stats = compute_norm_stats(split)
    xtr, ytr = load_frames(split, "train", stats)
    xva, yva = load_frames(split, "val", stats)
    return {
        "train_set": (xtr, ytr),
        "val_set": (xva, yva),
        "size": 64,
    }


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """Default-scale corpus: 120 videos x 20 frames at 128x128."""
    root = tmp_path_factory.mktemp("full")
    t0 = time.perf_counter()
    cfg = SynthConfig(seed=20260825)
    synth_generate(cfg, str(root / "data"))
    gen_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    proc = run_cli("split", "--manifest", root / "data" / "manifest.csv",
                   "--out", root / "split.csv", "--seed", 5)
    assert proc.returncode == 0, proc.stderr
    split_seconds = time.perf_counter() - t0
    return {
        "root": str(root),
        "manifest": str(root / "data" / "manifest.csv"),
        "split_manifest": str(root / "split.csv"),
        "gen_seconds": gen_seconds,
        "split_seconds": split_seconds,
    }


@pytest.fixture(scope="session")
def trained_run(full_corpus, tmp_path_factory):
    """Ten-epoch training of the seed model on the full corpus, via the CLI."""
    out = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    proc = run_cli("train", "--manifest", full_corpus["split_manifest"],
                   "--out-dir", out, "--epochs", 10, "--lr", 0.01,
                   "--batch-size", 32, "--seed", 1, "--input-size", 128)
    train_seconds = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr

    t0 = time.perf_counter()
    proc = run_cli("eval", "--manifest", full_corpus["split_manifest"],
                   "--graph", out / "graph.json", "--weights", out / "weights.bin",
                   "--split", "test", "--out-dir", out)
    eval_seconds = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    with open(out / "eval.json", encoding="utf-8") as fh:
        report = json.load(fh)

    return {
        "dir": str(out),
        "graph": str(out / "graph.json"),
        "weights": str(out / "weights.bin"),
        "stats": str(out / "norm_stats.json"),
        "history": str(out / "history.json"),
        "test_report": report,
        "corpus": full_corpus,
        "train_seconds": train_seconds,
        "eval_seconds": eval_seconds,
    }


def toy_binary_set(n_per_class=16, size=16, seed=0, shift=1.5):
    """Mean-separated noise images: trivially learnable, loads nothing from disk."""
    rng = np.random.default_rng(seed)
    neg = rng.standard_normal((n_per_class, 1, size, size))
    pos = rng.standard_normal((n_per_class, 1, size, size)) + shift
    x = np.concatenate([neg, pos])
    y = np.array([0] * n_per_class + [1] * n_per_class)
    order = rng.permutation(len(y))
    return x[order], y[order]
