"""Command-line front end for the full pipeline.

Subcommands: synth, split, train, eval, analyze, bench, search, explain.
Option precedence is flag > config file (TOML or JSON) > built-in default,
and every run writes a run.json that echoes the fully-resolved options —
rerunning from that file reproduces the run bit for bit. Inputs are never
modified; outputs always go to caller-chosen new paths.

Exit codes: 0 success, 1 usage error, 2 configuration/data error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import data as data_mod
from .analyzer import analyze, benchmark_latency, format_table, report_json
from .errors import (
    ConfigError,
    DataError,
    GraphBuildError,
    MetricError,
    ShapeError,
    UsageError,
)
from .explain import localization_score, occlusion_map, overlay_image, save_map_pgm
from .graph import (
    FORMAT_VERSION,
    PrototypeConfig,
    build_graph,
    deserialize_graph,
    load_weights,
    parse_graph_text,
    resnet50_descriptor,
    save_weights,
    seed_prototype,
    serialize_graph,
)
from .search import SearchBudget, SearchConstraints, save_search_log, search
from .train import TrainConfig, evaluate, predict_scores, train

__all__ = ["main", "run_cli"]


# ---------------------------------------------------------------------------
# option resolution


def _load_config_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if path.endswith(".json"):
        try:
            doc = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}") from exc
    else:
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            doc = tomllib.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: invalid TOML config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config file must hold a table/object")
    return doc


def _resolve(args, defaults):
    """flag > config file > default, for every known option."""
    resolved = dict(defaults)
    file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in file_cfg.items():
        norm = key.replace("-", "_")
        if norm not in resolved:
            raise ConfigError(f"unknown config file option {key!r} for this subcommand")
        resolved[norm] = value
    for key in resolved:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
    return resolved


def _write_run_json(out_dir, subcommand, resolved):
    doc = {
        "tool": "usattn",
        "version": __version__,
        "graph_format_version": FORMAT_VERSION,
        "subcommand": subcommand,
        "options": {k: resolved[k] for k in sorted(resolved)},
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_shape(text):
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad shape {text!r}; expected e.g. 1x1x128x128") from None
    if len(parts) != 4 or any(p < 1 for p in parts):
        raise UsageError(f"bad shape {text!r}; expected 4 positive extents NxCxHxW")
    return parts


def _parse_fractions(text):
    try:
        fr = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"bad fractions {text!r}; expected e.g. 0.7,0.15,0.15") from None
    return fr


def _load_graph_arg(spec, input_shape=None, rng_seed=0):
    """A graph from a preset name or a JSON file path."""
    if spec == "seed":
        shape = input_shape or (1, 1, 128, 128)
        cfg = PrototypeConfig(input_shape=shape)
        return build_graph(seed_prototype(cfg), shape, rng_seed=rng_seed)
    if spec == "resnet50":
        shape = input_shape or (1, 3, 224, 224)
        return build_graph(resnet50_descriptor(2, input_shape=shape), shape, rng_seed=rng_seed)
    if not os.path.exists(spec):
        raise ConfigError(f"graph file not found: {spec} (or use preset 'seed'/'resnet50')")
    with open(spec, encoding="utf-8") as fh:
        text = fh.read()
    if input_shape is not None:
        specs, _ = parse_graph_text(text)
        return build_graph(specs, input_shape, rng_seed=rng_seed)
    return deserialize_graph(text, rng_seed=rng_seed)


def _load_split_frames(manifest_path, stats_path, split):
    manifest = data_mod.load_manifest(manifest_path)
    if manifest.splits is None:
        raise DataError(f"{manifest_path}: manifest has no split column; run `usattn split` first")
    stats = data_mod.load_norm_stats(stats_path)
    x, y = data_mod.load_frames(manifest, split, stats)
    return manifest, stats, x, y


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args):
    defaults = {
        "out": None, "seed": 0, "size": 128, "videos_per_class": 60,
        "frames_per_video": 20, "white_lung_prob": 0.5,
    }
    opt = _resolve(args, defaults)
    if not opt["out"]:
        raise UsageError("synth: --out directory is required")
    cfg = data_mod.SynthConfig(
        seed=int(opt["seed"]), size=int(opt["size"]),
        videos_per_class=int(opt["videos_per_class"]),
        frames_per_video=int(opt["frames_per_video"]),
        white_lung_prob=float(opt["white_lung_prob"]),
    )
    manifest = data_mod.synth_generate(cfg, opt["out"])
    _write_run_json(opt["out"], "synth", opt)
    summary = data_mod.summarize(manifest)
    sys.stdout.write(data_mod.summary_table(summary))
    sys.stdout.write(f"manifest: {os.path.join(opt['out'], 'manifest.csv')}\n")
    return 0


def _cmd_split(args):
    defaults = {"manifest": None, "out": None, "fractions": "0.7,0.15,0.15", "seed": 0}
    opt = _resolve(args, defaults)
    if not opt["manifest"] or not opt["out"]:
        raise UsageError("split: --manifest and --out are required")
    if os.path.abspath(opt["manifest"]) == os.path.abspath(opt["out"]):
        raise UsageError("split: --out must differ from --manifest (inputs are never rewritten)")
    fractions = _parse_fractions(str(opt["fractions"]))
    manifest = data_mod.load_manifest(opt["manifest"])
    result = data_mod.grouped_split(manifest, fractions, seed=int(opt["seed"]))
    data_mod.save_manifest(result, opt["out"])
    _write_run_json(os.path.dirname(os.path.abspath(opt["out"])) or ".", "split", opt)
    sys.stdout.write(data_mod.summary_table(data_mod.summarize(result)))
    return 0


def _cmd_train(args):
    defaults = {
        "manifest": None, "out_dir": None, "graph": "seed", "input_size": 128,
        "epochs": 10, "batch_size": 32, "lr": 0.01, "momentum": 0.9, "seed": 0,
        "no_shuffle": False,
    }
    opt = _resolve(args, defaults)
    if not opt["manifest"] or not opt["out_dir"]:
        raise UsageError("train: --manifest and --out-dir are required")
    manifest = data_mod.load_manifest(opt["manifest"])
    if manifest.splits is None:
        raise DataError(f"{opt['manifest']}: manifest has no split column; run `usattn split` first")
    stats = data_mod.compute_norm_stats(manifest, train_seed=int(opt["seed"]))
    xtr, ytr = data_mod.load_frames(manifest, "train", stats)
    xva, yva = data_mod.load_frames(manifest, "val", stats)

    size = int(opt["input_size"])
    if xtr.shape[2] != size or xtr.shape[3] != size:
        raise DataError(
            f"frames are {xtr.shape[3]}x{xtr.shape[2]} but --input-size is {size}")
    graph = _load_graph_arg(opt["graph"], input_shape=(1, 1, size, size), rng_seed=int(opt["seed"]))
    tc = TrainConfig(
        seed=int(opt["seed"]), epochs=int(opt["epochs"]), batch_size=int(opt["batch_size"]),
        lr=float(opt["lr"]), momentum=float(opt["momentum"]), shuffle=not opt["no_shuffle"],
    )
    graph, hist = train(graph, (xtr, ytr), (xva, yva), tc)

    out_dir = opt["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "graph.json"), "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(graph))
    save_weights(graph, os.path.join(out_dir, "weights.bin"))
    data_mod.save_norm_stats(stats, os.path.join(out_dir, "norm_stats.json"))
    with open(os.path.join(out_dir, "history.json"), "w", encoding="utf-8") as fh:
        fh.write(hist.to_json())
    _write_run_json(out_dir, "train", opt)
    sys.stdout.write(
        f"trained {tc.epochs} epochs; best val AUC {hist.best_val_auc:.4f} "
        f"(epoch {hist.best_epoch}); artifacts in {out_dir}\n")
    return 0


def _cmd_eval(args):
    defaults = {
        "manifest": None, "graph": None, "weights": None, "stats": None,
        "split": "test", "threshold": 0.5, "scores_csv": None, "out_dir": None,
    }
    opt = _resolve(args, defaults)
    for key in ("manifest", "graph", "weights"):
        if not opt[key]:
            raise UsageError(f"eval: --{key} is required")
    stats_path = opt["stats"] or os.path.join(os.path.dirname(opt["weights"]), "norm_stats.json")
    manifest, stats, x, y = _load_split_frames(opt["manifest"], stats_path, opt["split"])
    graph = _load_graph_arg(opt["graph"], input_shape=(1,) + tuple(x.shape[1:]))
    load_weights(graph, opt["weights"])
    report = evaluate(graph, (x, y), threshold=float(opt["threshold"]))
    sys.stdout.write(report.to_json())
    if opt["scores_csv"]:
        pairs = data_mod._ordered_frames(manifest.split_records(opt["split"]))
        with open(opt["scores_csv"], "w", encoding="utf-8") as fh:
            fh.write("frame_path,label,score\n")
            for (fp, lab), s in zip(pairs, report.scores):
                fh.write(f"{fp},{lab},{s:.10f}\n")
    if opt["out_dir"]:
        _write_run_json(opt["out_dir"], "eval", opt)
        with open(os.path.join(opt["out_dir"], "eval.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    return 0


def _cmd_analyze(args):
    defaults = {"graph": None, "input": None, "auc": None, "json_out": None, "name": None}
    opt = _resolve(args, defaults)
    if not opt["graph"]:
        raise UsageError("analyze: --graph is required")
    shape = _parse_shape(opt["input"]) if opt["input"] else None
    graph = _load_graph_arg(opt["graph"], input_shape=shape)
    auc = float(opt["auc"]) if opt["auc"] is not None else None
    report = analyze(graph, input_shape=shape, auc=auc)
    name = opt["name"] or (opt["graph"] if opt["graph"] in ("seed", "resnet50")
                           else os.path.basename(opt["graph"]))
    sys.stdout.write(format_table([(name, report)]))
    if opt["json_out"]:
        with open(opt["json_out"], "w", encoding="utf-8") as fh:
            fh.write(report_json(report, name=name))
    return 0


def _cmd_bench(args):
    defaults = {"graph": None, "input": None, "runs": 50, "warmup": 5, "json_out": None}
    opt = _resolve(args, defaults)
    if not opt["graph"]:
        raise UsageError("bench: --graph is required")
    shape = _parse_shape(opt["input"]) if opt["input"] else None
    graph = _load_graph_arg(opt["graph"], input_shape=shape)
    stats = benchmark_latency(graph, input_shape=shape, n_runs=int(opt["runs"]),
                              warmup=int(opt["warmup"]))
    doc = {
        "median_ms": stats.median_ms, "mean_ms": stats.mean_ms, "p95_ms": stats.p95_ms,
        "std_ms": stats.std_ms, "n_runs": stats.n_runs,
    }
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    if opt["json_out"]:
        with open(opt["json_out"], "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, indent=2) + "\n")
    return 0


def _cmd_search(args):
    defaults = {
        "manifest": None, "out_dir": None, "rounds": 5, "candidates": 4, "epochs": 3,
        "seed": 0, "input_size": 128, "max_params": 1_000_000, "max_flops": 1_000_000_000,
        "min_auc": 0.9,
    }
    opt = _resolve(args, defaults)
    if not opt["manifest"] or not opt["out_dir"]:
        raise UsageError("search: --manifest and --out-dir are required")
    manifest = data_mod.load_manifest(opt["manifest"])
    if manifest.splits is None:
        raise DataError(f"{opt['manifest']}: manifest has no split column; run `usattn split` first")
    stats = data_mod.compute_norm_stats(manifest)
    xtr, ytr = data_mod.load_frames(manifest, "train", stats)
    xva, yva = data_mod.load_frames(manifest, "val", stats)

    size = int(opt["input_size"])
    seed_cfg = PrototypeConfig(input_shape=(1, 1, size, size))
    constraints = SearchConstraints(
        max_params=int(opt["max_params"]), max_flops=int(opt["max_flops"]),
        min_auc=float(opt["min_auc"]))
    budget = SearchBudget(rounds=int(opt["rounds"]), candidates_per_round=int(opt["candidates"]),
                          epochs_per_candidate=int(opt["epochs"]))
    result = search(seed_cfg, constraints, budget, (xtr, ytr), (xva, yva), seed=int(opt["seed"]))

    out_dir = opt["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    save_search_log(result.log, os.path.join(out_dir, "search_log.jsonl"))
    _write_run_json(out_dir, "search", opt)
    if not result.feasible:
        sys.stderr.write("search: no feasible candidate found (log written)\n")
        return 3
    best_cfg = result.best.config
    graph = build_graph(seed_prototype(best_cfg), best_cfg.input_shape, rng_seed=int(opt["seed"]))
    with open(os.path.join(out_dir, "best_graph.json"), "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(graph))
    sys.stdout.write(
        f"best candidate id={result.best.id} u={result.best.u:.2f} "
        f"val_auc={result.best.val_auc:.4f} params={result.best.params} "
        f"flops={result.best.flops} ({len(result.log)} records)\n")
    return 0


def _cmd_explain(args):
    defaults = {
        "manifest": None, "graph": None, "weights": None, "stats": None, "out_dir": None,
        "split": "test", "count": 50, "patch": 16, "stride": 8, "quantile": 0.85,
        "target_class": 1, "threshold": 0.5,
    }
    opt = _resolve(args, defaults)
    for key in ("manifest", "graph", "weights", "out_dir"):
        if not opt[key]:
            raise UsageError(f"explain: --{key} is required")
    stats_path = opt["stats"] or os.path.join(os.path.dirname(opt["weights"]), "norm_stats.json")
    manifest, stats, x, y = _load_split_frames(opt["manifest"], stats_path, opt["split"])
    graph = _load_graph_arg(opt["graph"], input_shape=(1,) + tuple(x.shape[1:]))
    load_weights(graph, opt["weights"])

    pairs = data_mod._ordered_frames(manifest.split_records(opt["split"]))
    scores = predict_scores(graph, x)
    chosen = [
        i for i, (fp, lab) in enumerate(pairs)
        if lab == 1 and scores[i] >= float(opt["threshold"])
    ][: int(opt["count"])]
    if not chosen:
        raise DataError("explain: no correctly-classified positive frames in this split")

    out_dir = opt["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    from .tensor import Tensor

    results = []
    for i in chosen:
        fp, _ = pairs[i]
        img = Tensor(np.ascontiguousarray(x.data[i : i + 1]))
        cf = occlusion_map(graph, img, target_class=int(opt["target_class"]),
                           patch=int(opt["patch"]), stride=int(opt["stride"]))
        stem = os.path.splitext(os.path.basename(fp))[0]
        raw = data_mod._read_gray(fp)
        overlay_image(raw, cf, os.path.join(out_dir, f"{stem}_overlay.png"))
        save_map_pgm(cf, os.path.join(out_dir, f"{stem}_map.pgm"))
        entry = {"frame": fp, "score": float(scores[i])}
        mask_path = data_mod.mask_path_for(fp)
        if os.path.exists(mask_path):
            entry["localization"] = localization_score(cf, data_mod.load_mask(mask_path))
        results.append(entry)

    loc = [e["localization"] for e in results if "localization" in e]
    summary = {
        "n_explained": len(results),
        "mean_localization": (sum(loc) / len(loc)) if loc else None,
        "per_image": results,
    }
    with open(os.path.join(out_dir, "explain_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _write_run_json(out_dir, "explain", opt)
    if loc:
        sys.stdout.write(
            f"explained {len(results)} frames; mean localization {summary['mean_localization']:.4f}\n")
    else:
        sys.stdout.write(f"explained {len(results)} frames (no ground-truth masks found)\n")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="usattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"usattn {__version__}")
    sub = p.add_subparsers(dest="subcommand")

    def add(name, fn, helptext):
        sp = sub.add_parser(name, help=helptext)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="TOML or JSON file with option defaults")
        return sp

    sp = add("synth", _cmd_synth, "generate a synthetic ultrasound dataset")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--videos-per-class", dest="videos_per_class", type=int)
    sp.add_argument("--frames-per-video", dest="frames_per_video", type=int)
    sp.add_argument("--white-lung-prob", dest="white_lung_prob", type=float)

    sp = add("split", _cmd_split, "grouped stratified split of a manifest")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--fractions")
    sp.add_argument("--seed", type=int)

    sp = add("train", _cmd_train, "train a graph on a split manifest")
    sp.add_argument("--manifest")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--graph")
    sp.add_argument("--input-size", dest="input_size", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-shuffle", dest="no_shuffle", action="store_const", const=True)

    sp = add("eval", _cmd_eval, "AUC/sensitivity/PPV of a trained model on a split")
    sp.add_argument("--manifest")
    sp.add_argument("--graph")
    sp.add_argument("--weights")
    sp.add_argument("--stats")
    sp.add_argument("--split")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--scores-csv", dest="scores_csv")
    sp.add_argument("--out-dir", dest="out_dir")

    sp = add("analyze", _cmd_analyze, "parameter/FLOP/NetScore report for a graph")
    sp.add_argument("--graph")
    sp.add_argument("--input")
    sp.add_argument("--auc", type=float)
    sp.add_argument("--json-out", dest="json_out")
    sp.add_argument("--name")

    sp = add("bench", _cmd_bench, "single-image latency benchmark")
    sp.add_argument("--graph")
    sp.add_argument("--input")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--json-out", dest="json_out")

    sp = add("search", _cmd_search, "constrained architecture search")
    sp.add_argument("--manifest")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--candidates", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--input-size", dest="input_size", type=int)
    sp.add_argument("--max-params", dest="max_params", type=int)
    sp.add_argument("--max-flops", dest="max_flops", type=int)
    sp.add_argument("--min-auc", dest="min_auc", type=float)

    sp = add("explain", _cmd_explain, "occlusion overlays and localization scores")
    sp.add_argument("--manifest")
    sp.add_argument("--graph")
    sp.add_argument("--weights")
    sp.add_argument("--stats")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--split")
    sp.add_argument("--count", type=int)
    sp.add_argument("--patch", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--quantile", type=float)
    sp.add_argument("--class", dest="target_class", type=int)
    sp.add_argument("--threshold", type=float)

    return p


def run_cli(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "subcommand", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except (ConfigError, DataError, GraphBuildError, ShapeError, MetricError,
            FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"i/o error: {exc}\n")
        return 3
    except Exception as exc:  # anything else is a runtime failure
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return 3


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
