"""Command-line entry point: ``merv <command> [options]``.

Every command loads and validates a :class:`RunConfig` before doing any
work, writes its artifacts under ``--out`` and prints a summary to stdout in
``--format json`` (default) or ``table``. Failures print a one-line JSON
object ``{"error": <type>, "message": <text>}`` to stderr and exit with
status 2.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import featio
from .alignment import Projector, prefuse_all
from .config import PRESETS, RunConfig
from .costmodel import pipeline_cost
from .encoders import encode, load_video, make_mock_encoder, uniform_sample_frames
from .errors import ConfigError, DimensionError, FormatError, MervError
from .fusion import Fuser, fuse, top_videos, weights_csv
from .scheduler import LatencyProfile, default_latency, simulate_step, sweep_csv, sweep_encoders

EXIT_ERROR = 2


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _table(obj, indent=""):
    """Plain ``key  value`` lines for nested dicts."""
    lines = []
    width = max((len(str(k)) for k in obj), default=0)
    for k, v in obj.items():
        if isinstance(v, dict):
            lines.append(f"{indent}{k}:")
            lines.append(_table(v, indent + "  ").rstrip("\n"))
        else:
            if isinstance(v, float):
                v = f"{v:.6g}"
            elif isinstance(v, list):
                v = " ".join(f"{x:.6g}" if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{indent}{str(k):<{width}}  {v}")
    return "\n".join(lines) + "\n"


def _write(out, name, data):
    path = os.path.join(out, name)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)
    return name


def _need_out(cfg, command):
    if not cfg.out:
        raise ConfigError(f"{command} writes files; pass --out DIR")
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


# ---------------------------------------------------------------- commands


def cmd_config(cfg, args):
    return cfg.to_dict(), None


def cmd_encode(cfg, args):
    plan = cfg.plan
    profiles = {p.name: p for p in plan.profiles}
    names = args.encoder or list(profiles)
    missing = [n for n in names if n not in profiles]
    if missing:
        raise ConfigError(f"encoders {missing} are not in the configured ensemble {list(profiles)}")
    out = _need_out(cfg, "encode")
    video = load_video(args.video, tuple(args.frame_size) if args.frame_size else None)
    written = {}
    for name in names:
        p = profiles[name]
        feat = encode(make_mock_encoder(p, cfg.seed), uniform_sample_frames(video, p.input_frames))
        written[name] = {"file": _write(out, f"{name}.mrvf", featio.dumps(feat)), "shape": list(feat.shape)}
    return {"t": cfg.t, "features": written}, None


def _feature_profiles(cfg, paths):
    """Match feature files to ensemble members by file stem and check their grids."""
    profiles = {p.name: p for p in cfg.plan.profiles}
    feats, used = {}, []
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        if name not in profiles:
            raise ConfigError(f"{path}: no encoder named {name!r} in {list(profiles)}")
        if name in feats:
            raise ConfigError(f"two feature files for encoder {name!r}")
        arr = featio.read_feature(path)
        p = profiles[name]
        want = (p.out_t, p.out_h, p.out_w, p.dim)
        if arr.shape != want:
            raise DimensionError(f"{path}: feature shape {arr.shape} does not match {name}'s grid {want}")
        feats[name] = arr
        used.append(p)
    return feats, used


def _connector(cfg, profiles):
    projector = Projector(cfg.projector, profiles)
    fuser = Fuser(cfg.fusion, len(profiles), cfg.projector.d)
    return projector, fuser


def cmd_fuse(cfg, args):
    feats, profiles = _feature_profiles(cfg, args.features)
    cfg.projector.validate(profiles)
    cfg.fusion.validate(len(profiles))
    projector, fuser = _connector(cfg, profiles)
    tokens, w = fuse(prefuse_all(feats, projector), fuser)
    names = [p.name for p in profiles]
    summary = {
        "encoders": names,
        "tokens_shape": list(tokens.shape),
        "weights": None if w is None else [float(x) for x in w],
    }
    if cfg.out:
        out = _need_out(cfg, "fuse")
        summary["files"] = {"tokens": _write(out, "tokens.mrvf", featio.dumps(tokens))}
        if w is not None:
            lines = ["encoder,weight"] + [f"{n},{float(x):.8f}" for n, x in zip(names, w)]
            summary["files"]["weights"] = _write(out, "weights.csv", "\n".join(lines) + "\n")
    return summary, None


def cmd_cost(cfg, args):
    strategies = args.compare.split(",") if args.compare else [cfg.fusion.strategy]
    reports = {}
    for s in strategies:
        c = cfg.with_strategy(s.strip())
        c.validate()
        reports[s.strip()] = pipeline_cost(c.system())
    first = next(iter(reports))
    summary = {"reports": {s: r.to_dict() for s, r in reports.items()}}
    if len(reports) > 1:
        base = reports[first]
        summary["flops_ratio_vs_" + first] = {
            s: r.total_flops / base.total_flops for s, r in reports.items()
        }
        summary["llm_flops_ratio_vs_" + first] = {
            s: r.stages["llm"].flops / base.stages["llm"].flops for s, r in reports.items()
        }
    table = "".join(f"[{s}]\n{r.to_table()}" for s, r in reports.items())
    if cfg.out:
        out = _need_out(cfg, "cost")
        _write(out, "cost.json", _dump(summary))
        _write(out, "cost.txt", table)
    return summary, table


def _latency(cfg, args):
    if args.latency_csv:
        try:
            with open(args.latency_csv) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.latency_csv}: {exc.strerror}") from None
        try:
            return LatencyProfile.from_csv(text)
        except ValueError as exc:
            raise FormatError(f"{args.latency_csv}: {exc}") from None
    lc = cfg.latency
    return default_latency(cfg.profiles, lc.projector_ms, lc.fusion_ms, lc.llm_ms, lc.dispatch_ms)


def cmd_simulate(cfg, args):
    latency = _latency(cfg, args)
    if not latency.encoders:
        raise ConfigError("latency profile lists no encoders")
    lanes = args.lanes if args.lanes is not None else cfg.latency.lanes
    if lanes is not None and lanes < 1:
        raise ConfigError("lanes must be >= 1")
    if args.sweep:
        order = args.order.split(",") if args.order else list(latency.encoders)
        unknown = [n for n in order if n not in latency.encoders]
        if unknown:
            raise ConfigError(f"sweep order names unknown encoders {unknown}")
        rows = sweep_encoders(latency, order, args.policy, lanes)
        text = sweep_csv(rows)
        if cfg.out:
            _write(_need_out(cfg, "simulate"), "sweep.csv", text)
        return {"policy": args.policy, "sweep": rows}, text
    trace = simulate_step(latency, args.policy, lanes)
    gantt = trace.gantt()
    if cfg.out:
        out = _need_out(cfg, "simulate")
        _write(out, "trace.json", trace.to_json() + "\n")
        _write(out, "gantt.txt", gantt)
    return trace.to_dict(), gantt


def cmd_train_toy(cfg, args):
    from .toytrain.model import build_pipeline
    from .toytrain.tasks import make_synth_task
    from .toytrain.train import encode_task, evaluate, history_csv, save_checkpoint, train

    out = _need_out(cfg, "train-toy")
    plan = cfg.plan
    tc = cfg.task
    train_task = make_synth_task(tc.kind, tc.n_train, cfg.seed, tc.frames, tc.size)
    test_task = make_synth_task(tc.kind, tc.n_test, cfg.seed + 10_000, tc.frames, tc.size)
    encoders = [make_mock_encoder(p, cfg.seed) for p in plan.profiles]
    model = build_pipeline(plan.profiles, cfg.projector, cfg.fusion, cfg.llm, seed=cfg.seed)
    history = train(model, train_task, cfg.recipe, encode_task(train_task, encoders))
    result = evaluate(model, test_task, encode_task(test_task, encoders))
    names = model.names
    summary = {
        "task": tc.kind,
        "recipe": cfg.recipe.recipe,
        "steps": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "test_accuracy": result["accuracy"],
        "mean_weights": (
            None if result["mean_weights"] is None
            else {n: float(w) for n, w in zip(names, result["mean_weights"])}
        ),
        "files": {"metrics": "metrics.csv", "checkpoint": "checkpoint", "config": "config.json"},
    }
    _write(out, "metrics.csv", history_csv(history, names))
    _write(out, "config.json", cfg.to_json())
    save_checkpoint(model, os.path.join(out, "checkpoint"), meta={"seed": cfg.seed, "task": tc.kind})
    _write(out, "summary.json", _dump(summary))
    return summary, None


def _collect(cfg, root, profiles):
    """Feature sets per video id from ``root``.

    Sub-directories hold one ``<encoder>.mrvf`` per encoder; loose ``.mrvf``
    files are (T, H, W, 3) videos and are run through the mock encoders.
    """
    if not os.path.isdir(root):
        raise ConfigError(f"{root} is not a directory")
    encoders = None
    sets = {}
    for entry in sorted(os.listdir(root)):
        path = os.path.join(root, entry)
        if os.path.isdir(path):
            feats = {}
            for p in profiles:
                fpath = os.path.join(path, f"{p.name}.mrvf")
                if not os.path.exists(fpath):
                    raise FormatError(f"{path}: missing {p.name}.mrvf")
                arr = featio.read_feature(fpath)
                want = (p.out_t, p.out_h, p.out_w, p.dim)
                if arr.shape != want:
                    raise DimensionError(f"{fpath}: shape {arr.shape} does not match {want}")
                feats[p.name] = arr
            sets[entry] = feats
        elif entry.endswith(".mrvf"):
            if encoders is None:
                encoders = [make_mock_encoder(p, cfg.seed) for p in profiles]
            video = load_video(path)
            sets[entry[: -len(".mrvf")]] = {
                e.profile.name: encode(e, uniform_sample_frames(video, e.profile.input_frames)) for e in encoders
            }
    if not sets:
        raise FormatError(f"{root}: no videos or feature directories")
    return sets


def cmd_analyze(cfg, args):
    if args.model:
        from .toytrain.train import load_checkpoint

        model, _ = load_checkpoint(args.model)
        projector, fuser = model.to_numpy_stages()
        profiles = list(projector.profiles.values())
    else:
        profiles = list(cfg.plan.profiles)
        projector, fuser = _connector(cfg, profiles)
    if fuser.config.strategy in ("concat_seq", "concat_channel"):
        raise ConfigError(f"strategy {fuser.config.strategy!r} produces no encoder weights")
    if args.top_k < 1:
        raise ConfigError("--top-k must be >= 1")
    names = [p.name for p in profiles]
    sets = _collect(cfg, args.features_dir, profiles)
    table = {vid: fuse(prefuse_all(f, projector), fuser)[1] for vid, f in sets.items()}
    top = {
        n: [{"video_id": vid, "weight": float(table[vid][i])} for vid in top_videos(table, i, args.top_k)]
        for i, n in enumerate(names)
    }
    mean = np.mean([np.asarray(w, dtype=np.float64) for w in table.values()], axis=0)
    summary = {"videos": len(table), "mean_weights": dict(zip(names, map(float, mean))), "top_k": top}
    csv_text = weights_csv(table, names)
    if cfg.out:
        out = _need_out(cfg, "analyze")
        _write(out, "weights.csv", csv_text)
        lines = ["encoder,rank,video_id,weight"]
        for n, rows in top.items():
            lines += [f"{n},{r + 1},{row['video_id']},{row['weight']:.8f}" for r, row in enumerate(rows)]
        _write(out, "top_k.csv", "\n".join(lines) + "\n")
    return summary, csv_text


def cmd_synth(cfg, args):
    """Write synthetic task videos as container files plus a labels CSV."""
    from .toytrain.tasks import make_synth_task

    out = _need_out(cfg, "synth")
    tc = cfg.task
    task = make_synth_task(args.kind or tc.kind, args.n, cfg.seed, tc.frames, tc.size)
    lines = ["video_id," + ",".join(f"label{i}" for i in range(task.labels.shape[1]))]
    for i, (v, lab) in enumerate(zip(task.videos, task.labels)):
        vid = f"video_{i:04d}"
        _write(out, f"{vid}.mrvf", featio.dumps(v))
        lines.append(vid + "," + ",".join(str(int(x)) for x in lab))
    _write(out, "labels.csv", "\n".join(lines) + "\n")
    return {"task": task.kind, "videos": len(task), "files": {"labels": "labels.csv"}}, None


COMMANDS = {
    "config": cmd_config,
    "encode": cmd_encode,
    "fuse": cmd_fuse,
    "cost": cmd_cost,
    "simulate": cmd_simulate,
    "train-toy": cmd_train_toy,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
}
DEFAULT_PRESET = {"train-toy": "toy", "synth": "toy"}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--preset", choices=PRESETS, help="base config when --config does not set one")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="directory for written artifacts")
    common.add_argument("--format", choices=("json", "table"), default="json")

    ap = argparse.ArgumentParser(prog="merv", description="Multi-encoder video feature pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("config", parents=[common], help="print the resolved run config")

    p = sub.add_parser("encode", parents=[common], help="run mock encoders on a video")
    p.add_argument("video", help="container file or directory of raw RGB8 frames")
    p.add_argument("--encoder", action="append", help="encoder name (repeatable; default all)")
    p.add_argument("--frame-size", type=int, nargs=2, metavar=("H", "W"))

    p = sub.add_parser("fuse", parents=[common], help="project and fuse feature files")
    p.add_argument("features", nargs="+", help="<encoder>.mrvf feature files")

    p = sub.add_parser("cost", parents=[common], help="parameter and FLOP report")
    p.add_argument("--compare", metavar="S1,S2", help="report several fusion strategies")

    p = sub.add_parser("simulate", parents=[common], help="simulate one training step")
    p.add_argument("latency_csv", nargs="?", help="rows of stage,name,latency_ms")
    p.add_argument("--policy", choices=("serial", "parallel"), default="parallel")
    p.add_argument("--lanes", type=int)
    p.add_argument("--sweep", action="store_true", help="add encoders one at a time")
    p.add_argument("--order", help="comma-separated sweep order")

    sub.add_parser("train-toy", parents=[common], help="train the toy pipeline on a synthetic task")

    p = sub.add_parser("analyze", parents=[common], help="per-video encoder weights")
    p.add_argument("features_dir")
    p.add_argument("--model", metavar="CKPT", help="checkpoint written by train-toy")
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("synth", parents=[common], help="write synthetic task videos")
    p.add_argument("--kind", help="task kind (default from config)")
    p.add_argument("-n", type=int, default=16)
    return ap


def _fail(exc):
    msg = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(msg, sort_keys=True) + "\n")
    return EXIT_ERROR


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        preset = args.preset or DEFAULT_PRESET.get(args.command)
        cfg = RunConfig.load(args.config, preset=preset, seed=args.seed, out=args.out)
        summary, text = COMMANDS[args.command](cfg, args)
    except (MervError, ValueError, KeyError) as exc:
        return _fail(exc)
    if args.format == "table":
        sys.stdout.write(text if text is not None else _table(summary))
    else:
        sys.stdout.write(_dump(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
