"""Command-line entry point: ``touchspot <subcommand>``.

Every SpotConfig field can be overridden with a flag of the same name, e.g.
``--clip_length 16 --use_soft_labels false``. Failures exit with status 2
and print one line ``error: <Kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from .core import DESK_PRESET, SpotConfig, SpotError, check_config, config_fields, read_config_values, save_config

log = logging.getLogger("touchspot")

PRESETS = {"desk": DESK_PRESET, "full": {}}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _field_parser(f: dataclasses.Field):
    hint = str(f.type)
    if "tuple" in hint:
        return _parse_ints
    if "bool" in hint:
        return _parse_bool
    if "int" in hint:
        return int
    if "float" in hint:
        return float
    return str


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="YAML key-value config file")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="base values before --config")
    for f in config_fields():
        g.add_argument(f"--{f.name}", type=_field_parser(f), default=None, metavar=f.name.upper())


def resolve_config(args) -> SpotConfig:
    values = dict(PRESETS[args.preset])
    if args.config:
        values.update(read_config_values(args.config))
    for f in config_fields():
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return check_config(SpotConfig(**values))


def _overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in config_fields() if getattr(args, f.name, None) is not None}


# -- subcommands -------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    from .synth import SynthParams, generate_dataset, write_dataset

    params = SynthParams(
        frame_size=args.frame_size,
        num_frames=args.num_frames,
        seed=args.seed,
        id_prefix=args.id_prefix,
        camera_jitter=args.camera_jitter,
        blur_prob=args.blur_prob,
        hand_speed=(args.speed_min, args.speed_max),
        num_events=(args.events_min, args.events_max),
    )
    items = generate_dataset(args.n_videos, params)
    out = write_dataset(items, args.out)
    print(f"wrote {len(items)} videos to {out}")
    return 0


def cmd_stats(args) -> int:
    from .data import compute_stats, load_annotations

    stats = compute_stats(load_annotations(args.annotations))
    print(stats.report(args.title or str(args.annotations)))
    return 0


def _load_split(data_dir):
    from .synth import read_dataset

    return read_dataset(data_dir)


def cmd_train(args) -> int:
    from .data import assert_disjoint, split_by_video
    from .train import SpotDataset, train_model

    cfg = resolve_config(args)
    anns, frames = _load_split(args.data)
    if args.val_data:
        val_anns, val_frames = _load_split(args.val_data)
        assert_disjoint(anns, val_anns)
        frames = {**frames, **val_frames}
        train_anns = anns
    else:
        train_anns, val_anns = split_by_video(anns, cfg.val_fraction, cfg.seed)
    train_ds = SpotDataset(train_anns, frames, cfg)
    val_ds = SpotDataset(val_anns, frames, cfg) if val_anns else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    res = train_model(cfg, train_ds, val_ds, out)
    print(json.dumps({"best_epoch": res.best_epoch, "best_val_map": res.best_map, "seconds": round(res.seconds, 1)}))
    return 0


def cmd_predict(args) -> int:
    from .model import load_checkpoint
    from .postprocess import write_detections, write_scores
    from .train import SpotDataset, detections_from_scores, predict_dataset

    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg.replace(**_overrides(args))
    if cfg.to_dict() != model.cfg.to_dict():
        model = load_checkpoint(args.checkpoint, cfg)
    anns, frames = _load_split(args.data)
    scores = predict_dataset(model, SpotDataset(anns, frames, cfg))
    dets = detections_from_scores(scores, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(scores, out / "scores.tsv")
    write_detections(dets, out / "detections.tsv")
    print(f"wrote {sum(len(d) for d in dets.values())} detections for {len(dets)} videos to {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_annotations
    from .evaluation import evaluate_videos, format_table
    from .postprocess import read_detections, read_scores
    from .train import detections_from_scores, ground_truth

    cfg = resolve_config(args)
    gts = ground_truth(load_annotations(args.annotations))
    rows = {}
    for path in args.detections or []:
        rows[Path(path).name] = evaluate_videos(read_detections(path), gts, cfg.tolerances, args.per_video)
    if args.scores:
        scores = read_scores(args.scores)
        for name, tor, nms in (
            ("raw", False, "none"),
            ("raw + NMS/SNMS", False, cfg.nms_kind if cfg.nms_kind != "none" else "soft"),
            ("Gauss-TOR", True, "none"),
            ("Gauss-TOR + NMS/SNMS", True, cfg.nms_kind if cfg.nms_kind != "none" else "soft"),
        ):
            dets = detections_from_scores(scores, cfg, use_tor=tor, nms=nms)
            rows[name] = evaluate_videos(dets, gts, cfg.tolerances, args.per_video)
    if not rows:
        raise SpotError("nothing to evaluate: pass --detections and/or --scores")
    print(format_table(rows, cfg.tolerances))
    return 0


def _parse_size(text: str) -> tuple[int, int]:
    w, _, h = text.lower().partition("x")
    return int(w), int(h)


def cmd_plot(args) -> int:
    from .data import load_annotations
    from .plot import save_video_plot
    from .postprocess import read_detections, read_scores

    scores = read_scores(args.scores)
    dets = read_detections(args.detections) if args.detections else {}
    anns = {a.video_id: a for a in load_annotations(args.annotations)}
    videos = args.video or sorted(scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vid in videos:
        if vid not in scores or vid not in anns:
            raise SpotError(f"unknown video id {vid}")
        save_video_plot(
            out / f"{vid}.png",
            scores[vid][0],
            dets.get(vid, []),
            anns[vid].event_frames,
            delta=args.delta,
            size=args.size,
            title=vid,
        )
    print(f"wrote {len(videos)} plots to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import format_table
    from .train import ablation_configs, run_ablation

    cfg = resolve_config(args)
    ablation_configs(args.axis, cfg, args.scale)
    anns, frames = _load_split(args.data)
    test_anns, test_frames = _load_split(args.test_data)
    rows = run_ablation(
        args.axis, cfg, anns, {**frames, **test_frames}, test_anns, test_frames, args.seeds, args.scale, args.rows
    )
    table = format_table(rows, cfg.tolerances)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="touchspot", description="Frame-precise touch-moment spotting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n-videos", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frame-size", type=int, default=32)
    s.add_argument("--num-frames", type=int, default=64)
    s.add_argument("--id-prefix", default="v")
    s.add_argument("--camera-jitter", type=float, default=0.4)
    s.add_argument("--blur-prob", type=float, default=0.1)
    s.add_argument("--speed-min", type=float, default=1.0)
    s.add_argument("--speed-max", type=float, default=2.5)
    s.add_argument("--events-min", type=int, default=1)
    s.add_argument("--events-max", type=int, default=2)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("stats", help="dataset statistics table")
    s.add_argument("annotations", type=Path)
    s.add_argument("--title", default="")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--val-data", type=Path)
    s.add_argument("--out", required=True, type=Path)
    add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="score videos and write detections")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    for f in config_fields():
        s.add_argument(f"--{f.name}", type=_field_parser(f), default=None, metavar=f.name.upper())
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="AP@δ / mAP report")
    s.add_argument("--annotations", required=True, type=Path)
    s.add_argument("--detections", type=Path, action="append")
    s.add_argument("--scores", type=Path)
    s.add_argument("--per-video", action="store_true")
    add_config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="per-video score / detection plots")
    s.add_argument("--scores", required=True, type=Path)
    s.add_argument("--detections", type=Path)
    s.add_argument("--annotations", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--video", action="append")
    s.add_argument("--delta", type=int, default=2)
    s.add_argument("--size", type=_parse_size, default=(900, 450), help="WIDTHxHEIGHT in pixels")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("ablate", help="train/evaluate an ablation axis")
    s.add_argument("--axis", required=True)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--test-data", required=True, type=Path)
    s.add_argument("--seeds", type=_parse_ints, default=(0,))
    s.add_argument("--scale", type=float, default=1.0, help="multiplier on the clip-length axis values")
    s.add_argument("--row", dest="rows", action="append", help="run only the named rows (repeatable)")
    s.add_argument("--out", type=Path)
    add_config_flags(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: typing.Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SpotError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
