"""``hsvt`` command line.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .backbone import _np_partition, attention_maps
from .config import ConfigError, RunConfig
from .detect import Detection, DetectionModel, map_50, map_50_95
from .esim import ConverterConfig, frames_to_events, load_frames, write_pgm
from .events import (BoxRecord, CornerBox, FormatError, corner_to_xywh, pad_to_multiple,
                     read_events, read_labels, write_events, write_labels)
from .nn import load_checkpoint
from .profiler import energy_report, published_backbone_report
from .synthetic import clips_to_dataset, load_clips, make_moving_square_clips, save_clips
from .train import evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _fmt_from(path, explicit):
    if explicit:
        return explicit
    return "csv" if Path(path).suffix.lower() == ".csv" else "bin"


# -- conversion ----------------------------------------------------------------------


def cmd_convert_events(args):
    stream = read_events(args.input, args.width, args.height, _fmt_from(args.input, args.in_format))
    write_events(args.output, stream, _fmt_from(args.output, args.out_format))
    print(f"{len(stream)} events -> {args.output}")


def read_corner_labels(path, fps):
    """Text labels ``frame,class,x1,y1,x2,y2`` (header optional) -> BoxRecords, t = frame/fps s."""
    records = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("frame"):
                continue
            parts = line.split(",")
            try:
                if len(parts) != 6:
                    raise ValueError("expected 6 fields")
                frame, cls = int(parts[0]), int(parts[1])
                x, y, w, h = corner_to_xywh(CornerBox(*(float(v) for v in parts[2:])))
                if frame < 0:
                    raise ValueError("negative frame index")
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed label ({exc})") from None
            t = int(round(frame * 1_000_000 / fps))
            records.append(BoxRecord(t, x, y, w, h, cls, 1.0, 0))
    return records


def write_corner_labels(path, records, fps):
    lines = ["frame,class,x1,y1,x2,y2"]
    for r in records:
        frame = int(round(r.t * fps / 1_000_000))
        lines.append(f"{frame},{r.class_id},{r.x:g},{r.y:g},{r.x + r.w:g},{r.y + r.h:g}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_convert_labels(args):
    if not args.fps > 0:
        raise CliError("--fps must be positive")
    if Path(args.input).suffix.lower() == ".lbl":
        records = read_labels(args.input)
        write_corner_labels(args.output, records, args.fps)
    else:
        records = read_corner_labels(args.input, args.fps)
        write_labels(args.output, records)
    print(f"{len(records)} labels -> {args.output}")


def cmd_simulate_events(args):
    seq = load_frames(args.frames, args.fps)
    if seq.frames.max(initial=0) > 1.0:
        seq.frames = seq.frames / 255.0
    stream = frames_to_events(seq, ConverterConfig(args.c_pos, args.c_neg, args.log_eps))
    write_events(args.output, stream, _fmt_from(args.output, args.format))
    print(f"{len(stream)} events -> {args.output}")


def cmd_make_synthetic(args):
    clips = make_moving_square_clips(args.clips, args.seed, height=args.height, width=args.width,
                                     num_windows=args.num_windows, delta_t_ms=args.delta_t_ms)
    save_clips(args.output, clips, args.delta_t_ms, args.num_windows)
    print(f"{len(clips)} clips -> {args.output}")


# -- model commands ------------------------------------------------------------------


def _run_config(args):
    values = cfgmod.parse_text(Path(args.config).read_text(), args.config) if args.config else {}
    for key in ("seed", "epochs", "delta_t_ms", "variant", "preset"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "placement", None):
        values["placement"] = args.placement
    return cfgmod.build_run_config(values)


def _dataset(cfg: RunConfig, directory, split):
    """Windowed dataset from a clip directory, or freshly generated moving-square clips."""
    t_bins = cfg.model.t_bins
    if directory:
        clips, _, num_windows, height, width = load_clips(directory)
    else:
        if cfg.preset != "synthetic":
            raise CliError(f"preset {cfg.preset!r} needs a data directory (--data or data_dir)")
        num_windows, height, width = cfg.num_windows, cfg.height, cfg.width
        n = cfg.train_clips if split == "train" else cfg.val_clips
        seed = 2 * cfg.train.seed + (1 if split == "train" else 2)
        clips = make_moving_square_clips(n, seed, height=height, width=width,
                                         num_windows=num_windows, delta_t_ms=cfg.delta_t_ms)
    ds = clips_to_dataset(clips, t_bins, cfg.delta_t_ms, height, width, num_windows)
    ds.frames = pad_to_multiple(ds.frames, 32)
    return ds


def _data_dir(explicit, configured):
    d = explicit or configured
    if d and not Path(d).is_absolute() and not Path(d).exists():
        d = str(cfgmod.default_data_root() / d)
    return d


def _model(cfg, checkpoint=None):
    model = DetectionModel(cfg.model, cfg.head)
    if checkpoint:
        model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _config_for_checkpoint(args):
    if args.config:
        return _run_config(args)
    sidecar = Path(args.checkpoint).with_name("config.txt")
    if not sidecar.is_file():
        raise CliError(f"no --config given and {sidecar} not found", EXIT_IO)
    return cfgmod.load_config(sidecar)


def cmd_train(args):
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = _dataset(cfg, _data_dir(args.data, cfg.data_dir), "train")
    val_dir = _data_dir(args.val_data, cfg.val_dir)
    val_set = _dataset(cfg, val_dir, "val") if (val_dir or not args.data) else None
    (out / "config.txt").write_text(cfgmod.dump_config(cfg))
    model = _model(cfg)
    records = train(model, train_set, val_set, cfg.train, out,
                    log=(lambda r: print(json.dumps(r), flush=True)) if args.verbose else None)
    final = [r for r in records if "map50" in r]
    if final:
        print(f"mAP@0.5 {final[-1]['map50']:.4f}  mAP@50:95 {final[-1]['map50_95']:.4f}")
    print(f"checkpoint -> {out / 'model.ckpt'}")


def _images_by_time(records, as_detections):
    """Group label records by timestamp; each distinct t is one image."""
    groups = {}
    for r in records:
        item = Detection(r.xywh, r.class_id, r.class_confidence) if as_detections else r
        groups.setdefault(r.t, []).append(item)
    return groups


def cmd_eval(args):
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise CliError("--pred and --gt must be given together")
        preds = _images_by_time(read_labels(args.pred), True)
        gts = _images_by_time(read_labels(args.gt), False)
        keys = sorted(set(preds) | set(gts))
        dets = [preds.get(k, []) for k in keys]
        truth = [gts.get(k, []) for k in keys]
        m = {"map50": map_50(dets, truth), "map50_95": map_50_95(dets, truth)}
    else:
        if not args.checkpoint:
            raise CliError("eval needs --checkpoint or --pred/--gt")
        cfg = _config_for_checkpoint(args)
        model = _model(cfg, args.checkpoint)
        ds = _dataset(cfg, _data_dir(args.data, cfg.val_dir), "val")
        m = evaluate(model, ds, cfg.train.batch_size)
    print(f"mAP@0.5 {m['map50']:.4f}")
    print(f"mAP@50:95 {m['map50_95']:.4f}")


def cmd_profile(args):
    if args.published:
        report = published_backbone_report(args.published)
    else:
        cfg = _config_for_checkpoint(args) if args.checkpoint else _run_config(args)
        model = _model(cfg, args.checkpoint)
        ds = _dataset(cfg, _data_dir(args.data, cfg.val_dir), "val")
        clips = ds.frames[: args.calibration_clips]
        report = energy_report(model, np.moveaxis(clips, 1, 0))
        h, w = ds.frames.shape[-2:]
        report.notes.append(f"input {h}x{w}, {len(clips)} calibration clips x {ds.num_windows} windows")
    print(report.to_table())
    if args.jsonl:
        Path(args.jsonl).write_text(report.to_jsonl())


def _to_gray(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo) * 255.0


def cmd_dump_attention(args):
    cfg = _config_for_checkpoint(args)
    model = _model(cfg, args.checkpoint)
    ds = _dataset(cfg, _data_dir(args.data, cfg.val_dir), "val")
    if not 0 <= args.clip < len(ds) or not 0 <= args.window < ds.num_windows:
        raise CliError(f"clip/window out of range ({len(ds)} clips, {ds.num_windows} windows)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    model.backbone.set_retain_attention(True)
    frames = ds.frames[args.clip:args.clip + 1]
    model.run_sequence(np.moveaxis(frames[:, : args.window + 1], 1, 0))
    maps = attention_maps(model.backbone)
    event_frame = np.abs(frames[0, args.window]).sum(axis=0)
    H, W = event_frame.shape
    write_pgm(out / "events.pgm", _to_gray(event_frame))
    written = 0
    for stage, kinds in maps.maps.items():
        for kind, weights in kinds.items():
            size, n, h, w, hp, wp = maps.geometry[(stage, kind)]
            heat = attention_heatmap(weights, kind, size, n, h, w, hp, wp)[0]
            stem = out / f"stage{stage + 1}_{kind}"
            write_pgm(stem.with_suffix(".pgm"), _to_gray(heat))
            # raw head-averaged weights of the first window, rows = queries
            np.savetxt(stem.with_suffix(".csv"), weights[0].mean(axis=0), delimiter=",", fmt="%.8g")
            up = np.kron(heat, np.ones((H // h, W // w)))
            overlay = 0.5 * _to_gray(event_frame) + 0.5 * _to_gray(up)
            write_pgm(out / f"stage{stage + 1}_{kind}_overlay.pgm", overlay)
            written += 1
    model.backbone.set_retain_attention(False)
    print(f"{written} attention maps -> {out}")


def attention_heatmap(weights, kind, size, n, h, w, hp, wp):
    """Head- and query-averaged attention received per pixel -> [N, h, w].

    ``weights``: [B, heads, tokens, tokens] of one sublayer; each window or grid
    group distributes a total of one unit of attention over its pixels.
    """
    received = weights.mean(axis=1).mean(axis=1)  # [B, tokens]
    index = np.arange(n * hp * wp).reshape(n, hp, wp)
    tokens = _np_partition(index, size, kind)
    out = np.zeros(n * hp * wp)
    out[tokens.reshape(-1)] = received.reshape(-1)
    return out.reshape(n, hp, wp)[:, :h, :w]


# -- entry point ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hsvt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert-events", help="convert between CSV and binary event files")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--in-format", choices=("csv", "bin"))
    s.add_argument("--out-format", choices=("csv", "bin"))
    s.set_defaults(func=cmd_convert_events)

    s = sub.add_parser("convert-labels", help="corner text labels <-> binary .lbl records")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--fps", type=float, required=True)
    s.set_defaults(func=cmd_convert_labels)

    s = sub.add_parser("simulate-events", help="convert a frame directory to events")
    s.add_argument("frames")
    s.add_argument("output")
    s.add_argument("--fps", type=float, default=1000.0)
    s.add_argument("--c-pos", type=float, default=0.2)
    s.add_argument("--c-neg", type=float, default=0.2)
    s.add_argument("--log-eps", type=float, default=1e-3)
    s.add_argument("--format", choices=("csv", "bin"))
    s.set_defaults(func=cmd_simulate_events)

    s = sub.add_parser("make-synthetic", help="write a moving-square clip directory")
    s.add_argument("output")
    s.add_argument("--clips", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--num-windows", type=int, default=10)
    s.add_argument("--delta-t-ms", type=float, default=50.0)
    s.set_defaults(func=cmd_make_synthetic)

    def model_opts(s):
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--data", help="clip directory (default: synthetic data from the seed)")
        s.add_argument("--seed", type=int)
        s.add_argument("--preset", choices=sorted(cfgmod.DELTA_T_PRESETS_MS))
        s.add_argument("--delta-t-ms", type=float)
        s.add_argument("--variant", choices=("tiny", "small", "base"))
        s.add_argument("--placement", help="comma-separated temporal module per stage")

    s = sub.add_parser("train", help="train a detector")
    model_opts(s)
    s.add_argument("--val-data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", default="run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mAP of a checkpoint, or of prediction vs label files")
    model_opts(s)
    s.add_argument("--checkpoint")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="FLOPs / SOPs / energy report")
    model_opts(s)
    s.add_argument("--checkpoint")
    s.add_argument("--published", choices=("tiny", "small", "base"),
                   help="report a published backbone row (FLOPs and SOPs injected)")
    s.add_argument("--calibration-clips", type=int, default=4)
    s.add_argument("--jsonl", help="also write line-delimited records here")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("dump-attention", help="Block-SA / Grid-SA heatmaps as PGM + CSV")
    model_opts(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", type=int, default=0)
    s.add_argument("--window", type=int, default=0)
    s.add_argument("--out", default="attention")
    s.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
