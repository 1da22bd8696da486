"""Command-line entry points: ``emf init | encode | infer | fuse | eval | bench | synth``.

Exit codes: 0 success, 1 validation or format error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from emf.config import RunConfig, load_config
from emf.errors import ConfigError, EMFError
from emf.model import FUSED, TRAIN

logger = logging.getLogger("emf")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_VERIFY = 2

REFERENCE_PARAMS_M = 14.9


def _ms_to_us(ms: Optional[float]) -> Optional[int]:
    return None if ms is None else int(round(ms * 1000))


def _write_json(path, obj) -> None:
    from emf.weights import atomic_write_bytes

    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _run_config(args, base: Optional[dict] = None) -> RunConfig:
    """Config file (or a stored config) with command-line overrides applied."""
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif base is not None:
        cfg = RunConfig.from_dict(base)
    else:
        cfg = RunConfig()
    cfg = cfg.with_overrides(
        bins=getattr(args, "bins", None),
        dt=_ms_to_us(getattr(args, "dt_ms", None)),
        spatial_divisor=getattr(args, "divisor", None),
        saturation=getattr(args, "saturation", None),
        score_thr=getattr(args, "score_thr", None),
        iou_thr=getattr(args, "iou_thr", None),
        protocol=getattr(args, "protocol", None),
        seed=getattr(args, "seed", None),
    )
    return cfg.validate()


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


# --------------------------------------------------------------------------
# commands


def cmd_init(args) -> int:
    from dataclasses import replace

    from emf.backbone import init_model
    from emf.weights import save_model

    cfg = _run_config(args)
    if args.width is not None or args.height is not None:
        if args.width is None or args.height is None:
            raise ConfigError("--width and --height must be given together")
        cfg = replace(cfg, sensor=(args.width, args.height)).validate()
    model = init_model(cfg.model, cfg.seed)
    model.meta["run_config"] = cfg.to_dict()
    save_model(model, args.out)
    n = model.num_parameters()
    print(f"wrote {args.out}: {n:,} parameters ({n / 1e6:.2f} M; reference model reports {REFERENCE_PARAMS_M} M)")
    return EXIT_OK


def _read_stream(args):
    from emf.events import read_events

    return read_events(args.events, width=args.width, height=args.height)


def cmd_encode(args) -> int:
    from emf.encoder import encode_window
    from emf.events import window_events
    from emf.weights import save_tensor

    cfg = _run_config(args)
    stream = _read_stream(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    windows = window_events(stream, cfg.encoder.dt)
    if not windows:
        logger.warning("%s contains no events; no tensors written", args.events)
    index = []
    for k, w in enumerate(windows):
        name = f"window_{k:06d}.emft"
        x = encode_window(w, cfg.encoder)
        save_tensor(x, out / name)
        index.append({"file": name, "t0": w.t0, "num_events": len(w.events), "shape": list(x.shape)})
    _write_json(out / "index.json", {
        "source": str(args.events),
        "sensor": {"width": stream.width, "height": stream.height},
        "config": cfg.to_dict(),
        "windows": index,
    })
    print(f"wrote {len(index)} tensors to {out}")
    return EXIT_OK


def _load_for_run(path, want_fused: bool):
    from emf.reparam import fuse_model
    from emf.weights import load_model

    model = load_model(path)
    if want_fused and model.form == TRAIN:
        logger.info("fusing %s on the fly", path)
        model = fuse_model(model)
    elif not want_fused and model.form == FUSED:
        logger.warning("%s holds fused weights; running the fused form", path)
    return model


def cmd_infer(args) -> int:
    from emf.detection import detection_to_dict
    from emf.events import window_events
    from emf.pipeline import StreamingDetector
    from emf.weights import atomic_write_bytes

    model = _load_for_run(args.weights, args.fused)
    cfg = _run_config(args, model.meta.get("run_config"))
    if cfg.model != model.config:
        raise ConfigError("configuration model section does not match the weights")
    stream = _read_stream(args)
    sensor = model.meta.get("run_config", {}).get("sensor")
    if sensor and (sensor["width"], sensor["height"]) != (stream.width, stream.height):
        raise ConfigError(
            f"weights were initialized for a {sensor['width']}x{sensor['height']} sensor, "
            f"events are {stream.width}x{stream.height}"
        )
    score_thr = args.score_thr if args.score_thr is not None else cfg.postprocess.eval_score_thr
    det = StreamingDetector(model, cfg.encoder, score_thr, cfg.postprocess.iou_thr)
    lines, nwin = [], 0
    for _, dets in det.run(window_events(stream, cfg.encoder.dt)):
        nwin += 1
        lines.extend(json.dumps(detection_to_dict(d), sort_keys=True) for d in dets)
    out = Path(args.out)
    atomic_write_bytes(out, "".join(l + "\n" for l in lines).encode("utf-8"))
    effective = cfg.to_dict()
    effective["postprocess"]["score_thr"] = score_thr
    _write_json(_sidecar(out), {"weights": str(args.weights), "form": model.form, "events": str(args.events),
                                "windows": nwin, "detections": len(lines), "config": effective})
    print(f"wrote {len(lines)} detections over {nwin} windows to {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    from emf.reparam import fuse_model, verify_fusion
    from emf.weights import load_model, save_model

    model = load_model(args.weights)
    fused = fuse_model(model)
    if args.verify:
        hw = (args.verify_size, args.verify_size)
        report = verify_fusion(model, fused, n=args.verify_inputs, tol=args.tol,
                               shape=(model.config.input_channels,) + hw, seed=args.seed or 0)
        doc = report.to_dict()
        doc["config"] = model.config.to_dict()
        if args.report:
            _write_json(args.report, doc)
        print(f"max abs deviation {report.global_max:.3e} over {report.inputs_tested} inputs (tol {args.tol:g})")
        if not report.passed:
            logger.error("fusion verification failed at %s", report.first_failing_block)
            return EXIT_VERIFY
    save_model(fused, args.out)
    print(f"wrote fused weights to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from emf.detection import detection_from_dict
    from emf.events import read_labels
    from emf.evaluation import get_protocol, labels_to_gts, map_50_95

    protocol = get_protocol(args.protocol)
    dt = _ms_to_us(args.dt_ms)
    labels = read_labels(args.labels)
    dets = []
    with open(args.dets, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                dets.append(detection_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EMFError(f"{args.dets}: line {lineno}: invalid detection ({exc})") from None
    gts = labels_to_gts(labels, dt, args.label_interval)
    extra = {d.class_id for d in dets} - {g.class_id for g in gts}
    if extra:
        logger.warning("detections use class ids %s absent from labels; evaluating the union", sorted(extra))
    frames = None if args.all_frames else {g.frame for g in gts}
    result = map_50_95(dets, gts, protocol, frames)
    doc = result.to_dict()
    doc["config"] = {"protocol": protocol.name, "dt": dt, "label_interval": args.label_interval,
                     "all_frames": args.all_frames}
    print(result.table())
    if args.out:
        _write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from emf.bench import run_bench

    model = _load_for_run(args.weights, args.fused)
    cfg = _run_config(args, model.meta.get("run_config"))
    report = run_bench(model, args.width, args.height, args.iters, args.warmup, args.seed or 0,
                       args.end_to_end, cfg.encoder, cfg.postprocess.score_thr, cfg.postprocess.iou_thr)
    print(report.summary())
    if args.out:
        doc = report.to_dict()
        doc["config"] = cfg.to_dict()
        _write_json(args.out, doc)
    return EXIT_OK


def cmd_synth(args) -> int:
    from emf.events import write_events, write_labels
    from emf.synthetic import synthetic_sequence

    stream, labels = synthetic_sequence(args.width, args.height, _ms_to_us(args.duration_ms),
                                        num_objects=args.objects, seed=args.seed)
    write_events(stream, args.out)
    if args.labels:
        write_labels(labels, args.labels)
    print(f"wrote {len(stream)} events and {len(labels)} labels")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--bins", type=int, help="time bins per window (default 10)")
    p.add_argument("--dt-ms", type=float, help="window length in ms (default 50)")
    p.add_argument("--divisor", type=int, help="spatial divisor (default 1)")
    p.add_argument("--saturation", type=int, help="count saturation (default 255)")


def _geometry_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, help="sensor width (required for CSV input)")
    p.add_argument("--height", type=int, help="sensor height (required for CSV input)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emf", description="Event-camera detector runtime")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write seeded train-form weights")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _geometry_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("encode", help="encode an event file into EMFT tensors")
    p.add_argument("events")
    p.add_argument("--out", required=True, help="output directory")
    _encoder_flags(p)
    _geometry_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("infer", help="run the detector over an event file")
    p.add_argument("--weights", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True, help="detections JSONL")
    p.add_argument("--fused", action="store_true", help="run the fused form (fuses train weights on the fly)")
    p.add_argument("--score-thr", type=float, help="score threshold (default 0.01, the evaluation setting)")
    p.add_argument("--iou-thr", type=float, help="NMS IoU threshold (default 0.45)")
    _encoder_flags(p)
    _geometry_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="convert train-form weights to fused form")
    p.add_argument("weights")
    p.add_argument("out")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--report", help="write the verification report JSON here")
    p.add_argument("--verify-inputs", type=int, default=10)
    p.add_argument("--verify-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="compute mAP[50:95] of detections against labels")
    p.add_argument("--dets", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--protocol", default="gen1", help="gen1, 1mpx or none")
    p.add_argument("--dt-ms", type=float, default=50.0)
    p.add_argument("--label-interval", default="right-closed", choices=["right-closed", "left-closed"])
    p.add_argument("--all-frames", action="store_true", help="also count detections in unlabeled windows")
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the detector forward pass")
    p.add_argument("--weights", required=True)
    p.add_argument("--width", type=int, default=304)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--fused", action="store_true")
    p.add_argument("--end-to-end", action="store_true", help="include encoding, decoding and NMS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic event stream with labels")
    p.add_argument("--out", required=True)
    p.add_argument("--labels")
    p.add_argument("--duration-ms", type=float, default=1000.0)
    p.add_argument("--width", type=int, default=304)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EMFError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
