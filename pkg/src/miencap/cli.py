"""Command-line interface: training, pair building, replay, serving, and
evaluation.

Every subcommand exits 0 on success and nonzero with a one-line JSON error
record on stderr otherwise (unknown flags and missing files exit 2).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .errors import FormatError, MienCapError, ValidationError
from .neural import Dataset, TrainConfig, create_network, load_model, save_model, sgd_train
from .retarget import (
    PipelineManifest,
    build_pipeline,
    calibrate,
    load_manifest,
    save_profile,
)
from .retrieval import build_pair_database, load_database, save_pairs
from .rig import compose_blendshapes, export_mesh, load_bank, load_rig
from .service import (
    RetargetService,
    ServiceConfig,
    configure_logging,
    feed_frames,
    replay_through_pipeline,
)
from .wire import encode_broadcast, load_output_stream, load_stream, save_output_stream


def _echo(cmd: str, **cfg) -> None:
    print(json.dumps({"cmd": cmd, **cfg}))


def _error_line(e: BaseException) -> None:
    print(json.dumps({"error": str(e), "kind": type(e).__name__}), file=sys.stderr)


def _hostport(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from e


def _hidden_sizes(text: str) -> list:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad hidden sizes {text!r}") from e
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("hidden sizes must be positive integers")
    return sizes


def _controller_frames(path):
    from .rig import ControllerFrame

    return [ControllerFrame(r.t, r.values()) for r in load_output_stream(path)]


def _train(inputs, targets, hidden, args, out_path, report_dir, cmd,
           metadata=None) -> None:
    import time

    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                         epochs=args.epochs, seed=args.seed)
    _echo(cmd, lr=config.learning_rate, batch=config.batch_size,
          epochs=config.epochs, seed=config.seed, hidden=hidden,
          samples=len(inputs))
    sizes = [inputs.shape[1], *hidden, targets.shape[1]]
    model = create_network(sizes, seed=args.seed, metadata=metadata)
    wall_ms, start = [], time.monotonic()
    trained, losses = sgd_train(
        model, Dataset(inputs, targets), config, loss_kind="mse",
        hook=lambda e, l: wall_ms.append((time.monotonic() - start) * 1e3))
    save_model(trained, out_path)
    result = {"model": str(out_path), "final_loss": losses[-1]}
    if report_dir:
        result.update(report_mod.training_report(losses, report_dir, wall_ms=wall_ms))
    print(json.dumps(result))


def cmd_train_adaption(args) -> int:
    from .retarget import build_training_tuples, load_profile, apply_calibration

    frames = load_stream(args.input)
    truth = _controller_frames(args.truth)
    if args.calibration:
        profile = load_profile(args.calibration)
        frames = [apply_calibration(f, profile) for f in frames]
    tuples = build_training_tuples(frames, truth)
    inputs = np.stack([t.input for t in tuples])
    targets = np.stack([t.target for t in tuples])
    from .retarget import INPUT_LAYOUT

    _train(inputs, targets, args.hidden, args, args.out, args.report_dir,
           "train-adaption", metadata={"input_layout": INPUT_LAYOUT})
    return 0


def cmd_train_secondary(args) -> int:
    primary = _controller_frames(args.input)
    secondary = _controller_frames(args.truth)
    if len(primary) != len(secondary):
        raise ValidationError(
            f"misaligned streams: {len(primary)} vs {len(secondary)} frames")
    inputs = np.stack([f.values for f in primary])
    targets = np.stack([f.values for f in secondary])
    _train(inputs, targets, args.hidden, args, args.out, args.report_dir,
           "train-secondary")
    return 0


def cmd_build_pairs(args) -> int:
    source = load_database(args.source)
    target = load_database(args.target)
    pairs = build_pair_database(source, target, k=args.k)
    save_pairs(pairs, args.out)
    print(json.dumps({"pairs": len(pairs), "out": str(args.out)}))
    return 0


def cmd_replay(args) -> int:
    frames = load_stream(args.input)
    if args.manifest is None:
        if args.feed is None:
            raise ValidationError("replay needs --manifest (pipeline mode) or --feed (raw mode)")
        host, port = args.feed
        n = feed_frames(frames, host, port, args.fps)
        print(json.dumps({"fed": n}))
        return 0
    manifest = load_manifest(args.manifest)
    pipeline = build_pipeline(manifest, base_dir=Path(args.manifest).parent)
    records = []
    if args.connect is not None:
        import socket

        host, port = args.connect
        with socket.create_connection((host, port)) as s:
            n = replay_through_pipeline(
                frames, pipeline, args.fps,
                lambda r: s.sendall(encode_broadcast(r).encode() + b"\n"),
                character=args.char)
    else:
        if args.out is None:
            raise ValidationError("replay needs --out or --connect for its sink")
        n = replay_through_pipeline(frames, pipeline, args.fps, records.append,
                                    character=args.char)
        save_output_stream(records, args.out)
    print(json.dumps({"frames": n, "out": args.out or f"{args.connect}"}))
    return 0


def cmd_serve(args) -> int:
    manifest = load_manifest(args.manifest)
    pipeline = build_pipeline(manifest, base_dir=Path(args.manifest).parent)
    config = ServiceConfig(
        ingest_host=args.listen[0], ingest_port=args.listen[1],
        control_host=args.control_listen[0], control_port=args.control_listen[1],
        metrics_interval=args.metrics_interval, static_dir=args.static_dir,
    )
    svc = RetargetService(pipeline, config)
    svc.start()
    print(json.dumps({"ingest": list(svc.ingest_addr),
                      "control": list(svc.control_addr),
                      "characters": pipeline.character_ids}), flush=True)
    svc.run_forever()
    return 0


def cmd_eval(args) -> int:
    pred = _controller_frames(args.pred)
    truth = _controller_frames(args.truth)
    if args.report_dir:
        summary = report_mod.eval_report(pred, truth, args.report_dir)
    else:
        summary = report_mod.evaluate_streams(pred, truth)
    out = {k: v for k, v in summary.items() if k != "rmse_per_dim"}
    print(json.dumps(out))
    return 0


def cmd_compose(args) -> int:
    bank = load_bank(args.bank)
    weights = np.array([float(x) for x in args.weights.split(",")])
    mesh = compose_blendshapes(bank, weights)
    export_mesh(mesh, args.out)
    print(json.dumps({"vertices": mesh.vertex_count, "out": str(args.out)}))
    return 0


def cmd_calibrate(args) -> int:
    frames = load_stream(args.input)
    if args.frames > 0:
        frames = frames[: args.frames]
    profile = calibrate(frames)
    save_profile(profile, args.out)
    print(json.dumps({"samples": profile.sample_count, "out": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="miencap",
        description="Real-time facial-expression retargeting toolkit.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def train_flags(sp, default_hidden):
        sp.add_argument("--out", required=True, help="output model file")
        sp.add_argument("--hidden", type=_hidden_sizes, default=default_hidden,
                        help="comma-separated hidden layer sizes")
        sp.add_argument("--lr", type=float, default=0.01)
        sp.add_argument("--batch", type=int, default=10)
        sp.add_argument("--epochs", type=int, default=100)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--report-dir", default=None,
                        help="write loss curve CSV and figure here")

    sp = sub.add_parser("train-adaption", help="train the primary adaption network")
    sp.add_argument("--input", required=True, help="blendshape stream (NDJSON)")
    sp.add_argument("--truth", required=True, help="ground-truth controllers (NDJSON)")
    sp.add_argument("--calibration", default=None, help="calibration profile to apply")
    train_flags(sp, [256, 256])
    sp.set_defaults(func=cmd_train_adaption)

    sp = sub.add_parser("train-secondary", help="train a secondary character map")
    sp.add_argument("--input", required=True, help="primary controller stream (NDJSON)")
    sp.add_argument("--truth", required=True, help="secondary controller stream (NDJSON)")
    train_flags(sp, [128, 128])
    sp.set_defaults(func=cmd_train_secondary)

    sp = sub.add_parser("build-pairs", help="match source records to a target database")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--k", type=int, default=30, help="emotional shortlist size")
    sp.add_argument("--out", required=True, help="output pair CSV")
    sp.set_defaults(func=cmd_build_pairs)

    sp = sub.add_parser("replay", help="replay a recorded stream")
    sp.add_argument("--input", required=True, help="blendshape stream (NDJSON)")
    sp.add_argument("--manifest", default=None, help="pipeline manifest (pipeline mode)")
    sp.add_argument("--fps", type=float, default=24.0,
                    help="pacing rate; 0 = as fast as possible")
    sp.add_argument("--out", default=None, help="output stream file")
    sp.add_argument("--connect", type=_hostport, default=None,
                    help="send output records to HOST:PORT")
    sp.add_argument("--feed", type=_hostport, default=None,
                    help="send raw frames to a service ingest HOST:PORT")
    sp.add_argument("--char", default=None, help="character to emit (default primary)")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("serve", help="run the live retargeting service")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--listen", type=_hostport, default=("127.0.0.1", 9470),
                    help="frame ingestion HOST:PORT")
    sp.add_argument("--control-listen", type=_hostport, default=("127.0.0.1", 9471),
                    help="control/broadcast HOST:PORT")
    sp.add_argument("--metrics-interval", type=float, default=1.0)
    sp.add_argument("--static-dir", default=None,
                    help="serve this directory over HTTP on the control port")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("eval", help="compare an output stream against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--report-dir", default=None,
                    help="write RMSE CSV and figures here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compose", help="compose a weighted blendshape mesh")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--weights", required=True, help="comma-separated weights")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compose)

    sp = sub.add_parser("calibrate", help="build a calibration profile from a stream")
    sp.add_argument("--input", required=True, help="neutral-pose stream (NDJSON)")
    sp.add_argument("--frames", type=int, default=30,
                    help="frames to use from the head of the stream; 0 = all")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_calibrate)

    return p


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        _error_line(e)
        return 2
    except (MienCapError, ValueError) as e:
        _error_line(e)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
