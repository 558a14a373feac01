"""Command-line entry point: ``reefdrop <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from ._io import atomic_open, dump_line, iter_jsonl, write_jsonl
from .classify import (
    DelayedBackend,
    MockBackend,
    NativeBackend,
    PredictionsBackend,
    classify_frame,
    classify_patches,
    load_features,
)
from .core import FrameRecord, GridSpec, PatchClass, load_manifest
from .decision import DecisionConfig, FrameDecision, Ratio, Rule, decide_batch
from .errors import AlignmentError, ReefDropError, ValidationError
from .geotrack import bind, export_csv, export_geojson
from .learn import FocalLossConfig, TrainConfig, compute_class_weights, load_model, save_model, train
from .metrics import agreement, confusion, deploy_metrics, pr_sweep, report
from .pseudolabel import (
    AuditLog,
    PromptEmbeddings,
    VlmClient,
    VlmClientConfig,
    label_patches_similarity,
    label_patches_vlm,
)
from .stream import DropPolicy, StreamConfig, VirtualClock, WallClock, run_stream, summarize, summarize_csv
from .tiler import crop_patches, image_size, tile

log = logging.getLogger("reefdrop")


class UsageError(ReefDropError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# argument types
# --------------------------------------------------------------------------


def _unit_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _grid(text):
    try:
        return GridSpec.parse(text)
    except ReefDropError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _dims(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dimensions must look like WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def _alphas(text):
    """``start:stop:step`` (inclusive stop) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            n = int(round((stop - start) / step))
            vals = [round(start + i * step, 12) for i in range(n + 1)]
        else:
            vals = [float(v) for v in text.split(",") if v.strip()]
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad alpha grid {text!r}") from None
    for v in vals:
        _unit_float(str(v))
    return vals


def _hidden(text):
    if text in ("", "none"):
        return []
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"hidden sizes must be comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# shared loaders
# --------------------------------------------------------------------------


def _grids_from(backend: PredictionsBackend, frame_ids, grid):
    return [classify_patches(backend, FrameRecord(fid), grid) for fid in frame_ids]


def _load_decisions(path):
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(FrameDecision.from_json(obj))
        except ReefDropError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def _frame_truths(manifest, frame_ids):
    by_id = manifest.by_id()
    missing = [f for f in frame_ids if f not in by_id or by_id[f].ecologist_label is None]
    if missing:
        raise AlignmentError(f"no ecologist label for frames {missing}")
    return {f: by_id[f].ecologist_label for f in frame_ids}


def _decision_config(args, model=None):
    rule = Rule.parse(args.rule)
    if rule is Rule.AGGREGATION and model is None:
        raise UsageError("spatial_patch_aggregation needs --model")
    return DecisionConfig(rule, args.alpha, model if rule is Rule.AGGREGATION else None, Ratio(args.ratio))


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with atomic_open(path) as f:
            f.write(text)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_tile(args):
    if (args.dims is None) == (args.image is None):
        raise UsageError("give exactly one of --dims or --image")
    w, h = args.dims if args.dims is not None else image_size(args.image)
    lines = ["index,row,col,x,y,w,h"]
    for r in tile(w, h, args.grid):
        row, col = divmod(r.index, args.grid.cols)
        lines.append(f"{r.index},{row},{col},{r.x},{r.y},{r.w},{r.h}")
    _write_text(args.out, "\n".join(lines) + "\n")


def cmd_decide(args):
    backend = PredictionsBackend.load(args.predictions)
    model = load_model(args.model) if args.model else None
    config = _decision_config(args, model)
    manifest = load_manifest(args.manifest, args.grid) if args.manifest else None
    frame_ids = [r.frame_id for r in manifest] if manifest else backend.frame_ids
    records = manifest.by_id() if manifest else {}
    if config.rule is Rule.WHOLE_IMAGE:
        items = [classify_frame(backend, FrameRecord(fid)) for fid in frame_ids]
    else:
        items = _grids_from(backend, frame_ids, args.grid)
    decisions = decide_batch(items, config)
    rows = [d.to_json(records.get(d.frame_id)) for d in decisions]
    if args.out in (None, "-"):
        for row in rows:
            print(dump_line(row))
    else:
        write_jsonl(args.out, rows)


def _load_patch_labels(path, grid):
    """Patch labels keyed by (frame_id, patch_index) from a manifest or a pseudo-label file."""
    first = next(iter_jsonl(path), None)
    if first is None:
        raise ValidationError(f"{path}: no labels")
    if "class" in first[1]:
        out = {}
        for _, obj in iter_jsonl(path):
            out[(str(obj["frame_id"]), int(obj["patch_index"]))] = int(PatchClass(int(obj["class"])))
        return out
    manifest = load_manifest(path, grid)
    return {
        (r.frame_id, i): int(c)
        for r in manifest if r.patch_labels is not None
        for i, c in enumerate(r.patch_labels)
    }


def cmd_train(args):
    import os

    for p in (args.labels, args.features, args.predictions):
        if p is not None and not os.path.exists(p):
            raise UsageError(f"no such file: {p}")
    if args.task == "aggregation":
        if args.predictions is None:
            raise UsageError("aggregation training needs --predictions")
        manifest = load_manifest(args.labels, args.grid)
        backend = PredictionsBackend.load(args.predictions)
        labeled = [r for r in manifest if r.ecologist_label is not None]
        if not labeled:
            raise ValidationError(f"{args.labels}: no ecologist labels")
        grids = _grids_from(backend, [r.frame_id for r in labeled], args.grid)
        x = np.stack([g.probs.reshape(-1) for g in grids])
        y = np.array([int(r.ecologist_label) for r in labeled])
        output, n_out = "sigmoid", 1
    else:
        if args.features is None:
            raise UsageError(f"{args.task} training needs --features")
        feats = load_features(args.features)
        if args.task == "patch":
            labels = _load_patch_labels(args.labels, args.grid)
            keep = [f for f in feats if (f.frame_id, f.patch_index) in labels]
            y = np.array([labels[(f.frame_id, f.patch_index)] for f in keep])
            output, n_out = "softmax", len(PatchClass)
        else:
            by_id = load_manifest(args.labels, args.grid).by_id()
            keep = [f for f in feats if f.patch_index is None and f.frame_id in by_id
                    and by_id[f.frame_id].ecologist_label is not None]
            y = np.array([int(by_id[f.frame_id].ecologist_label) for f in keep])
            output, n_out = "sigmoid", 1
        if not keep:
            raise ValidationError("no feature vectors have labels")
        x = np.stack([f.values for f in keep])
    n_classes = 2 if output == "sigmoid" else n_out
    weights = None
    if args.class_weights:
        weights = tuple(compute_class_weights(np.bincount(y, minlength=n_classes)))
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
        seed=args.seed, oversample=args.oversample, focal=FocalLossConfig(args.gamma, weights),
    )
    dims = [x.shape[1], *args.hidden, n_out]
    result = train(x, y, dims, config, output=output)
    save_model(result.model, args.out)
    trace_path = args.trace or f"{args.out}.loss.csv"
    _write_text(trace_path, "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.loss_trace)))
    pred = result.model.predict_proba(x).argmax(axis=1)
    print(f"trained {dims} on {len(y)} samples; final loss {result.loss_trace[-1]:.6f}; "
          f"training accuracy {100 * float(np.mean(pred == y)):.2f}%")


def cmd_pseudolabel(args):
    if args.mode == "similarity":
        if args.embeddings is None or args.prompts is None:
            raise UsageError("similarity mode needs --embeddings and --prompts")
        labels = label_patches_similarity(load_features(args.embeddings), PromptEmbeddings.load(args.prompts))
        rejects = []
    else:
        config = VlmClientConfig(
            endpoint=args.endpoint, model=args.vlm_model, credential_env=args.credential_env,
            max_in_flight=args.max_in_flight, retries=args.retries, backoff_ms=args.backoff_ms,
            confidence_floor=args.confidence_floor,
        )
        patches = _vlm_patches(args)
        audit = AuditLog(args.audit) if args.audit else None
        client = VlmClient(config, audit)
        try:
            result = label_patches_vlm(client, patches, config)
        finally:
            client.close()
            if audit is not None:
                audit.close()
        labels, rejects = result.labels, result.rejects
    write_jsonl(args.out, [l.to_json() for l in labels])
    rejects_path = args.rejects or f"{args.out}.rejects.jsonl"
    write_jsonl(rejects_path, [r.to_json() for r in rejects])
    print(f"{len(labels)} labels, {len(rejects)} rejects")


def _vlm_patches(args):
    if (args.patches is None) == (args.manifest is None):
        raise UsageError("vlm mode needs exactly one of --patches or --manifest")
    if args.patches is not None:
        out = []
        for _, obj in iter_jsonl(args.patches):
            with open(obj["path"], "rb") as f:
                out.append((str(obj["frame_id"]), int(obj["patch_index"]), f.read()))
        return out
    out = []
    for rec in load_manifest(args.manifest, args.grid):
        for i, data in enumerate(crop_patches(rec.source, args.grid)):
            out.append((rec.frame_id, i, data))
    return out


def cmd_eval(args):
    manifest = load_manifest(args.labels, args.grid)
    if args.level == "patch":
        if args.predictions is None:
            raise UsageError("patch-level eval needs --predictions")
        backend = PredictionsBackend.load(args.predictions)
        labeled = [r for r in manifest if r.patch_labels is not None]
        extra = sorted(set(backend.frame_ids) - {r.frame_id for r in labeled})
        if extra:
            raise AlignmentError(f"predictions for frames without patch labels: {extra}")
        grids = _grids_from(backend, [r.frame_id for r in labeled], args.grid)
        preds = np.concatenate([g.predicted for g in grids])
        truths = np.concatenate([np.asarray(r.patch_labels, dtype=np.int64) for r in labeled])
        rep = report(confusion(preds, truths, len(PatchClass)))
        text = rep.to_text() + "\n"
    else:
        if args.decisions is None:
            raise UsageError("frame-level eval needs --decisions")
        decisions = _load_decisions(args.decisions)
        truths = _frame_truths(manifest, [d.frame_id for d in decisions])
        m = deploy_metrics(decisions, truths)
        rep = agreement(decisions, truths).report
        text = (
            f"deploy precision  {m.deploy_precision:.2f}\n"
            f"deploy recall     {m.deploy_recall:.2f}\n"
            f"accuracy          {m.accuracy:.2f}\n"
            f"overall F1        {m.f1:.2f}\n\n" + rep.to_text() + "\n"
        )
    _write_text(args.out, text)
    if args.csv:
        _write_text(args.csv, rep.to_csv())


def cmd_sweep(args):
    backend = PredictionsBackend.load(args.predictions)
    manifest = load_manifest(args.labels, args.grid)
    labeled = [r for r in manifest if r.ecologist_label is not None]
    grids = _grids_from(backend, [r.frame_id for r in labeled], args.grid)
    model = load_model(args.model) if args.model else None
    if Rule.parse(args.rule) is Rule.AGGREGATION and model is None:
        raise UsageError("spatial_patch_aggregation needs --model")
    curve = pr_sweep(grids, [r.ecologist_label for r in labeled], args.rule, args.alphas, model, Ratio(args.ratio))
    _write_text(args.out, curve.to_csv())


def cmd_map(args):
    manifest = load_manifest(args.manifest, args.grid)
    track = bind(_load_decisions(args.decisions), manifest)
    export_geojson(track, args.out, args.decimals)
    if args.csv:
        export_csv(track, args.csv)
    agree = [e.agree for e in track if e.agree is not None]
    summary = f"{len(track)} points"
    if agree:
        summary += f"; ecologist agreement {100 * sum(agree) / len(agree):.2f}% over {len(agree)} frames"
    print(summary)


def cmd_simulate(args):
    manifest = load_manifest(args.manifest, args.grid)
    if args.backend == "mock":
        backend = MockBackend(args.seed)
    elif args.backend == "predictions":
        if args.predictions is None:
            raise UsageError("predictions backend needs --predictions")
        backend = PredictionsBackend.load(args.predictions)
    else:
        if args.features is None or args.patch_model is None:
            raise UsageError("native backend needs --features and --patch-model")
        backend = NativeBackend(load_features(args.features), patch_model=load_model(args.patch_model))
    clock = VirtualClock() if args.deterministic else WallClock()
    if args.delay_ms:
        backend = DelayedBackend(backend, args.delay_ms / 1000.0, clock)
    model = load_model(args.model) if args.model else None
    config = _decision_config(args, model)
    stream_cfg = StreamConfig(
        capture_fps=args.fps, drop_policy=DropPolicy(args.drop_policy), queue_capacity=args.queue_capacity,
        max_frames=args.max_frames, duration_s=args.duration, use_timestamps=args.use_timestamps, grid=args.grid,
    )
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            _, stats = run_stream(manifest.records, backend, config, stream_cfg, clock, log_file=f)
    else:
        _, stats = run_stream(manifest.records, backend, config, stream_cfg, clock)
    print(summarize(stats, deterministic=args.deterministic))
    if args.timing_csv:
        _write_text(args.timing_csv, summarize_csv(stats))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_decision_args(p, with_alpha=True):
    p.add_argument("--rule", default="thresholding_with_patches",
                   choices=[r.value for r in Rule] + ["threshold", "aggregation", "whole"])
    if with_alpha:
        p.add_argument("--alpha", type=_unit_float, default=0.4)
    p.add_argument("--ratio", choices=[r.value for r in Ratio], default=Ratio.VS_REST.value,
                   help="thresholding score: deploy/(no_deploy+coral) or deploy/all")
    p.add_argument("--model", help="aggregation network checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reefdrop", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="suppress wall-clock output; simulate on a virtual clock")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--grid", type=_grid, default=GridSpec())
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("tile", parents=[common], help="list patch rectangles")
    p.add_argument("--dims", type=_dims, help="WIDTHxHEIGHT")
    p.add_argument("--image")
    p.add_argument("--out")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("decide", parents=[common], help="per-frame decisions from a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", help="order frames and attach positions")
    _add_decision_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("train", parents=[common], help="train a native head or aggregation network")
    p.add_argument("--task", choices=["patch", "frame", "aggregation"], default="patch")
    p.add_argument("--features")
    p.add_argument("--predictions")
    p.add_argument("--labels", required=True, help="manifest, or pseudo-label file for --task patch")
    p.add_argument("--hidden", type=_hidden, default=[], help="comma-separated hidden sizes")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--no-oversample", dest="oversample", action="store_false")
    p.add_argument("--no-class-weights", dest="class_weights", action="store_false")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace CSV (default OUT.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudolabel", parents=[common], help="label patches without annotators")
    p.add_argument("--mode", choices=["vlm", "similarity"], required=True)
    p.add_argument("--embeddings")
    p.add_argument("--prompts")
    p.add_argument("--patches", help="JSONL of {frame_id, patch_index, path}")
    p.add_argument("--manifest", help="tile and crop every frame image in this manifest")
    p.add_argument("--endpoint", default=VlmClientConfig.endpoint)
    p.add_argument("--vlm-model", default=VlmClientConfig.model)
    p.add_argument("--credential-env", default=VlmClientConfig.credential_env)
    p.add_argument("--max-in-flight", type=int, default=VlmClientConfig.max_in_flight)
    p.add_argument("--retries", type=int, default=VlmClientConfig.retries)
    p.add_argument("--backoff-ms", type=int, default=VlmClientConfig.backoff_ms)
    p.add_argument("--confidence-floor", type=_unit_float, default=VlmClientConfig.confidence_floor)
    p.add_argument("--audit", help="append request/response bodies to this JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--rejects")
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("eval", parents=[common], help="patch or frame metrics")
    p.add_argument("--level", choices=["patch", "frame"], required=True)
    p.add_argument("--predictions")
    p.add_argument("--decisions")
    p.add_argument("--labels", required=True, help="manifest with ground truth")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="precision-recall sweep over alpha")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    _add_decision_args(p, with_alpha=False)
    p.add_argument("--alphas", type=_alphas, default=_alphas("0:1:0.05"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("map", parents=[common], help="GeoJSON map of decisions")
    p.add_argument("--decisions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--decimals", type=int, help="round coordinates (default: full precision)")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("simulate", parents=[common], help="replay a manifest through the real-time pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", choices=["mock", "predictions", "native"], default="mock")
    p.add_argument("--predictions")
    p.add_argument("--features")
    p.add_argument("--patch-model")
    _add_decision_args(p)
    p.add_argument("--fps", type=float, default=5.5, help="capture rate")
    p.add_argument("--drop-policy", choices=[d.value for d in DropPolicy], default=DropPolicy.LATEST_WINS.value)
    p.add_argument("--queue-capacity", type=int, default=8)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--use-timestamps", action="store_true")
    p.add_argument("--delay-ms", type=float, default=0.0, help="artificial backend latency")
    p.add_argument("--log", help="decision log JSONL, flushed per frame")
    p.add_argument("--timing-csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser, argv):
    """Re-parse with config-file values as defaults: flags > config file > built-ins."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a flat JSON object")
    sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[args.command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = actions[dest]
        if action.type is not None and isinstance(value, str):
            try:
                value = action.type(value)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        effective = {k: (str(v) if isinstance(v, GridSpec) else v)
                     for k, v in vars(args).items() if k != "func"}
        log.info("effective config %s", json.dumps(effective, default=str, sort_keys=True))
        args.func(args)
    except ReefDropError as exc:
        print(f"reefdrop: error[{exc.code}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"reefdrop: error[io]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
