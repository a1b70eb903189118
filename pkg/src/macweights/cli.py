"""Command-line entry point: trace / detect / attack / eval / train / plot.

Exit codes: 0 success, 2 usage (argparse), 3 bad input or checkpoint,
4 numeric fault, 1 anything else. All file outputs are written atomically
(temp file + rename); the results ledger is an append-only CSV guarded by an
advisory file lock.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import evaluation, macdrop, plotting, probe, trace as trace_mod
from .checkpoint import load_checkpoint, load_token_stream, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    DetectionError,
    InputError,
    MacweightsError,
    NumericFaultError,
)

DEFAULT_CHECKPOINT_DIR_ENV = "MACWEIGHTS_CHECKPOINT_DIR"

LEDGER_COLUMNS = ("timestamp", "config_hash", "command", "spec", "metric_kind", "value")


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def append_ledger(path, config_hash: str, command: str, spec: str, metric_kind: str, value):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            writer = csv.writer(fh)
            if fh.tell() == 0:
                writer.writerow(LEDGER_COLUMNS)
            writer.writerow([f"{time.time():.3f}", config_hash, command, spec, metric_kind, value])
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _resolve_checkpoint(arg: str | None) -> str:
    if arg:
        return arg
    env = os.environ.get(DEFAULT_CHECKPOINT_DIR_ENV)
    if env:
        return env
    raise InputError(
        f"--checkpoint not given and {DEFAULT_CHECKPOINT_DIR_ENV} is not set"
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_trace(args) -> int:
    config, params = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    tr = trace_mod.trace_forward(config, params, [config.bos_token_id], position=0)
    rows = trace_mod.profile_rows(trace_mod.magnitude_profile(tr))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["layer", "state_kind", "top1", "top2", "top3", "median"])
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    if args.out_csv:
        atomic_write_text(args.out_csv, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if args.out_svg:
        atomic_write_text(args.out_svg, plotting.render_svg(rows, "magnitude_by_layer"))
    return 0


def cmd_detect(args) -> int:
    config, params = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    report = probe.find_massive_weights(config, params, args.k, rule=args.rule)
    payload = report.to_dict()
    if args.rule == "argmax":
        alt_layer, _ = probe.find_massive_layer(config, params, rule="earliest_jump")
        if alt_layer != report.layer:
            payload["earliest_jump_layer"] = alt_layer
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_attack(args) -> int:
    src = _resolve_checkpoint(args.checkpoint)
    config, params = load_checkpoint(src)
    k_values = args.k_list if args.k_list else [args.k]
    if args.in_place:
        if args.out or args.k_list:
            raise InputError("--in-place overwrites the source checkpoint; it takes no --out or --k-list")
        out_template = src
    elif not args.out:
        raise InputError("either --out or --in-place is required")
    else:
        out_template = args.out
    if args.k_list and "{k}" not in out_template:
        raise InputError("--k-list requires an --out template containing {k}")
    for k in k_values:
        if k == 0 and args.kind == "zeroing":
            attacked = params.copy()
        else:
            report = probe.find_massive_weights(config, params, max(k, 1), rule=args.rule)
            report.k = k
            report.indices = report.indices[:k]
            report.magnitudes = report.magnitudes[:k]
            spec = attack_mod.spec_from_report(report, args.kind)
            attacked = attack_mod.apply_attack(params, spec)
        out = str(out_template).replace("{k}", str(k))
        save_checkpoint(out, config, attacked, family=args.family)
        print(f"wrote {out} ({args.kind}, k={k})")
    return 0


def cmd_eval(args) -> int:
    config, params = load_checkpoint(_resolve_checkpoint(args.checkpoint))
    if args.metric == "perplexity":
        if not args.stream:
            raise InputError("--metric perplexity requires --stream")
        stream = load_token_stream(args.stream, config.vocab_size)
        report = evaluation.perplexity(
            config, params, stream, window=args.window, stride=args.stride,
            dataset=Path(args.stream).name,
        )
    else:
        if not args.items:
            raise InputError("--metric mc_accuracy requires --items")
        items = []
        for line in Path(args.items).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            items.append(
                evaluation.McItem(context=rec["context"], options=rec["options"], gold=rec["gold"])
            )
        report = evaluation.mc_accuracy(
            config, params, items, normalization=args.normalization,
            dataset=Path(args.items).name,
        )
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.ledger:
        append_ledger(
            args.ledger, config.config_hash(), "eval", args.attack_spec or "",
            report.metric_kind, f"{report.value:.9g}",
        )
    return 0


def cmd_train(args) -> int:
    src = _resolve_checkpoint(args.checkpoint)
    config, params = load_checkpoint(src)
    train_stream = load_token_stream(args.train_stream, config.vocab_size)
    val_stream = load_token_stream(args.val_stream, config.vocab_size)
    tc = macdrop.TrainConfig(
        lr=args.lr, epochs=args.epochs, seed=args.seed, k=args.k, p0=args.p0,
        schedule_kind=args.schedule.replace("-", "_"), alpha=args.alpha,
        batch_size=args.batch_size, chunk_len=args.chunk_len,
        lora_rank=args.lora_rank, lora_alpha=args.lora_alpha,
    )
    adapters, metrics = macdrop.finetune(
        config, params, train_stream, val_stream, tc, use_macdrop=not args.no_macdrop
    )
    if args.log:
        lines = [json.dumps(s, sort_keys=True) for s in metrics["steps"]]
        atomic_write_text(args.log, "\n".join(lines) + "\n")
    if args.out_adapters:
        tensors = {}
        for name, ad in adapters.items():
            tensors[f"{name}.lora_a"] = ad.a
            tensors[f"{name}.lora_b"] = ad.b
        from .checkpoint import weight_file_bytes

        Path(args.out_adapters).parent.mkdir(parents=True, exist_ok=True)
        tmp = args.out_adapters + ".tmp"
        Path(tmp).write_bytes(weight_file_bytes(tensors))
        os.replace(tmp, args.out_adapters)
    if args.merge:
        merged = macdrop.merge_adapters(params, adapters)
        save_checkpoint(args.merge, config, merged)
    print(
        json.dumps(
            {"initial_val": metrics["initial_val"], "final_val": metrics["final_val"]},
            sort_keys=True,
        )
    )
    return 0


def cmd_plot(args) -> int:
    rows = list(csv.DictReader(Path(args.source).read_text().splitlines()))
    svg = plotting.render_svg(rows, args.kind)  # raises before any file is written
    atomic_write_text(args.out, svg)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="macweights", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("trace", help="magnitude profile of the bos-token states")
    tr.add_argument("--checkpoint")
    tr.add_argument("--out-csv")
    tr.add_argument("--out-svg")
    tr.set_defaults(fn=cmd_trace)

    det = sub.add_parser("detect", help="report massive layer + top-k weight rows")
    det.add_argument("--checkpoint")
    det.add_argument("--k", type=int, default=5)
    det.add_argument("--rule", choices=probe.LAYER_RULES, default="argmax")
    det.add_argument("--out")
    det.set_defaults(fn=cmd_detect)

    at = sub.add_parser("attack", help="write a zeroed/retained checkpoint")
    at.add_argument("--checkpoint")
    at.add_argument("--kind", choices=attack_mod.ATTACK_KINDS, required=True)
    at.add_argument("--k", type=int, default=5)
    at.add_argument("--k-list", type=int, nargs="+")
    at.add_argument("--rule", choices=probe.LAYER_RULES, default="argmax")
    at.add_argument("--family", default="toy")
    at.add_argument("--in-place", action="store_true")
    at.add_argument("--out")
    at.set_defaults(fn=cmd_attack)

    ev = sub.add_parser("eval", help="perplexity or multiple-choice accuracy")
    ev.add_argument("--checkpoint")
    ev.add_argument("--metric", choices=("perplexity", "mc_accuracy"), required=True)
    ev.add_argument("--stream")
    ev.add_argument("--items")
    ev.add_argument("--window", type=int, default=1024)
    ev.add_argument("--stride", type=int, default=512)
    ev.add_argument("--normalization", choices=("sum", "per_token"), default="sum")
    ev.add_argument("--out")
    ev.add_argument("--ledger")
    ev.add_argument("--attack-spec", help="free-form tag recorded in the ledger")
    ev.set_defaults(fn=cmd_eval)

    trn = sub.add_parser("train", help="LoRA fine-tune with optional MacDrop")
    trn.add_argument("--checkpoint")
    trn.add_argument("--train-stream", required=True)
    trn.add_argument("--val-stream", required=True)
    trn.add_argument("--schedule", choices=("step", "epoch-before", "epoch-after", "exp"), default="step")
    trn.add_argument("--p0", type=float, default=0.8)
    trn.add_argument("--alpha", type=float, default=0.01)
    trn.add_argument("--k", type=int, default=5)
    trn.add_argument("--epochs", type=int, default=3)
    trn.add_argument("--lr", type=float, default=1e-4)
    trn.add_argument("--seed", type=int, default=0)
    trn.add_argument("--batch-size", type=int, default=4)
    trn.add_argument("--chunk-len", type=int, default=256)
    trn.add_argument("--lora-rank", type=int, default=16)
    trn.add_argument("--lora-alpha", type=float, default=16.0)
    trn.add_argument("--no-macdrop", action="store_true")
    trn.add_argument("--out-adapters")
    trn.add_argument("--merge", help="write a merged checkpoint to this directory")
    trn.add_argument("--log", help="JSON-lines metrics log path")
    trn.set_defaults(fn=cmd_train)

    pl = sub.add_parser("plot", help="render a CSV as a deterministic SVG")
    pl.add_argument("--from", dest="source", required=True)
    pl.add_argument("--kind", choices=plotting.PLOT_KINDS, required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericFaultError as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return 4
    except (InputError, CheckpointError, DetectionError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except MacweightsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
