"""Command-line surface: train, sample, inspect, and verify.

Every subcommand prints human-readable text; passing --json-logs adds one
machine-readable JSON line per event on stdout so runs can be scraped
without parsing prose.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .datapipe import export_image, inference_position_map, write_png
from .errors import (
    CrossUError,
    IntegrityError,
    InvalidConfigError,
    InvalidGuidanceError,
    InvalidRateError,
    ShapeError,
    TrainingDivergenceError,
)
from .flow import SamplerConfig, draw_initial_noise, euler_sample
from .geometry import CameraTransform
from .model import CrossUTransformer, PRESETS, derived_counts
from .routing import GuidanceSpec
from .tensorio import load_tensors
from .training import CHECKPOINT_SUFFIX, load_checkpoint, train
from .verify import run_checks

_SELF_CHECK = {"small": (16, 20), "base": (20, 24), "large": (20, 24)}


class Reporter:
    """Human lines always; JSON lines alongside when enabled."""

    def __init__(self, json_logs: bool):
        self.json_logs = json_logs

    def say(self, message: str, /, **fields):
        print(message)
        if self.json_logs and fields:
            print(json.dumps(fields, sort_keys=True))

    def error(self, message: str, **fields):
        print(f"error: {message}", file=sys.stderr)
        if self.json_logs:
            print(json.dumps({"event": "error", "message": message, **fields},
                             sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossu",
        description="Text-to-image flow matching with a cross-attention U transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training config to completion")
    p_train.add_argument("--config", required=True, help="TOML or JSON run config")
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_train.add_argument("--json-logs", action="store_true")

    p_sample = sub.add_parser("sample", help="generate a PNG from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--prompt", required=True)
    p_sample.add_argument("--height", type=int, default=32)
    p_sample.add_argument("--width", type=int, default=32)
    p_sample.add_argument("--steps", type=int, default=50)
    p_sample.add_argument("--guidance", type=float, default=1.0)
    p_sample.add_argument("--cr", type=float, default=0.0,
                          help="conditional-pass token bypass rate")
    p_sample.add_argument("--ur", type=float, default=0.0,
                          help="unconditional-pass token bypass rate")
    p_sample.add_argument("--shift-x", type=float, default=0.0)
    p_sample.add_argument("--shift-y", type=float, default=0.0)
    p_sample.add_argument("--zoom", type=float, default=1.0)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", default="sample.png")
    p_sample.add_argument("--json-logs", action="store_true")

    p_inspect = sub.add_parser("inspect", help="report config or checkpoint arithmetic")
    p_inspect.add_argument("target", help="run config, checkpoint, or preset name")
    p_inspect.add_argument("--json-logs", action="store_true")

    p_verify = sub.add_parser("verify", help="run the fast invariant suite")
    p_verify.add_argument("--inject-fault", default=None, metavar="CHECK",
                          help="deliberately corrupt one named check")
    p_verify.add_argument("--json-logs", action="store_true")
    return parser


def cmd_train(args, out: Reporter) -> int:
    config = load_config(args.config)

    def emit(metrics):
        if metrics.step % config.schedule.log_every == 0:
            out.say(
                f"step {metrics.step:>6d}  loss {metrics.loss:.4f}  "
                f"{metrics.tokens_per_sec:,.0f} tok/s  "
                f"kept {metrics.kept_tokens}",
                event="step",
                step=metrics.step,
                loss=metrics.loss,
                step_time=metrics.step_time,
                tokens_per_sec=metrics.tokens_per_sec,
                kept_tokens=metrics.kept_tokens,
            )

    try:
        final = train(config, resume=args.resume, on_metrics=emit)
    except TrainingDivergenceError as exc:
        out.error(f"training diverged: {exc}", event="divergence")
        return 1
    out.say(f"done: {final}", event="done", checkpoint=str(final))
    return 0


def cmd_sample(args, out: Reporter) -> int:
    state = load_checkpoint(args.checkpoint)
    model = state.model.eval()
    patch = model.cfg.patch_size
    if args.height <= 0 or args.width <= 0 or args.height % patch or args.width % patch:
        raise InvalidConfigError(
            f"height and width must be positive multiples of patch={patch}, "
            f"got {args.height}x{args.width}"
        )
    guidance = GuidanceSpec(
        scale=args.guidance, cond_rate=args.cr, uncond_rate=args.ur,
        rate_seed=args.seed,
    )
    sampler = SamplerConfig(steps=args.steps, guidance=guidance, seed=args.seed)
    cam = CameraTransform(shift_x=args.shift_x, shift_y=args.shift_y, zoom=args.zoom)
    pos = inference_position_map(args.height, args.width, patch, cam)

    emb, mask = state.text_encoder.encode_prompt(state.tokenizer, args.prompt)
    null = state.text_encoder.null_condition()
    shape = (1, model.cfg.in_channels, args.height, args.width)
    x_init = draw_initial_noise(shape, sampler.seed)
    noise_hash = hashlib.sha256(x_init.numpy().tobytes()).hexdigest()
    out.say(f"initial noise sha256 {noise_hash}",
            event="noise", sha256=noise_hash, seed=args.seed)

    started = time.perf_counter()
    image = euler_sample(model, emb, pos, sampler, null,
                         x_init=x_init, cond_mask=mask)
    write_png(args.out, image[0].numpy())
    out.say(
        f"wrote {args.out} ({args.width}x{args.height}, {args.steps} steps, "
        f"{time.perf_counter() - started:.1f}s)",
        event="sample", path=str(args.out), steps=args.steps,
        guidance=args.guidance, prompt=args.prompt,
    )
    return 0


def _param_totals(cfg) -> dict:
    # meta tensors carry shape without memory, so counting is free
    with torch.device("meta"):
        model = CrossUTransformer(cfg)
    totals: dict = {}
    for name, p in model.named_parameters():
        totals[name.split(".")[0]] = totals.get(name.split(".")[0], 0) + p.numel()
    totals["total"] = sum(totals.values())
    return totals


def _inspect_config(cfg, out: Reporter, source: str):
    counts = derived_counts(cfg)
    totals = _param_totals(cfg)
    out.say(
        f"{source}: blocks={counts.total_blocks} attn={counts.total_attention_layers} "
        f"seq_len@256={counts.seq_len_at_256} "
        f"(pixel-space {counts.seq_len_pixels_at_256})",
        event="derived_counts", source=source,
        total_blocks=counts.total_blocks,
        total_attention_layers=counts.total_attention_layers,
        seq_len_at_256=counts.seq_len_at_256,
        seq_len_pixels_at_256=counts.seq_len_pixels_at_256,
    )
    for name, n in totals.items():
        out.say(f"  {name:12s} {n:>12,d}", event="params", module=name, count=n)


def cmd_inspect(args, out: Reporter) -> int:
    target = args.target
    if target in PRESETS:
        _inspect_config(PRESETS[target], out, target)
    elif target.endswith(CHECKPOINT_SUFFIX):
        tensors, meta = load_tensors(target)
        if "config" not in meta:
            raise IntegrityError(f"{target}: checkpoint carries no config echo")
        config = RunConfig.from_dict(meta["config"])
        out.say(f"checkpoint at step {meta.get('step')}",
                event="checkpoint", step=meta.get("step"))
        _inspect_config(config.model, out, target)
        stored = sum(
            int(np.prod(arr.shape)) for name, arr in tensors.items()
            if name.startswith("model.")
        )
        out.say(f"  stored model tensors {stored:>12,d} values",
                event="stored", count=stored)
    else:
        _inspect_config(load_config(target).model, out, target)

    failures = 0
    for name, (blocks, attn) in _SELF_CHECK.items():
        counts = derived_counts(PRESETS[name])
        ok = (counts.total_blocks, counts.total_attention_layers) == (blocks, attn)
        failures += not ok
        out.say(
            f"self-check {name:6s} blocks={counts.total_blocks} attn="
            f"{counts.total_attention_layers} expected ({blocks}, {attn}) "
            f"{'ok' if ok else 'MISMATCH'}",
            event="self_check", preset=name, ok=ok,
        )
    return 1 if failures else 0


def cmd_verify(args, out: Reporter) -> int:
    try:
        results = run_checks(inject_fault=args.inject_fault)
    except KeyError as exc:
        out.error(str(exc.args[0]))
        return 2
    failed = 0
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        detail = f"  {r.detail}" if r.detail else ""
        out.say(f"[{mark}] {r.name:20s} {r.seconds:6.2f}s{detail}",
                event="check", name=r.name, passed=r.passed,
                seconds=r.seconds, detail=r.detail)
        failed += not r.passed
    out.say(f"{len(results) - failed}/{len(results)} checks passed",
            event="summary", passed=len(results) - failed, total=len(results))
    return 1 if failed else 0


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "inspect": cmd_inspect,
    "verify": cmd_verify,
}

_USAGE_ERRORS = (InvalidConfigError, InvalidGuidanceError, InvalidRateError, ShapeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Reporter(getattr(args, "json_logs", False))
    try:
        return _COMMANDS[args.command](args, out)
    except _USAGE_ERRORS as exc:
        out.error(str(exc), kind=type(exc).__name__)
        return 2
    except (CrossUError, FileNotFoundError) as exc:
        out.error(str(exc), kind=type(exc).__name__)
        return 1


if __name__ == "__main__":
    sys.exit(main())
