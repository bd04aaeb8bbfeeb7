"""Training loop: single process, fully determined by (config, seed).

Every stochastic choice is derived from the run seed and the step index:
batches come from the index-addressable sample stream, caption dropout and
route masks reseed per step, and noise/times come from one torch generator
whose state travels inside the checkpoint. Resuming from a checkpoint
therefore continues the exact run that produced it.

The text encoder trains jointly with the backbone; it is small enough that
a separate pretraining stage would be ceremony without benefit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import RunConfig
from .datapipe import sample_at, scan_corpus
from .errors import IntegrityError
from .flow import fm_loss
from .model import CrossUTransformer
from .routing import make_route_mask
from .tensorio import load_tensors, save_tensors
from .textcond import PAD_ID, TextConfig, ToyCausalEncoder, ToyTokenizer

CHECKPOINT_SUFFIX = ".ckpt"


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    step_time: float
    tokens_per_sec: float
    kept_tokens: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss": self.loss,
                "step_time": self.step_time,
                "tokens_per_sec": self.tokens_per_sec,
                "kept_tokens": self.kept_tokens,
            }
        )


class TrainState:
    """Mutable bundle owned by exactly one training loop."""

    def __init__(self, config: RunConfig):
        torch.manual_seed(config.seed)
        self.config = config
        self.model = CrossUTransformer(config.model)
        self.tokenizer = ToyTokenizer()
        self.text_encoder = ToyCausalEncoder(
            TextConfig(context_dim=config.model.context_dim)
        )
        self.optimizer = _make_optimizer(config, self.model, self.text_encoder)
        self.step = 0
        self.noise_generator = torch.Generator().manual_seed(config.seed)

    def parameters(self):
        yield from self.model.parameters()
        yield from self.text_encoder.parameters()


def _make_optimizer(config: RunConfig, model, text_encoder):
    opt = config.optimizer
    return torch.optim.AdamW(
        [
            {"params": list(model.parameters()),
             "lr": opt.effective_lr(config.model.model_dim)},
            {"params": list(text_encoder.parameters()), "lr": opt.lr},
        ],
        betas=opt.betas,
        weight_decay=opt.weight_decay,
    )


def batch_arrays(config: RunConfig, step: int, tokenizer, pairs=None):
    """Assemble step's batch: (x0 [B,C,S,S], pos [B,ht,wt,2], ids [B,L])."""
    batch = config.schedule.batch
    samples = [
        sample_at(config.data, step * batch + i, tokenizer, pairs=pairs)
        for i in range(batch)
    ]
    x0 = torch.from_numpy(np.stack([s.image for s in samples]))
    pos = np.stack([s.pos.coords for s in samples])
    width = max(len(s.caption_ids) for s in samples)
    ids = torch.full((batch, max(width, 1)), PAD_ID, dtype=torch.long)
    for i, s in enumerate(samples):
        ids[i, : len(s.caption_ids)] = torch.tensor(s.caption_ids, dtype=torch.long)
    return x0, pos, ids


def conditioning_for_step(state: TrainState, ids: torch.Tensor, step: int):
    """Caption embeddings with per-sample dropout to the learned null row."""
    config = state.config
    emb, mask = state.text_encoder.encode(ids)
    p = config.schedule.caption_dropout
    if p > 0:
        drops = np.random.default_rng([config.seed, 2, step]).random(ids.shape[0]) < p
        if drops.any():
            null = state.text_encoder.null_condition().to(emb.dtype)
            emb = emb.clone()
            mask = mask.clone()
            for i in np.flatnonzero(drops):
                emb[i] = null.expand(emb.shape[1], -1)
                mask[i] = False
                mask[i, 0] = True
    return emb, mask


def route_masks_for_step(config: RunConfig, step: int):
    rate = config.schedule.tread_rate
    if rate == 0.0:
        return None
    size = config.data.train_size // config.model.patch_size
    n_image = size * size
    base = (config.seed * 1_000_003 + step) * 1024
    return [
        make_route_mask(n_image, rate, base + i)
        for i in range(config.schedule.batch)
    ]


def train_step(state: TrainState, pairs=None) -> StepMetrics:
    """One optimizer update; returns the step's counters."""
    config = state.config
    started = time.perf_counter()
    state.optimizer.zero_grad(set_to_none=True)
    accum = config.schedule.grad_accum
    loss_total = 0.0
    kept = 0
    n_image = (config.data.train_size // config.model.patch_size) ** 2
    for micro in range(accum):
        sub_step = state.step * accum + micro
        x0, pos, ids = batch_arrays(config, sub_step, state.tokenizer, pairs)
        emb, mask = conditioning_for_step(state, ids, sub_step)
        route = route_masks_for_step(config, sub_step)
        loss = fm_loss(
            state.model, x0, emb, pos, state.noise_generator,
            route=route, text_mask=mask,
        )
        (loss / accum).backward()
        loss_total += float(loss.detach()) / accum
        kept += sum(len(m.kept_indices) for m in route) if route else (
            n_image * config.schedule.batch
        )
    state.optimizer.step()
    state.step += 1
    elapsed = time.perf_counter() - started
    tokens = n_image * config.schedule.batch * accum
    return StepMetrics(
        step=state.step,
        loss=loss_total,
        step_time=elapsed,
        tokens_per_sec=tokens / max(elapsed, 1e-9),
        kept_tokens=kept,
    )


def save_checkpoint(path, state: TrainState) -> None:
    """Serialize weights, optimizer state, step, config echo, and RNG state."""
    tensors = {}
    for name, tensor in state.model.state_dict().items():
        tensors[f"model.{name}"] = tensor.detach().cpu().numpy()
    for name, tensor in state.text_encoder.state_dict().items():
        tensors[f"text.{name}"] = tensor.detach().cpu().numpy()
    opt_state = state.optimizer.state_dict()
    for idx, entry in opt_state["state"].items():
        for key, value in entry.items():
            tensors[f"opt.{idx}.{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value)
                else np.asarray(value)
            )
    tensors["rng.torch"] = state.noise_generator.get_state().numpy()
    groups = [
        {k: v for k, v in g.items() if k != "params"}
        for g in opt_state["param_groups"]
    ]
    group_sizes = [len(g["params"]) for g in opt_state["param_groups"]]
    meta = {
        "step": state.step,
        "config": state.config.to_dict(),
        "opt_groups": groups,
        "opt_group_sizes": group_sizes,
    }
    save_tensors(path, tensors, meta=meta)


def load_checkpoint(path, config: Optional[RunConfig] = None) -> TrainState:
    """Rebuild a TrainState from a checkpoint written by save_checkpoint.

    The config echo inside the file is used unless an override is given
    (overrides must describe the same architecture or loading fails).
    """
    tensors, meta = load_tensors(path)
    if "step" not in meta or "config" not in meta:
        raise IntegrityError(f"{path}: missing step/config metadata")
    config = config or RunConfig.from_dict(meta["config"])
    state = TrainState(config)

    def strip(prefix):
        return {
            name[len(prefix):]: torch.from_numpy(arr.copy())
            for name, arr in tensors.items()
            if name.startswith(prefix)
        }

    state.model.load_state_dict(strip("model."))
    state.text_encoder.load_state_dict(strip("text."))
    opt_entries = {}
    for name, arr in tensors.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        opt_entries.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    if opt_entries:
        start = 0
        groups = []
        for size, extra in zip(meta["opt_group_sizes"], meta["opt_groups"]):
            groups.append({**extra, "params": list(range(start, start + size))})
            start += size
        state.optimizer.load_state_dict(
            {"state": opt_entries, "param_groups": groups}
        )
    state.step = int(meta["step"])
    state.noise_generator.set_state(torch.from_numpy(tensors["rng.torch"].copy()))
    return state


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"step_{step:06d}{CHECKPOINT_SUFFIX}"


def train(
    config: RunConfig,
    *,
    resume=None,
    on_metrics: Optional[Callable[[StepMetrics], None]] = None,
) -> Path:
    """Run the configured number of steps; returns the final checkpoint path.

    `resume` names a checkpoint to continue from; metrics append to the
    existing log in that case so the run's history stays in one file.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume, config) if resume else TrainState(config)
    pairs = None if config.data.procedural_seed is not None else scan_corpus(config.data)

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume else "w"
    last_path = None
    with open(metrics_path, mode) as metrics_file:
        while state.step < config.schedule.steps:
            metrics = train_step(state, pairs)
            if metrics.step % config.schedule.log_every == 0:
                metrics_file.write(metrics.to_json() + "\n")
                metrics_file.flush()
            if on_metrics is not None:
                on_metrics(metrics)
            if metrics.step % config.schedule.checkpoint_every == 0:
                last_path = checkpoint_path(out_dir, metrics.step)
                save_checkpoint(last_path, state)
    final = checkpoint_path(out_dir, state.step)
    if last_path != final:
        save_checkpoint(final, state)
    config.save(out_dir / "config.json")
    return final
