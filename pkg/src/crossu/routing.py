"""Token routing and guidance combination.

During training a random fraction of image tokens bypasses the middle run
of transformer blocks and is reinserted unchanged afterwards, so those
tokens ride a pure identity path while still carrying gradient to the
embedding and boundary blocks. At inference the same mechanism drives
auto-guidance: the unconditional pass is run at a higher bypass rate than
the conditional one, making it the deliberately weakened model.

Split and merge are pure functions of (tokens, mask); mask generation is
pure given a seed. Text tokens are never routed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    InvalidConfigError,
    InvalidGuidanceError,
    InvalidRateError,
    ShapeError,
)

# bypass rate used during training; guidance cond_rate must stay below it
TRAINING_ROUTE_RATE = 0.5


@dataclass(frozen=True)
class RouteMask:
    """Partition of image-token indices into kept and bypassed sets.

    Both index arrays are sorted ascending so split/merge preserve the
    relative order of tokens within each stream.
    """

    kept_indices: np.ndarray
    bypassed_indices: np.ndarray
    rate: float
    seed: int

    @property
    def n_tokens(self) -> int:
        return len(self.kept_indices) + len(self.bypassed_indices)


def make_route_mask(n_image_tokens: int, rate: float, seed: int) -> RouteMask:
    """Draw a uniformly random bypass set of exactly round(rate * n) tokens."""
    if not 0.0 <= rate <= 1.0:
        raise InvalidRateError(f"bypass rate must be in [0, 1], got {rate}")
    if n_image_tokens < 0:
        raise InvalidRateError(f"token count must be >= 0, got {n_image_tokens}")
    n_bypass = round(rate * n_image_tokens)
    perm = np.random.default_rng(seed).permutation(n_image_tokens)
    return RouteMask(
        kept_indices=np.sort(perm[n_bypass:]).astype(np.int64),
        bypassed_indices=np.sort(perm[:n_bypass]).astype(np.int64),
        rate=rate,
        seed=seed,
    )


def _check_span(mask: RouteMask, length: int, image_start: int):
    span_end = image_start + mask.n_tokens
    if image_start < 0 or span_end > length:
        raise ShapeError(
            f"image span [{image_start}, {span_end}) exceeds stream of {length}"
        )


def route_split(tokens, mask: RouteMask, image_start: int = 0):
    """Split one token stream into (kept stream, bypass store).

    `tokens` is [L, D], numpy or torch. The image span occupies
    [image_start, image_start + mask.n_tokens); everything outside it
    (text, registers) always stays in the kept stream.
    """
    length = tokens.shape[0]
    _check_span(mask, length, image_start)
    prefix = np.arange(image_start, dtype=np.int64)
    suffix = np.arange(image_start + mask.n_tokens, length, dtype=np.int64)
    kept = np.concatenate([prefix, image_start + mask.kept_indices, suffix])
    bypassed = image_start + mask.bypassed_indices
    if torch.is_tensor(tokens):
        return tokens[torch.from_numpy(kept)], tokens[torch.from_numpy(bypassed)]
    return tokens[kept], tokens[bypassed]


def route_merge(kept_tokens, bypass_store, mask: RouteMask, image_start: int = 0):
    """Reassemble the full stream, bypassed tokens at their original slots.

    The bypass store must hold the pre-region values captured by
    route_split; reinserting them unchanged is what makes the bypass an
    identity path.
    """
    length = kept_tokens.shape[0] + bypass_store.shape[0]
    _check_span(mask, length, image_start)
    if bypass_store.shape[0] != len(mask.bypassed_indices):
        raise ShapeError(
            f"bypass store has {bypass_store.shape[0]} rows, mask expects "
            f"{len(mask.bypassed_indices)}"
        )
    prefix = np.arange(image_start, dtype=np.int64)
    suffix = np.arange(image_start + mask.n_tokens, length, dtype=np.int64)
    kept = np.concatenate([prefix, image_start + mask.kept_indices, suffix])
    bypassed = image_start + mask.bypassed_indices
    if torch.is_tensor(kept_tokens):
        out = kept_tokens.new_zeros((length,) + kept_tokens.shape[1:])
        out[torch.from_numpy(kept)] = kept_tokens
        out[torch.from_numpy(bypassed)] = bypass_store
        return out
    out = np.zeros((length,) + kept_tokens.shape[1:], dtype=kept_tokens.dtype)
    out[kept] = kept_tokens
    out[bypassed] = bypass_store
    return out


def routed_region_bounds(cfg) -> tuple[int, int]:
    """Half-open flat block range [first, last) that routing applies to.

    The first tread_before and last tread_after blocks always see the
    full token stream.
    """
    total = (cfg.n_enc + cfg.n_dec) * cfg.n_depth + cfg.tread_before + cfg.tread_after
    if cfg.tread_before + cfg.tread_after > total:
        raise InvalidConfigError(
            f"boundary blocks ({cfg.tread_before}+{cfg.tread_after}) exceed "
            f"total blocks ({total})"
        )
    return cfg.tread_before, total - cfg.tread_after


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance weight plus the bypass rates of the two passes.

    cond_rate / uncond_rate of (0, 0) means plain two-pass guidance with
    routing disabled. Nonzero rates enable route-based auto-guidance and
    must satisfy cond_rate < uncond_rate and cond_rate < the training
    bypass rate, so the unconditional pass is strictly the weaker model.
    """

    scale: float = 1.0
    cond_rate: float = 0.0
    uncond_rate: float = 0.0
    rate_seed: int = 0

    def __post_init__(self):
        for name in ("cond_rate", "uncond_rate"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise InvalidRateError(f"{name} must be in [0, 1], got {r}")
        if self.routing_active:
            if self.cond_rate >= self.uncond_rate:
                raise InvalidGuidanceError(
                    f"cond_rate {self.cond_rate} must be < uncond_rate "
                    f"{self.uncond_rate}"
                )
            if self.cond_rate >= TRAINING_ROUTE_RATE:
                raise InvalidGuidanceError(
                    f"cond_rate {self.cond_rate} must be < training rate "
                    f"{TRAINING_ROUTE_RATE}"
                )

    @property
    def routing_active(self) -> bool:
        return (self.cond_rate, self.uncond_rate) != (0.0, 0.0)


def auto_guidance(v_cond, v_uncond, scale: float):
    """Extrapolate away from the weakened pass: v_u + scale * (v_c - v_u).

    scale 1 returns the conditional velocity bit-for-bit, so an
    unconditional pass need not be run at all in that case.
    """
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(
            f"velocity shapes differ: {tuple(v_cond.shape)} vs "
            f"{tuple(v_uncond.shape)}"
        )
    if scale == 1.0:
        return v_cond
    return v_uncond + scale * (v_cond - v_uncond)
