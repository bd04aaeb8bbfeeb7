"""Velocity backbone: a U-shaped transformer with cross-attention skips.

The network patchifies the image, projects text and image tokens into one
sequence, and runs a flat stack of pre-norm transformer blocks arranged as

    pre blocks -> encoder depths 1..n_depth -> decoder depths 1..n_depth
    -> post blocks -> final norm + linear head

Each encoder depth's output is retained; the first decoder block of depth
d adds a cross-attention branch whose keys/values are the retained state
of encoder depth (n_depth - d + 1), so the shallowest encoder state feeds
the deepest decoder and the pairing is symmetric. All blocks share a
single adaLN modulation set computed once per forward pass from the
timestep. Image tokens carry two-axis rotary phases derived from their
position map; text tokens are left unrotated.

Token routing (training only) splits the sequence after the pre blocks,
runs the middle of the stack on the kept subset, and merges bypassed
tokens back unchanged before the post blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfigError, ShapeError
from .geometry import PositionMap, RopeFrequencies
from .routing import RouteMask


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 1024
    context_dim: int = 1024
    mlp_dim: int = 3072
    n_heads: int = 16
    head_dim: int = 64
    n_depth: int = 4
    n_enc: int = 1
    n_dec: int = 3
    tread_before: int = 1
    tread_after: int = 3
    patch_size: int = 2
    in_channels: int = 3

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.model_dim:
            raise InvalidConfigError(
                f"n_heads * head_dim must equal model_dim: "
                f"{self.n_heads} * {self.head_dim} != {self.model_dim}"
            )
        counts = (self.n_enc, self.n_dec, self.tread_before, self.tread_after)
        if self.n_depth < 1 or min(counts) < 0:
            raise InvalidConfigError(
                "n_depth must be >= 1 and block counts must be >= 0"
            )
        if self.patch_size < 1 or self.in_channels < 1:
            raise InvalidConfigError("patch_size and in_channels must be >= 1")

    @property
    def total_blocks(self) -> int:
        return (
            (self.n_enc + self.n_dec) * self.n_depth
            + self.tread_before
            + self.tread_after
        )

    @property
    def total_attention_layers(self) -> int:
        # one extra attention per depth from the cross-attention branch
        return self.total_blocks + self.n_depth

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict = {
    "small": ModelConfig(
        model_dim=896, context_dim=640, mlp_dim=3072,
        n_heads=14, head_dim=64, n_depth=4, n_enc=1, n_dec=2,
        tread_before=1, tread_after=3, patch_size=2, in_channels=3,
    ),
    "base": ModelConfig(
        model_dim=1024, context_dim=1024, mlp_dim=3072,
        n_heads=16, head_dim=64, n_depth=4, n_enc=1, n_dec=3,
        tread_before=1, tread_after=3, patch_size=2, in_channels=3,
    ),
    "large": ModelConfig(
        model_dim=1152, context_dim=1152, mlp_dim=5120,
        n_heads=12, head_dim=96, n_depth=4, n_enc=1, n_dec=3,
        tread_before=1, tread_after=3, patch_size=2, in_channels=3,
    ),
    # trains a 32x32 procedural task on one CPU in minutes
    "toy": ModelConfig(
        model_dim=128, context_dim=64, mlp_dim=256,
        n_heads=4, head_dim=32, n_depth=2, n_enc=1, n_dec=2,
        tread_before=1, tread_after=1, patch_size=2, in_channels=3,
    ),
    # small enough for brute-force finite-difference gradient checks
    "micro": ModelConfig(
        model_dim=16, context_dim=8, mlp_dim=32,
        n_heads=2, head_dim=8, n_depth=1, n_enc=1, n_dec=1,
        tread_before=0, tread_after=0, patch_size=2, in_channels=3,
    ),
}


@dataclass(frozen=True)
class DerivedCounts:
    total_blocks: int
    total_attention_layers: int
    seq_len_at_256: int  # under an 8x-downscaling autoencoder front end
    seq_len_pixels_at_256: int  # operating on raw pixels, as this package does


def derived_counts(cfg: ModelConfig) -> DerivedCounts:
    """Pure block/attention/sequence-length arithmetic for a config."""
    latent_side = 256 // (8 * cfg.patch_size)
    pixel_side = 256 // cfg.patch_size
    return DerivedCounts(
        total_blocks=cfg.total_blocks,
        total_attention_layers=cfg.total_attention_layers,
        seq_len_at_256=latent_side**2,
        seq_len_pixels_at_256=pixel_side**2,
    )


def patchify(image: torch.Tensor, patch: int):
    """[B, C, H, W] (or [C, H, W]) -> ([B, n, C*patch*patch], (ht, wt)).

    Pure reshape/permute, so unpatchify inverts it bitwise.
    """
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    if image.ndim != 4:
        raise ShapeError(f"image must be [C,H,W] or [B,C,H,W], got {image.shape}")
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    ht, wt = h // patch, w // patch
    tokens = (
        image.reshape(b, c, ht, patch, wt, patch)
        .permute(0, 2, 4, 1, 3, 5)
        .reshape(b, ht * wt, c * patch * patch)
    )
    return (tokens[0] if squeeze else tokens), (ht, wt)


def unpatchify(tokens: torch.Tensor, grid, channels: int, patch: int):
    """Inverse of patchify for the same (grid, channels, patch)."""
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    ht, wt = grid
    b, n, d = tokens.shape
    if n != ht * wt or d != channels * patch * patch:
        raise ShapeError(
            f"tokens {tokens.shape} inconsistent with grid {grid}, "
            f"channels {channels}, patch {patch}"
        )
    image = (
        tokens.reshape(b, ht, wt, channels, patch, patch)
        .permute(0, 3, 1, 4, 2, 5)
        .reshape(b, channels, ht * patch, wt * patch)
    )
    return image[0] if squeeze else image


def shared_adaln(x: torch.Tensor, gamma, beta) -> torch.Tensor:
    """Per-token standardization followed by the shared affine: g*norm(x)+b.

    gamma/beta broadcast over tokens ([D], [B, D] or [B, 1, D]); passing
    gamma=1, beta=0 reduces to plain LayerNorm without learned affine.
    """
    gamma = torch.as_tensor(gamma, dtype=x.dtype, device=x.device)
    beta = torch.as_tensor(beta, dtype=x.dtype, device=x.device)
    for v in (gamma, beta):
        if v.ndim and v.shape[-1] not in (1, x.shape[-1]):
            raise ShapeError(
                f"modulation width {v.shape[-1]} does not match channels "
                f"{x.shape[-1]}"
            )
    if gamma.ndim == 2:
        gamma = gamma[:, None]
    if beta.ndim == 2:
        beta = beta[:, None]
    return gamma * F.layer_norm(x, (x.shape[-1],)) + beta


class SharedModulation(NamedTuple):
    """One modulation set per forward pass, reused by every block."""

    attn_shift: torch.Tensor
    attn_scale: torch.Tensor
    attn_gate: torch.Tensor
    mlp_shift: torch.Tensor
    mlp_scale: torch.Tensor
    mlp_gate: torch.Tensor


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1], spread over ~3 decades."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / half
    )
    args = t[:, None] * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _Conditioning(nn.Module):
    """Timestep -> the six shared modulation vectors.

    The output projection starts at zero: raw scales/shifts/gates of zero
    make every block an identity map at initialization (scale is applied
    as 1 + raw).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.freq_dim = min(dim, 256)
        self.time_mlp = nn.Sequential(
            nn.Linear(self.freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim)
        )
        self.mod = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, t: torch.Tensor) -> SharedModulation:
        c = self.time_mlp(timestep_features(t, self.freq_dim))
        parts = self.mod(c).chunk(6, dim=-1)
        return SharedModulation(*(p[:, None] for p in parts))


def _rotate_pairs(x, cos, sin):
    # x [..., L, r]; cos/sin [..., L, r/2]; adjacent pairs (0,1), (2,3), ...
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack(
        [x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1
    ).flatten(-2)


def _apply_rope(x, cos, sin, rotated: int):
    if rotated == 0:
        return x
    head = _rotate_pairs(x[..., :rotated], cos, sin)
    return torch.cat([head, x[..., rotated:]], dim=-1)


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, rotated: int):
        super().__init__()
        self.n_heads = n_heads
        self.rotated = rotated
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, rope_cs, key_mask):
        b, l, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (
            t.view(b, l, self.n_heads, d // self.n_heads).transpose(1, 2)
            for t in (q, k, v)
        )
        cos, sin = (t[:, None] for t in rope_cs)
        q = _apply_rope(q, cos, sin, self.rotated)
        k = _apply_rope(k, cos, sin, self.rotated)
        mask = key_mask[:, None, None, :] if key_mask is not None else None
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, l, d))


class _CrossAttention(nn.Module):
    """Query from the current stream, key/value from a stored skip state."""

    def __init__(self, dim: int, n_heads: int, rotated: int):
        super().__init__()
        self.n_heads = n_heads
        self.rotated = rotated
        self.q_proj = nn.Linear(dim, dim)
        self.kv_proj = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, skip, rope_cs, key_mask):
        b, l, d = x.shape
        lk = skip.shape[1]
        q = self.q_proj(x).view(b, l, self.n_heads, d // self.n_heads).transpose(1, 2)
        k, v = self.kv_proj(skip).chunk(2, dim=-1)
        k, v = (
            t.view(b, lk, self.n_heads, d // self.n_heads).transpose(1, 2)
            for t in (k, v)
        )
        cos, sin = (t[:, None] for t in rope_cs)
        # stream and skip share the token layout, so one phase table serves both
        q = _apply_rope(q, cos, sin, self.rotated)
        k = _apply_rope(k, cos, sin, self.rotated)
        mask = key_mask[:, None, None, :] if key_mask is not None else None
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(b, l, d))


class _Block(nn.Module):
    """Pre-norm transformer block with shared-adaLN modulation.

    When built with a cross branch (first decoder block of a depth), the
    cross-attention output is added on top of the block output, both
    branches reading the block input.
    """

    def __init__(self, cfg: ModelConfig, rotated: int, cross: bool):
        super().__init__()
        self.attn = _SelfAttention(cfg.model_dim, cfg.n_heads, rotated)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.mlp_dim),
            nn.GELU(approximate="tanh"),
            nn.Linear(cfg.mlp_dim, cfg.model_dim),
        )
        self.cross = (
            _CrossAttention(cfg.model_dim, cfg.n_heads, rotated) if cross else None
        )

    def forward(self, x, mod: SharedModulation, rope_cs, key_mask, skip=None):
        attn_in = shared_adaln(x, 1 + mod.attn_scale, mod.attn_shift)
        y = x + mod.attn_gate * self.attn(attn_in, rope_cs, key_mask)
        mlp_in = shared_adaln(y, 1 + mod.mlp_scale, mod.mlp_shift)
        y = y + mod.mlp_gate * self.mlp(mlp_in)
        if self.cross is not None:
            if skip is None:
                raise ShapeError("cross block called without a skip state")
            y = y + mod.attn_gate * self.cross(attn_in, skip, rope_cs, key_mask)
        return y


class CrossUTransformer(nn.Module):
    """Text+image token transformer predicting a velocity field.

    forward(image, pos, text_emb, t, route=None, text_mask=None) returns a
    tensor shaped like `image`. `pos` is the token-resolution position map
    ([ht, wt, 2] or batched); `route` optionally supplies per-sample (or
    shared) RouteMasks over the image tokens.

    After every forward, `skip_trace` records which encoder depth each
    decoder depth's cross branch consumed (both 1-based).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.n_enc < 1 or cfg.n_dec < 1:
            raise InvalidConfigError(
                "the network needs n_enc >= 1 and n_dec >= 1 "
                "(counts-only configs may be smaller)"
            )
        self.cfg = cfg
        self.rope = RopeFrequencies(cfg.head_dim)
        rotated = self.rope.rotated_dims
        self.image_proj = nn.Linear(cfg.patch_dim, cfg.model_dim)
        self.text_proj = nn.Linear(cfg.context_dim, cfg.model_dim)
        self.cond = _Conditioning(cfg.model_dim)
        self.pre_blocks = nn.ModuleList(
            _Block(cfg, rotated, cross=False) for _ in range(cfg.tread_before)
        )
        self.enc_blocks = nn.ModuleList(
            nn.ModuleList(_Block(cfg, rotated, cross=False) for _ in range(cfg.n_enc))
            for _ in range(cfg.n_depth)
        )
        self.dec_blocks = nn.ModuleList(
            nn.ModuleList(
                _Block(cfg, rotated, cross=(i == 0)) for i in range(cfg.n_dec)
            )
            for _ in range(cfg.n_depth)
        )
        self.post_blocks = nn.ModuleList(
            _Block(cfg, rotated, cross=False) for _ in range(cfg.tread_after)
        )
        self.head = nn.Linear(cfg.model_dim, cfg.patch_dim)
        self.skip_trace: list = []
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
        # identity at init: zero modulation and a zero velocity head
        nn.init.zeros_(self.cond.mod[-1].weight)
        nn.init.zeros_(self.cond.mod[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _rope_tables(self, pos, batch: int, n_text: int, grid, dtype, device):
        """Cos/sin phase tables for the full sequence; text rows rotate by 0."""
        if isinstance(pos, PositionMap):
            pos = pos.coords
        if not torch.is_tensor(pos):
            pos = torch.as_tensor(np.asarray(pos))
        pos = pos.to(dtype=dtype, device=device)
        if pos.ndim == 3:
            pos = pos[None].expand(batch, -1, -1, -1)
        if pos.ndim != 4 or pos.shape[-1] != 2 or pos.shape[0] != batch:
            raise ShapeError(f"position map must be [ht, wt, 2], got {pos.shape}")
        if tuple(pos.shape[1:3]) != tuple(grid):
            raise ShapeError(
                f"position map grid {tuple(pos.shape[1:3])} does not match "
                f"token grid {tuple(grid)}"
            )
        flat = pos.reshape(batch, -1, 2)
        freqs = torch.as_tensor(self.rope.axis_freqs(), dtype=dtype, device=device)
        angles = torch.cat(
            [flat[..., 0:1] * freqs, flat[..., 1:2] * freqs], dim=-1
        )
        zeros = angles.new_zeros(batch, n_text, angles.shape[-1])
        angles = torch.cat([zeros, angles], dim=1)
        return angles.cos(), angles.sin()

    def _gather(self, x, idx):
        return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))

    def forward(
        self,
        image: torch.Tensor,
        pos,
        text_emb: torch.Tensor,
        t,
        route: Union[RouteMask, Sequence[RouteMask], None] = None,
        text_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        squeeze = image.ndim == 3
        if squeeze:
            image = image[None]
        b = image.shape[0]
        dtype, device = image.dtype, image.device

        tokens, grid = patchify(image, self.cfg.patch_size)
        n_image = tokens.shape[1]
        if text_emb.ndim == 2:
            text_emb = text_emb[None]
        if text_emb.shape[0] == 1 and b > 1:
            text_emb = text_emb.expand(b, -1, -1)
        n_text = text_emb.shape[1]

        x = torch.cat(
            [self.text_proj(text_emb.to(dtype)), self.image_proj(tokens)], dim=1
        )
        full_cs = self._rope_tables(pos, b, n_text, grid, dtype, device)
        cos, sin = full_cs
        full_mask = None
        if text_mask is not None:
            if text_mask.shape[0] == 1 and b > 1:
                text_mask = text_mask.expand(b, -1)
            full_mask = torch.cat(
                [
                    text_mask.to(device=device, dtype=torch.bool),
                    torch.ones(b, n_image, dtype=torch.bool, device=device),
                ],
                dim=1,
            )
        key_mask = full_mask

        t = torch.as_tensor(t, dtype=dtype, device=device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        elif t.numel() != b:
            raise ShapeError(f"t has {t.numel()} entries for batch of {b}")
        mod = self.cond(t)

        for block in self.pre_blocks:
            x = block(x, mod, (cos, sin), key_mask)

        # split: text plus kept image tokens proceed, the rest is stored
        kept_idx = byp_idx = bypass_store = None
        if route is not None:
            masks = [route] if isinstance(route, RouteMask) else list(route)
            if len(masks) == 1:
                masks = masks * b
            if len(masks) != b:
                raise ShapeError(f"{len(masks)} route masks for batch of {b}")
            for m in masks:
                if m.n_tokens != n_image:
                    raise ShapeError(
                        f"route mask covers {m.n_tokens} tokens, image has "
                        f"{n_image}"
                    )
            text_cols = np.arange(n_text, dtype=np.int64)
            kept_idx = torch.as_tensor(
                np.stack(
                    [
                        np.concatenate([text_cols, n_text + m.kept_indices])
                        for m in masks
                    ]
                ),
                device=device,
            )
            byp_idx = torch.as_tensor(
                np.stack([n_text + m.bypassed_indices for m in masks]),
                device=device,
            )
            bypass_store = self._gather(x, byp_idx)
            full_len = x.shape[1]
            x = self._gather(x, kept_idx)
            cos = self._gather(cos, kept_idx)
            sin = self._gather(sin, kept_idx)
            if key_mask is not None:
                key_mask = torch.gather(key_mask, 1, kept_idx)

        # skip states are captured in routed form so query and key token
        # sets agree inside the cross branches
        skips = []
        for depth_blocks in self.enc_blocks:
            for block in depth_blocks:
                x = block(x, mod, (cos, sin), key_mask)
            skips.append(x)
        self.skip_trace = []
        for d, depth_blocks in enumerate(self.dec_blocks):
            source = self.cfg.n_depth - 1 - d
            self.skip_trace.append((d + 1, source + 1))
            for i, block in enumerate(depth_blocks):
                skip = skips[source] if i == 0 else None
                x = block(x, mod, (cos, sin), key_mask, skip=skip)

        if route is not None:
            merged = x.new_zeros(b, full_len, x.shape[-1])
            merged = merged.scatter(
                1, kept_idx[..., None].expand(-1, -1, x.shape[-1]), x
            )
            merged = merged.scatter(
                1,
                byp_idx[..., None].expand(-1, -1, x.shape[-1]),
                bypass_store,
            )
            x = merged
            cos, sin = full_cs
            key_mask = full_mask

        for block in self.post_blocks:
            x = block(x, mod, (cos, sin), key_mask)

        image_tokens = x[:, n_text:]
        out = self.head(
            shared_adaln(image_tokens, 1 + mod.mlp_scale, mod.mlp_shift)
        )
        velocity = unpatchify(out, grid, self.cfg.in_channels, self.cfg.patch_size)
        return velocity[0] if squeeze else velocity

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
