"""Text conditioning: a toy whitespace/byte-fallback tokenizer and a small
causal transformer encoder.

The encoder contract, which any swapped-in replacement must honor:
  * causal (unidirectional) attention; hidden state j depends on tokens <= j,
  * the final-layer hidden state of every input token is the embedding,
  * no explicit position embedding; causal order and an internal start
    anchor supply the positions,
  * padding tokens are masked out of attention entirely,
  * a learned null row stands in for the empty / dropped caption.

Precomputed embeddings can also be loaded from a tensor container, so a
full-size language model can be substituted offline without touching the
backbone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .tensorio import load_tensors, save_tensors

PAD_ID = 0
BOS_ID = 1  # prepended internally by the encoder, never returned
_BYTE_OFFSET = 2  # byte b encodes as 2 + b

_WORDS = (
    "circle square triangle "
    "red green blue yellow white "
    "top bottom left right center "
    "a the of and on"
).split()


@dataclass(frozen=True)
class ToyTokenizer:
    """Whitespace tokenizer over a fixed word list, with UTF-8 byte fallback."""

    words: tuple[str, ...] = tuple(_WORDS)
    word_ids: dict = field(init=False, repr=False)

    def __post_init__(self):
        base = _BYTE_OFFSET + 256
        object.__setattr__(
            self, "word_ids", {w: base + i for i, w in enumerate(self.words)}
        )

    @property
    def vocab_size(self) -> int:
        return _BYTE_OFFSET + 256 + len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for token in text.split():
            if token in self.word_ids:
                ids.append(self.word_ids[token])
            else:
                ids.extend(_BYTE_OFFSET + b for b in token.encode("utf-8"))
        return ids

    def decode(self, ids) -> str:
        inv = {v: k for k, v in self.word_ids.items()}
        parts, pending = [], bytearray()

        def flush():
            if pending:
                parts.append(pending.decode("utf-8", errors="replace"))
                pending.clear()

        for i in ids:
            i = int(i)
            if i == PAD_ID:
                continue
            if i in inv:
                flush()
                parts.append(inv[i])
            else:
                pending.append(i - _BYTE_OFFSET)
        flush()
        return " ".join(parts)


@dataclass(frozen=True)
class TextConfig:
    """Hyperparameters of the toy causal encoder."""

    context_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_context: int = 32
    vocab_size: int = ToyTokenizer().vocab_size


class _CausalBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x, attn_mask):
        b, l, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q, k, v = (
            t.view(b, l, self.n_heads, d // self.n_heads).transpose(1, 2)
            for t in (q, k, v)
        )
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(b, l, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.ln2(x))
        return x


class ToyCausalEncoder(nn.Module):
    """Tiny causal transformer producing per-token final hidden states.

    No position embedding is added anywhere; ordering information comes
    exclusively from the causal attention mask.
    """

    def __init__(self, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.context_dim)
        nn.init.trunc_normal_(self.tok_embed.weight, std=0.02)
        self.blocks = nn.ModuleList(
            _CausalBlock(cfg.context_dim, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.context_dim)
        self.null_embed = nn.Parameter(torch.randn(1, cfg.context_dim) * 0.02)

    def null_condition(self) -> torch.Tensor:
        """Learned [1, context_dim] row used for unconditional passes."""
        return self.null_embed

    def encode(self, token_ids) -> tuple[torch.Tensor, torch.Tensor]:
        """Token ids -> (hidden [B, L, D], valid mask [B, L]).

        Accepts a list of ids, a [L] tensor, or a padded [B, L] tensor
        (pad id 0).  An empty prompt returns the null row.  Inputs longer
        than max_context are head-truncated with a warning.
        """
        if not torch.is_tensor(token_ids):
            token_ids = torch.tensor(list(token_ids), dtype=torch.long)
        if token_ids.ndim == 1:
            token_ids = token_ids[None]
        if token_ids.ndim != 2:
            raise ShapeError(f"token ids must be [L] or [B, L], got {token_ids.shape}")
        if token_ids.numel() == 0 or bool((token_ids == PAD_ID).all()):
            null = self.null_condition().to(self.tok_embed.weight.dtype)
            b = max(token_ids.shape[0], 1)
            return null.expand(b, 1, -1), torch.ones(b, 1, dtype=torch.bool)
        if token_ids.shape[1] > self.cfg.max_context:
            warnings.warn(
                f"prompt of {token_ids.shape[1]} tokens head-truncated to "
                f"max_context={self.cfg.max_context}",
                stacklevel=2,
            )
            token_ids = token_ids[:, : self.cfg.max_context]

        valid = token_ids != PAD_ID
        # An internal start token anchors the sequence: without it, repeated
        # tokens see attention sets that differ only in multiplicity, which
        # softmax averaging collapses to identical states.  It is dropped from
        # the output so callers still get one row per input token.
        b = token_ids.shape[0]
        bos = torch.full((b, 1), BOS_ID, dtype=token_ids.dtype, device=token_ids.device)
        inner_ids = torch.cat([bos, token_ids], dim=1)
        inner_valid = torch.cat([torch.ones_like(bos, dtype=torch.bool), valid], dim=1)
        x = self.tok_embed(inner_ids)
        l = inner_ids.shape[1]
        causal = torch.tril(torch.ones(l, l, dtype=torch.bool, device=x.device))
        mask = causal[None, None] & inner_valid[:, None, None, :]
        # let every token (even padding) see itself so no softmax row is empty
        mask = mask | torch.eye(l, dtype=torch.bool, device=x.device)[None, None]
        for block in self.blocks:
            x = block(x, mask)
        return self.final_norm(x)[:, 1:], valid

    def encode_prompt(self, tokenizer: ToyTokenizer, text: str):
        """Convenience: text -> (hidden [1, L, D], mask [1, L])."""
        return self.encode(tokenizer.encode(text))


def save_embedding_matrix(path, embeddings: torch.Tensor, meta: dict | None = None):
    """Persist a precomputed [rows, context_dim] context matrix."""
    save_tensors(path, {"embeddings": embeddings.detach().cpu().numpy()}, meta=meta)


def load_embedding_matrix(path) -> torch.Tensor:
    """Load a context matrix written by save_embedding_matrix."""
    tensors, _ = load_tensors(path)
    if "embeddings" not in tensors:
        raise ShapeError(f"{path}: container has no 'embeddings' tensor")
    emb = torch.from_numpy(tensors["embeddings"])
    if emb.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-D, got shape {tuple(emb.shape)}")
    return emb
