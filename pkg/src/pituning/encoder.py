"""Embedding tables, the pre-norm causal transformer backbone and event masking."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .data import MASK, PAD, SequenceWindow


@dataclass
class BackboneConfig:
    n_layers: int = 2
    model_width: int = 128
    n_heads: int = 4
    ff_width: int | None = None
    dropout: float = 0.1
    causal: bool = True

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.model_width % self.n_heads:
            raise ValueError("model_width must be divisible by n_heads")
        if not self.causal:
            raise ValueError("the backbone is always causal")

    @property
    def hidden_ff(self) -> int:
        return self.ff_width or 4 * self.model_width


class EmbeddingTables(nn.Module):
    """Location, weekday, time-slot and event tables, each with reserved rows.

    PAD occupies the row right after the real ids; the event table also has a
    MASK row after PAD.
    """

    def __init__(self, n_locations: int, n_timeslots: int, n_events: int, dim: int):
        super().__init__()
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.n_locations, self.n_timeslots, self.n_events, self.dim = n_locations, n_timeslots, n_events, dim
        self.location = nn.Embedding(n_locations + 1, dim)
        self.weekday = nn.Embedding(8, dim)
        self.timeslot = nn.Embedding(n_timeslots + 1, dim)
        self.event = nn.Embedding(n_events + 2, dim)

    @property
    def pad_ids(self) -> tuple[int, int, int, int]:
        return self.n_locations, 7, self.n_timeslots, self.n_events

    @property
    def mask_id(self) -> int:
        return self.n_events + 1

    def to_rows(self, loc, wd, ts, ev):
        """Map PAD/MASK sentinels to table rows and range-check everything."""
        pl, pw, pt, pe = self.pad_ids
        out = []
        for ids, pad, upper in ((loc, pl, pl), (wd, pw, pw), (ts, pt, pt)):
            ids = torch.as_tensor(ids, dtype=torch.long)
            bad = (ids < PAD) | (ids >= upper)
            if bool(bad.any()):
                raise IndexError(f"id out of range [0, {upper})")
            out.append(torch.where(ids == PAD, torch.full_like(ids, pad), ids))
        ev = torch.as_tensor(ev, dtype=torch.long)
        if bool(((ev < MASK) | (ev >= pe)).any()):
            raise IndexError(f"event id out of range [0, {pe})")
        ev = torch.where(ev == PAD, torch.full_like(ev, pe), ev)
        ev = torch.where(ev == MASK, torch.full_like(ev, self.mask_id), ev)
        out.append(ev)
        return out

    def forward(self, loc, wd, ts, ev):
        loc, wd, ts, ev = self.to_rows(loc, wd, ts, ev)
        return torch.cat([self.location(loc), self.weekday(wd), self.timeslot(ts), self.event(ev)], dim=-1)


def embed_inputs(window: SequenceWindow, tables: EmbeddingTables) -> torch.Tensor:
    """Concatenated ``[loc; weekday; timeslot; event]`` rows, shape ``(I, 4d)``."""
    return tables(window.locations, window.weekdays, window.timeslots, window.events)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.model_width, 3 * cfg.model_width)
        self.proj = nn.Linear(cfg.model_width, cfg.model_width)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask=None):
        b, n, w = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(w, dim=-1)
        q, k, v = (t.view(b, n, h, w // h).transpose(1, 2) for t in (q, k, v))
        att = q @ k.transpose(-2, -1) / math.sqrt(w // h)
        allowed = torch.ones(n, n, dtype=torch.bool, device=x.device).tril()
        if pad_mask is not None:
            # real queries ignore PAD keys; PAD queries see only themselves
            eye = torch.eye(n, dtype=torch.bool, device=x.device)
            allowed = allowed & (~pad_mask[:, None, :] | eye)
            allowed = allowed[:, None]
        att = att.masked_fill(~allowed, float("-inf"))
        att = self.drop(att.softmax(dim=-1))
        y = (att @ v).transpose(1, 2).reshape(b, n, w)
        return self.drop(self.proj(y))


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.model_width)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.model_width)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.model_width, cfg.hidden_ff),
            nn.GELU(),
            nn.Linear(cfg.hidden_ff, cfg.model_width),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, pad_mask=None):
        x = x + self.attn(self.ln1(x), pad_mask)
        return x + self.mlp(self.ln2(x))


class CausalTransformer(nn.Module):
    """GPT-2 style stack: pre-norm blocks followed by a final LayerNorm.

    With zero layers the stack is the identity (no final norm either).
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.model_width) if cfg.n_layers else nn.Identity()

    def forward(self, x, pad_mask=None):
        if x.shape[-1] != self.config.model_width:
            raise ValueError(f"input width {x.shape[-1]} != model width {self.config.model_width}")
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.ln_f(x)


def encode_sequence(embedded: torch.Tensor, backbone: CausalTransformer, pad_mask=None) -> torch.Tensor:
    """Run the backbone on ``(I, 4d)`` or ``(B, I, 4d)`` input."""
    single = embedded.dim() == 2
    x = embedded.unsqueeze(0) if single else embedded
    if pad_mask is not None:
        pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool)
        if single:
            pad_mask = pad_mask.unsqueeze(0)
    out = backbone(x, pad_mask)
    return out[0] if single else out


def mask_events(window: SequenceWindow, ratio: float, seed: int | None = None) -> tuple[SequenceWindow, list[int]]:
    """Replace each non-PAD event by MASK with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random(window.length)
    masked = [j for j in range(window.pad_count, window.length) if draws[j] < ratio]
    events = list(window.events)
    for j in masked:
        events[j] = MASK
    return replace(window, events=tuple(events)), masked


def mask_event_tensor(events: torch.Tensor, ratio: float, generator: torch.Generator | None = None):
    """Batched :func:`mask_events` on sentinel-coded ids; returns ``(masked, mask)``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    draws = torch.rand(events.shape, generator=generator)
    mask = (draws < ratio) & (events != PAD)
    return torch.where(mask, torch.full_like(events, MASK), events), mask


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

