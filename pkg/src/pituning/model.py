"""Full intent predictor (embeddings + backbone + IAT + heads) and its checkpoint container."""
from __future__ import annotations

import copy
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
import torch
from torch import nn

from .data import DatasetSchema, PAD, WindowArrays
from .encoder import BackboneConfig, CausalTransformer, EmbeddingTables, param_count
from .heads import IntentAttention, PredictionHead, ReconstructionHead


@dataclass
class PredictorConfig:
    n_locations: int
    n_timeslots: int
    n_events: int
    n_intents: int
    window: int = 30
    embed_dim: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention_hidden: int = 64
    head_hidden: int = 64
    use_iat: bool = True
    normalize_attention: bool = False

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.backbone.model_width != 4 * self.embed_dim:
            raise ValueError(f"backbone width {self.backbone.model_width} must equal 4 * embed_dim "
                             f"({4 * self.embed_dim})")

    @property
    def width(self) -> int:
        return 4 * self.embed_dim

    @classmethod
    def for_schema(cls, schema: DatasetSchema, embed_dim: int = 32, n_layers: int = 2, n_heads: int = 4,
                   dropout: float = 0.1, **kw) -> "PredictorConfig":
        return cls(schema.n_locations, schema.n_timeslots, schema.n_events, schema.n_intents,
                   window=schema.window, embed_dim=embed_dim,
                   backbone=BackboneConfig(n_layers=n_layers, model_width=4 * embed_dim, n_heads=n_heads,
                                           dropout=dropout),
                   **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class Output(NamedTuple):
    logits: torch.Tensor      # (B, N_I)
    weights: torch.Tensor     # (B, N_I, I); zeros when IAT is disabled
    hidden: torch.Tensor      # (B, I, W)


class IntentPredictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        c = config
        self.tables = EmbeddingTables(c.n_locations, c.n_timeslots, c.n_events, c.embed_dim)
        self.position = nn.Embedding(c.window, c.width)
        self.backbone = CausalTransformer(c.backbone)
        if c.use_iat:
            self.iat = IntentAttention(c.n_intents, c.width, c.attention_hidden, c.normalize_attention)
            self.head = PredictionHead(c.width, c.head_hidden)
        else:
            # ablation: classify from the last position only
            self.flat_head = nn.Sequential(nn.Linear(c.width, c.head_hidden), nn.ReLU(),
                                           nn.Linear(c.head_hidden, c.n_intents))
        self.reconstruction = ReconstructionHead(c.width, c.n_events)

    def encode(self, loc, wd, ts, ev):
        ev = torch.as_tensor(ev, dtype=torch.long)
        pad_mask = ev == PAD
        x = self.tables(loc, wd, ts, ev)
        n = x.shape[-2]
        if n > self.config.window:
            raise ValueError(f"sequence length {n} exceeds configured window {self.config.window}")
        # right-align positions so the most recent slot always has the same index
        pos = torch.arange(self.config.window - n, self.config.window)
        x = x + self.position(pos)
        return self.backbone(x, pad_mask), pad_mask

    def forward(self, loc, wd, ts, ev) -> Output:
        hidden, pad_mask = self.encode(loc, wd, ts, ev)
        if self.config.use_iat:
            pooled, weights = self.iat(hidden, pad_mask)
            logits = self.head(pooled)
        else:
            logits = self.flat_head(hidden[:, -1])
            weights = hidden.new_zeros(hidden.shape[0], self.config.n_intents, hidden.shape[1])
        return Output(logits, weights, hidden)

    def reconstruct(self, loc, wd, ts, masked_ev) -> torch.Tensor:
        hidden, _ = self.encode(loc, wd, ts, masked_ev)
        return self.reconstruction(hidden)

    def param_count(self) -> int:
        return param_count(self)


def tensors(arrays: WindowArrays, idx=None):
    """``(loc, wd, ts, ev, targets)`` long tensors for the selected rows."""
    a = arrays if idx is None else arrays.take(idx)
    return tuple(torch.from_numpy(np.ascontiguousarray(x)) for x in
                 (a.locations, a.weekdays, a.timeslots, a.events, a.targets))


@torch.no_grad()
def predict_logits(model: IntentPredictor, arrays: WindowArrays, batch_size: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(arrays), batch_size):
        loc, wd, ts, ev, _ = tensors(arrays, np.arange(start, min(start + batch_size, len(arrays))))
        out.append(model(loc, wd, ts, ev).logits.double().numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, model.config.n_intents))
    return np.concatenate(out)


def predict_proba(model: IntentPredictor, arrays: WindowArrays, batch_size: int = 512) -> np.ndarray:
    logits = predict_logits(model, arrays, batch_size)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


@torch.no_grad()
def export_attention_map(model: IntentPredictor, arrays: WindowArrays, batch_size: int = 512) -> np.ndarray:
    """Mean absolute IAT weight per (intent, position); PAD slots are left out of each mean."""
    if len(arrays) == 0:
        raise ValueError("no windows given")
    was_training = model.training
    model.eval()
    total = np.zeros((model.config.n_intents, arrays.window))
    count = np.zeros(arrays.window)
    for start in range(0, len(arrays), batch_size):
        idx = np.arange(start, min(start + batch_size, len(arrays)))
        loc, wd, ts, ev, _ = tensors(arrays, idx)
        w = model(loc, wd, ts, ev).weights.abs().double().numpy()
        real = (ev != PAD).numpy()
        total += (w * real[:, None, :]).sum(axis=0)
        count += real.sum(axis=0)
    model.train(was_training)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def write_attention_map(matrix: np.ndarray, path: str | os.PathLike, intent_labels=None) -> None:
    n_i, n = matrix.shape
    labels = intent_labels or [f"intent_{i}" for i in range(n_i)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["position", *labels]) + "\n")
        for j in range(n):
            row = [str(j - n)] + [f"{matrix[i, j]:.6g}" for i in range(n_i)]
            fh.write("\t".join(row) + "\n")


def import_weights(model: nn.Module, weights: Mapping[str, torch.Tensor], strict: bool = False) -> list[str]:
    """Load externally trained tensors by parameter name.

    This is where pretrained backbone weights would be attached: keys follow
    ``model.state_dict()`` naming (``backbone.blocks.0.attn.qkv.weight`` ...).
    Shape-mismatched or unknown names are skipped unless ``strict``.
    """
    state = model.state_dict()
    loaded = []
    for name, tensor in weights.items():
        tensor = torch.as_tensor(tensor)
        if name not in state or state[name].shape != tensor.shape:
            if strict:
                raise KeyError(f"cannot import {name!r}")
            continue
        state[name] = tensor.to(state[name].dtype)
        loaded.append(name)
    model.load_state_dict(state)
    return loaded


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   magic   8 bytes  b"PITCKPT\0"
#   version u32
#   hlen    u32, then hlen bytes of UTF-8 JSON header
#           {"role", "config", "meta", "tensors": n}
#   n times: u16 name length, name, u8 dtype length, dtype (numpy str, e.g. "<f4"),
#            u8 ndim, ndim x u64 shape, u64 nbytes, raw payload

MAGIC = b"PITCKPT\0"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    model: IntentPredictor
    role: str = "teacher"
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> PredictorConfig:
        return self.model.config

    @property
    def param_count(self) -> int:
        return self.model.param_count()

    def clone(self) -> "ModelCheckpoint":
        return ModelCheckpoint(copy.deepcopy(self.model), self.role, copy.deepcopy(self.meta))

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.model, self.role, self.meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelCheckpoint":
        return load_checkpoint(path)


def save_checkpoint(path, model: IntentPredictor, role: str = "teacher", meta: dict | None = None) -> None:
    state = model.state_dict()
    header = json.dumps({"role": role, "config": model.config.to_dict(), "meta": meta or {},
                         "tensors": len(state)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw_name, dtype = name.encode(), arr.dtype.str.encode()
            fh.write(struct.pack("<H", len(raw_name)) + raw_name)
            fh.write(struct.pack("<B", len(dtype)) + dtype)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = np.ascontiguousarray(arr).tobytes()
            fh.write(struct.pack("<Q", len(payload)) + payload)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    state = {}
    for _ in range(header["tensors"]):
        (nlen,) = struct.unpack_from("<H", blob, pos); pos += 2
        name = blob[pos:pos + nlen].decode(); pos += nlen
        (dlen,) = struct.unpack_from("<B", blob, pos); pos += 1
        dtype = np.dtype(blob[pos:pos + dlen].decode()); pos += dlen
        (ndim,) = struct.unpack_from("<B", blob, pos); pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos); pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", blob, pos); pos += 8
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        state[name] = torch.from_numpy(arr.copy())
    model = IntentPredictor(PredictorConfig(**header["config"]))
    model.load_state_dict(state)
    return ModelCheckpoint(model, header["role"], header["meta"])
