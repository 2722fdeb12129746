"""Intent-aware attention pooling, the shared prediction MLP and the event reconstruction head."""
from __future__ import annotations

import torch
from torch import nn


class ActivationUnit(nn.Module):
    """Scores a history row against an intent embedding.

    Input features are ``[h; e; h*e; h-e]`` (width 4 * model width); one
    ReLU hidden layer, scalar output.
    """

    def __init__(self, width: int, hidden: int = 64):
        super().__init__()
        self.width = width
        self.fc1 = nn.Linear(4 * width, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        # h: (..., I, W), e broadcastable to h
        e = e.expand_as(h)
        feats = torch.cat([h, e, h * e, h - e], dim=-1)
        return self.fc2(torch.relu(self.fc1(feats))).squeeze(-1)

    def pairwise(self, hidden: torch.Tensor, intents: torch.Tensor) -> torch.Tensor:
        """Scores for every (intent, position) pair: ``(B, I, W) x (N_I, W) -> (B, N_I, I)``.

        Same function as ``forward`` with the first layer split by feature
        block, so the ``4W``-wide input is never materialised.
        """
        w = self.width
        wh, we, wp, wd = self.fc1.weight.split(w, dim=1)
        from_h = hidden @ (wh + wd).T                          # (B, I, H)
        from_e = intents @ (we - wd).T + self.fc1.bias         # (N_I, H)
        prod = torch.einsum("bjw,ikw->bijk", hidden, wp[None] * intents[:, None, :])
        pre = prod + from_h[:, None] + from_e[None, :, None]
        return self.fc2(torch.relu(pre)).squeeze(-1)


class IntentAttention(nn.Module):
    """Per-intent weighted-sum pooling of the history representation.

    ``pooled[b, i] = sum_j w[b, i, j] * h[b, j]`` with ``w = a(h_j, E_i)``.
    Weights are raw activation outputs unless ``normalize`` is set, in which
    case they are softmax-normalised over the non-PAD positions.
    """

    def __init__(self, n_intents: int, width: int, hidden: int = 64, normalize: bool = False):
        super().__init__()
        self.intent_embeddings = nn.Parameter(torch.randn(n_intents, width) * 0.1)
        self.unit = ActivationUnit(width, hidden)
        self.normalize = normalize

    def forward(self, hidden: torch.Tensor, pad_mask: torch.Tensor | None = None):
        return intent_attention(self.intent_embeddings, hidden, self.unit, pad_mask, self.normalize)


def intent_attention(intent_emb, hidden, unit, pad_mask=None, normalize: bool = False):
    """Return ``(pooled (B, N_I, W), weights (B, N_I, I))``; also accepts unbatched ``hidden``."""
    single = hidden.dim() == 2
    if single:
        hidden = hidden.unsqueeze(0)
        if pad_mask is not None:
            pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool).unsqueeze(0)
    b, n, w = hidden.shape
    if intent_emb.dim() != 2 or intent_emb.shape[1] != w:
        raise ValueError(f"intent embeddings {tuple(intent_emb.shape)} do not match hidden width {w}")
    weights = unit.pairwise(hidden, intent_emb)  # (B, N_I, I)
    if pad_mask is not None:
        pad = pad_mask[:, None, :].expand_as(weights)
        if normalize:
            weights = weights.masked_fill(pad, float("-inf")).softmax(dim=-1)
            weights = torch.nan_to_num(weights, nan=0.0)
        else:
            weights = weights.masked_fill(pad, 0.0)
    elif normalize:
        weights = weights.softmax(dim=-1)
    pooled = weights @ hidden                    # (B, N_I, W)
    if single:
        return pooled[0], weights[0]
    return pooled, weights


class PredictionHead(nn.Module):
    """Shared two-layer perceptron mapping each pooled intent vector to one logit."""

    def __init__(self, width: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(pooled))).squeeze(-1)


def predict_intent(pooled: torch.Tensor, head: PredictionHead) -> tuple[torch.Tensor, torch.Tensor]:
    logits = head(pooled)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite intent logits")
    return logits, logits.softmax(dim=-1)


class ReconstructionHead(nn.Module):
    """Linear map to logits over every event id plus PAD and MASK."""

    def __init__(self, width: int, n_events: int):
        super().__init__()
        self.linear = nn.Linear(width, n_events + 2)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.linear(hidden)


def reconstruct_events(hidden_masked: torch.Tensor, head: ReconstructionHead) -> torch.Tensor:
    if hidden_masked.shape[-1] != head.linear.in_features:
        raise ValueError("hidden width does not match the reconstruction head")
    return head(hidden_masked)
