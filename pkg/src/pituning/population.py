"""Population-level tuning: intent cross-entropy plus masked event reconstruction."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import IntentDistribution, WindowArrays
from .encoder import mask_event_tensor
from .metrics import report_from_scores
from .model import IntentPredictor, ModelCheckpoint, PredictorConfig, predict_logits, tensors

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PopulationTrainConfig:
    lr: float = 0.01
    batch_size: int = 64
    max_epochs: int = 10
    max_steps: int | None = None
    mask_ratio: float = 0.3
    patience: int = 3
    seed: int = 0
    reconstruction: bool = True
    p_out_mode: str = "mean"   # "mean" probability or "argmax" histogram

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.p_out_mode not in ("mean", "argmax"):
            raise ValueError("p_out_mode must be 'mean' or 'argmax'")


@dataclass
class TrainingReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_intent: list[float] = field(default_factory=list)
    epoch_aux: list[float] = field(default_factory=list)
    val_prec_w: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    extra: dict = field(default_factory=dict)
    score_name: str = "val_prec_w"    # what ``val_prec_w`` holds when a custom score selects epochs

    def to_text(self) -> str:
        lines = []
        for e in range(len(self.epoch_loss)):
            val = self.val_prec_w[e] if e < len(self.val_prec_w) else float("nan")
            lines.append(f"epoch {e}: loss={self.epoch_loss[e]:.6f} intent={self.epoch_intent[e]:.6f} "
                         f"aux={self.epoch_aux[e]:.6f} {self.score_name}={val:.6f}")
        lines.append(f"best_epoch: {self.best_epoch}")
        lines += [f"{k}: {v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"


def reconstruction_loss(event_logits: torch.Tensor, original_events: torch.Tensor, mask) -> torch.Tensor:
    """Mean cross-entropy over masked positions only.

    ``mask`` is a boolean tensor shaped like ``original_events`` or, for a
    single sequence, a list of masked indices.
    """
    original_events = torch.as_tensor(original_events, dtype=torch.long)
    if not isinstance(mask, torch.Tensor):
        idx = list(mask)
        m = torch.zeros(original_events.shape, dtype=torch.bool)
        if idx:
            if min(idx) < 0 or max(idx) >= original_events.shape[-1]:
                raise IndexError("mask index out of range")
            m[..., idx] = True
        mask = m
    if not bool(mask.any()):
        log.warning("empty mask set; reconstruction loss is 0")
        return event_logits.sum() * 0.0
    targets = original_events[mask]
    if bool((targets < 0).any()) or bool((targets >= event_logits.shape[-1]).any()):
        raise IndexError("masked position holds PAD or an out-of-range event id")
    return F.cross_entropy(event_logits[mask], targets)


def population_loss(intent_logits, target_intent, event_logits, original_events, mask):
    """Return ``(total, intent_ce, reconstruction)`` with total = reconstruction + intent CE."""
    intent_ce = F.cross_entropy(intent_logits, torch.as_tensor(target_intent, dtype=torch.long))
    rec = reconstruction_loss(event_logits, original_events, mask)
    return rec + intent_ce, intent_ce, rec


def population_step_loss(model: IntentPredictor, batch, cfg: PopulationTrainConfig, gen: torch.Generator):
    """Two forward passes per step: clean history for intents, masked history for reconstruction."""
    loc, wd, ts, ev, y = batch
    logits = model(loc, wd, ts, ev).logits
    if not cfg.reconstruction:
        ce = F.cross_entropy(logits, y)
        return ce, ce, torch.zeros(())
    masked, mask = mask_event_tensor(ev, cfg.mask_ratio, gen)
    event_logits = model.reconstruct(loc, wd, ts, masked)
    return population_loss(logits, y, event_logits, ev, mask)


def output_distribution(model: IntentPredictor, arrays: WindowArrays, mode: str = "mean") -> IntentDistribution:
    """P_out: mean predicted distribution (or argmax histogram) over ``arrays``."""
    n_i = model.config.n_intents
    if len(arrays) == 0:
        return IntentDistribution.uniform(n_i)
    logits = predict_logits(model, arrays)
    if mode == "argmax":
        counts = np.bincount(logits.argmax(axis=1), minlength=n_i).astype(float)
        return IntentDistribution(counts / counts.sum(), len(arrays))
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    probs = p.mean(axis=0)
    return IntentDistribution(probs / probs.sum(), len(arrays))


def fit(model: IntentPredictor, train: WindowArrays, val: WindowArrays | None, *, lr: float, batch_size: int,
        max_epochs: int, seed: int, loss_fn, patience: int | None = None, max_steps: int | None = None,
        report: TrainingReport | None = None, select_best: bool = True, score_fn=None,
        keep_initial: bool = False):
    """Generic mini-batch Adam loop with per-epoch validation on weighted precision.

    ``loss_fn(model, batch, idx, gen)`` returns ``(total, part_a, part_b)``.
    ``score_fn(model, val)`` replaces weighted precision as the validation score.
    The best-validation weights are restored at the end when ``select_best``;
    with ``keep_initial`` the starting weights compete too (``best_epoch`` -1).
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    report = report or TrainingReport()
    best_score, best_state, stale, step = -math.inf, None, 0, 0
    n_i = model.config.n_intents

    def validate():
        if score_fn is not None:
            return float(score_fn(model, val))
        return report_from_scores(predict_logits(model, val), val.targets, n_i).prec_w

    if keep_initial and val is not None and len(val):
        model.eval()
        best_score, best_state = validate(), copy.deepcopy(model.state_dict())
        report.extra["initial_score"] = best_score
    for epoch in range(max_epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen).numpy()
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            batch = tensors(train, idx)
            total, a, b = loss_fn(model, batch, idx, gen)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: "
                                       f"total={total.item()} parts=({a.item()}, {b.item()})")
            opt.zero_grad()
            total.backward()
            opt.step()
            report.step_loss.append(total.item())
            sums += (total.item(), a.item(), b.item())
            n_batches += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        report.epoch_loss.append(sums[0] / n_batches)
        report.epoch_intent.append(sums[1] / n_batches)
        report.epoch_aux.append(sums[2] / n_batches)
        if val is not None and len(val):
            score = validate()
        else:
            score = -report.epoch_loss[-1]
        report.val_prec_w.append(score)
        if score > best_score:
            best_score, best_state, stale = score, copy.deepcopy(model.state_dict()), 0
            report.best_epoch = epoch
        else:
            stale += 1
        if max_steps is not None and step >= max_steps:
            break
        if patience is not None and stale >= patience:
            break
    if select_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return report


def train_population(train: WindowArrays, val: WindowArrays, model_config: PredictorConfig,
                     config: PopulationTrainConfig | None = None, model: IntentPredictor | None = None):
    """Train the global (teacher) predictor; returns ``(checkpoint, report, p_out)``."""
    cfg = config or PopulationTrainConfig()
    if len(train) == 0:
        raise ValueError("empty population dataset")
    torch.manual_seed(cfg.seed)
    model = model or IntentPredictor(model_config)

    def loss_fn(m, batch, idx, gen):
        return population_step_loss(m, batch, cfg, gen)

    report = fit(model, train, val, lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                 seed=cfg.seed, loss_fn=loss_fn, patience=cfg.patience, max_steps=cfg.max_steps)
    p_out = output_distribution(model, val if len(val) else train, cfg.p_out_mode)
    report.extra["val_prec_w_best"] = report.val_prec_w[report.best_epoch] if report.best_epoch >= 0 else float("nan")
    ckpt = ModelCheckpoint(model, "teacher", {"p_out": p_out.probs.tolist()})
    return ckpt, report, p_out
