"""Individual-level tuning: forgotten/retained intent sets, adaptive unlearning, fine-tuning."""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import IntentDistribution, WindowArrays
from .model import ModelCheckpoint, predict_logits, tensors
from .population import TrainingReport, fit


@dataclass
class ForgetPlan:
    user_id: int
    forget: frozenset[int]
    retain: frozenset[int]
    provenance: dict[int, str] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.forget

    def to_text(self) -> str:
        prov = ",".join(f"{i}:{self.provenance[i]}" for i in sorted(self.provenance))
        return (f"{self.user_id}, forget={sorted(self.forget)}, retain={sorted(self.retain)}, "
                f"provenance={{{prov}}}")

    @classmethod
    def from_text(cls, line: str) -> "ForgetPlan":
        m = re.fullmatch(r"\s*(-?\d+), forget=\[(.*?)\], retain=\[(.*?)\], provenance=\{(.*?)\}\s*", line)
        if not m:
            raise ValueError(f"malformed forget plan: {line!r}")
        ints = lambda s: frozenset(int(x) for x in s.split(",") if x.strip())  # noqa: E731
        prov = {}
        for item in filter(None, m.group(4).split(",")):
            k, v = item.split(":")
            prov[int(k)] = v
        return cls(int(m.group(1)), ints(m.group(2)), ints(m.group(3)), prov)


def manage_intents(p_out: IntentDistribution, p_pop: IntentDistribution, p_in: IntentDistribution,
                   threshold: float = 0.01, user_id: int = -1) -> ForgetPlan:
    """Static rule: ``P_out < threshold``.  Dynamic rule: ``P_pop < 1/N`` and ``P_in > 1/N``."""
    out, pop, ind = (np.asarray(d.probs, dtype=float) for d in (p_out, p_pop, p_in))
    if not len(out) == len(pop) == len(ind):
        raise ValueError("distributions differ in length")
    n = len(out)
    static = set(np.flatnonzero(out < threshold).tolist())
    dynamic = set(np.flatnonzero((pop < 1.0 / n) & (ind > 1.0 / n)).tolist())
    forget = static | dynamic
    prov = {i: "both" if i in static and i in dynamic else ("static" if i in static else "dynamic")
            for i in forget}
    return ForgetPlan(user_id, frozenset(forget), frozenset(set(range(n)) - forget), prov)


def unlearning_loss(logits: torch.Tensor, labels, plan: ForgetPlan, lam: float = 1.0,
                    retain_term: torch.Tensor | None = None, forget_term: torch.Tensor | None = None):
    """``lam * CE(retain samples) - CE(forget samples)``; returns ``(total, retain, forget)``.

    Samples are split by label; an empty subset contributes 0.  ``retain_term``
    and ``forget_term`` replace the respective CE when given (divergence-from-
    original variants).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    forget_ids = torch.tensor(sorted(plan.forget), dtype=torch.long)
    is_forget = torch.isin(labels, forget_ids)
    zero = logits.sum() * 0.0
    if retain_term is None:
        retain = F.cross_entropy(logits[~is_forget], labels[~is_forget]) if bool((~is_forget).any()) else zero
    else:
        retain = retain_term
    if forget_term is not None:
        forget = forget_term
    else:
        forget = F.cross_entropy(logits[is_forget], labels[is_forget]) if bool(is_forget.any()) else zero
    return lam * retain - forget, retain, forget


@dataclass
class UnlearnConfig:
    lam: float = 1.0
    threshold: float = 0.01
    steps: int = 20
    lr: float = 0.01
    batch_size: int = 64
    retain_floor: float = 0.8      # fraction of the pre-unlearning retain accuracy
    retain_mode: str = "ce"        # "ce" against labels, or "kl" to the original model
    forget_mode: str = "ce"        # "ce" against labels, or "kl" away from the original model
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.retain_mode not in ("ce", "kl"):
            raise ValueError("retain_mode must be 'ce' or 'kl'")
        if self.forget_mode not in ("ce", "kl"):
            raise ValueError("forget_mode must be 'ce' or 'kl'")


@dataclass
class FinetuneConfig:
    lr: float = 0.01
    batch_size: int = 32
    max_epochs: int = 5
    patience: int | None = None
    keep_initial: bool = True      # the starting weights compete in best-epoch selection
    seed: int = 0


@dataclass
class UnlearnReport:
    steps: int = 0
    stopped_by_floor: bool = False
    pre_forget_ce: float = float("nan")
    post_forget_ce: float = float("nan")
    pre_retain_ce: float = float("nan")
    post_retain_ce: float = float("nan")
    pre_retain_acc: float = float("nan")
    post_retain_acc: float = float("nan")
    loss: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        keys = ("steps", "stopped_by_floor", "pre_forget_ce", "post_forget_ce", "pre_retain_ce",
                "post_retain_ce", "pre_retain_acc", "post_retain_acc")
        return "".join(f"{k}: {getattr(self, k)}\n" for k in keys)


def _subset_stats(model, arrays: WindowArrays, plan: ForgetPlan):
    """Mean CE on forget- and retain-labeled samples plus retain accuracy."""
    if len(arrays) == 0:
        return float("nan"), float("nan"), float("nan")
    logits = torch.from_numpy(predict_logits(model, arrays))
    y = torch.from_numpy(arrays.targets)
    is_f = torch.isin(y, torch.tensor(sorted(plan.forget), dtype=torch.long))
    ce = F.cross_entropy(logits, y, reduction="none")
    f_ce = float(ce[is_f].mean()) if bool(is_f.any()) else float("nan")
    r_ce = float(ce[~is_f].mean()) if bool((~is_f).any()) else float("nan")
    r_acc = float((logits[~is_f].argmax(1) == y[~is_f]).double().mean()) if bool((~is_f).any()) else float("nan")
    return f_ce, r_ce, r_acc


def _kl_to(ref_logits: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Batch-mean ``KL(p_ref || p)``; 0 for an empty batch."""
    if ref_logits.shape[0] == 0:
        return logits.sum() * 0.0
    log_q = F.log_softmax(ref_logits, -1)
    return (log_q.exp() * (log_q - F.log_softmax(logits, -1))).sum(-1).mean()


def unlearn(checkpoint: ModelCheckpoint, train: WindowArrays, val: WindowArrays | None, plan: ForgetPlan,
            config: UnlearnConfig | None = None) -> tuple[ModelCheckpoint, UnlearnReport]:
    """Gradient steps on the unlearning loss over the user's own windows.

    Stops after ``config.steps`` or as soon as retain accuracy on the training
    windows drops below ``retain_floor`` times its starting value; the step
    that crossed the floor is rolled back.
    """
    cfg = config or UnlearnConfig()
    if plan.is_empty:
        raise ValueError("forget set is empty; skip unlearning")
    if len(train) == 0:
        raise ValueError("no device data")
    ckpt = checkpoint.clone()
    model = ckpt.model
    probe = val if val is not None and len(val) else train
    rep = UnlearnReport()
    rep.pre_forget_ce, rep.pre_retain_ce, _ = _subset_stats(model, probe, plan)
    _, _, start_acc = _subset_stats(model, train, plan)
    rep.pre_retain_acc = start_acc
    floor = cfg.retain_floor * start_acc if np.isfinite(start_acc) else -np.inf

    use_original = "kl" in (cfg.retain_mode, cfg.forget_mode)
    original = copy.deepcopy(model).eval() if use_original else None
    forget_ids = torch.tensor(sorted(plan.forget), dtype=torch.long)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    order = torch.randperm(len(train), generator=gen).numpy()
    pos = 0
    for step in range(cfg.steps):
        if pos >= len(order):
            order, pos = torch.randperm(len(train), generator=gen).numpy(), 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        loc, wd, ts, ev, y = tensors(train, idx)
        model.train()
        logits = model(loc, wd, ts, ev).logits
        retain_term = forget_term = None
        if original is not None:
            with torch.no_grad():
                ref = original(loc, wd, ts, ev).logits
            is_f = torch.isin(y, forget_ids)
            if cfg.retain_mode == "kl":
                retain_term = _kl_to(ref[~is_f], logits[~is_f])
            if cfg.forget_mode == "kl":
                forget_term = _kl_to(ref[is_f], logits[is_f])
        total, _, _ = unlearning_loss(logits, y, plan, cfg.lam, retain_term, forget_term)
        saved = copy.deepcopy(model.state_dict())
        opt.zero_grad()
        total.backward()
        opt.step()
        _, _, acc = _subset_stats(model, train, plan)
        if np.isfinite(acc) and acc < floor:
            model.load_state_dict(saved)
            rep.stopped_by_floor = True
            break
        rep.loss.append(total.item())
        rep.steps = step + 1
    model.eval()
    rep.post_forget_ce, rep.post_retain_ce, _ = _subset_stats(model, probe, plan)
    _, _, rep.post_retain_acc = _subset_stats(model, train, plan)
    ckpt.meta = {**ckpt.meta, "unlearned": True, "forget": sorted(plan.forget)}
    return ckpt, rep


def finetune_device(checkpoint: ModelCheckpoint, train: WindowArrays, val: WindowArrays | None,
                    config: FinetuneConfig | None = None) -> tuple[ModelCheckpoint, TrainingReport]:
    """Plain intent cross-entropy on the user's data; best epoch by validation weighted precision."""
    cfg = config or FinetuneConfig()
    if len(train) == 0:
        raise ValueError("no device data")
    ckpt = checkpoint.clone()

    def loss_fn(m, batch, idx, gen):
        loc, wd, ts, ev, y = batch
        ce = F.cross_entropy(m(loc, wd, ts, ev).logits, y)
        return ce, ce, torch.zeros(())

    report = fit(ckpt.model, train, val, lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                 seed=cfg.seed, loss_fn=loss_fn, patience=cfg.patience, keep_initial=cfg.keep_initial)
    ckpt.role = "student"
    ckpt.meta = {**ckpt.meta, "personalized": True}
    return ckpt, report
