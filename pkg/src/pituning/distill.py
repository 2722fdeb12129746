"""Teacher-to-student distillation with a temperature-softened KL term and a hard CE term."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import WindowArrays
from .encoder import BackboneConfig
from .model import IntentPredictor, ModelCheckpoint, PredictorConfig, predict_logits
from .population import TrainingReport, fit


@dataclass
class DistillConfig:
    temperature: float = 1.0
    alpha: float = 0.5
    student_layers: int = 4
    student_heads: int | None = None
    student_embed_dim: int | None = None   # defaults to the teacher's
    kl_direction: str = "student_first"    # or "teacher_first"
    lr: float = 0.01
    batch_size: int = 64
    max_epochs: int = 10
    patience: int | None = 3
    select_by: str = "agreement"           # best epoch by teacher agreement or by "prec_w"
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.kl_direction not in ("student_first", "teacher_first"):
            raise ValueError("kl_direction must be 'student_first' or 'teacher_first'")
        if self.select_by not in ("agreement", "prec_w"):
            raise ValueError("select_by must be 'agreement' or 'prec_w'")


def soft_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 1.0,
              direction: str = "student_first") -> torch.Tensor:
    """Batch-mean KL between temperature-softened distributions.

    ``student_first`` computes ``KL(p_student || p_teacher)``; the teacher side
    is detached so gradients reach the student only.  No ``T**2`` rescaling.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    log_s = F.log_softmax(student_logits / temperature, dim=-1)
    log_t = F.log_softmax(teacher_logits.detach() / temperature, dim=-1)
    if direction == "student_first":
        kl = (log_s.exp() * (log_s - log_t)).sum(-1)
    elif direction == "teacher_first":
        kl = (log_t.exp() * (log_t - log_s)).sum(-1)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return kl.mean()


def distill_loss(student_logits, teacher_logits, target, config: DistillConfig):
    """Return ``(total, soft, hard)`` with total = alpha * soft + (1 - alpha) * hard."""
    soft = soft_loss(student_logits, teacher_logits, config.temperature, config.kl_direction)
    hard = F.cross_entropy(student_logits, torch.as_tensor(target, dtype=torch.long))
    return config.alpha * soft + (1.0 - config.alpha) * hard, soft, hard


def student_config(teacher: PredictorConfig, cfg: DistillConfig) -> PredictorConfig:
    d = cfg.student_embed_dim or teacher.embed_dim
    heads = cfg.student_heads or teacher.backbone.n_heads
    if (4 * d) % heads:
        raise ValueError(f"student width {4 * d} not divisible by {heads} heads")
    backbone = BackboneConfig(n_layers=cfg.student_layers, model_width=4 * d, n_heads=heads,
                              ff_width=None, dropout=teacher.backbone.dropout)
    return PredictorConfig(teacher.n_locations, teacher.n_timeslots, teacher.n_events, teacher.n_intents,
                           window=teacher.window, embed_dim=d, backbone=backbone,
                           attention_hidden=teacher.attention_hidden, head_hidden=teacher.head_hidden,
                           use_iat=teacher.use_iat, normalize_attention=teacher.normalize_attention)


@dataclass
class StudentResult:
    checkpoint: ModelCheckpoint
    report: TrainingReport
    agreement: float
    teacher_params: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return self.checkpoint.param_count


def train_student(teacher: ModelCheckpoint | None, train: WindowArrays, val: WindowArrays,
                  config: DistillConfig | None = None, base_config: PredictorConfig | None = None) -> StudentResult:
    """Fit a smaller student to the teacher's logits and the labels.

    With ``teacher=None`` the student is trained on labels alone (needs
    ``base_config``); this is the no-teacher reference for ``alpha = 0``.
    """
    cfg = config or DistillConfig()
    if teacher is None and base_config is None:
        raise ValueError("need a teacher or a base config")
    base = teacher.config if teacher is not None else base_config
    scfg = student_config(base, cfg)
    torch.manual_seed(cfg.seed)
    student = IntentPredictor(scfg)
    if teacher is not None and student.param_count() >= teacher.param_count:
        raise ValueError(f"student ({student.param_count()} params) is not smaller than the teacher "
                         f"({teacher.param_count})")

    if teacher is not None:
        t_model = teacher.model
        t_model.eval()
        teacher_logits = torch.from_numpy(predict_logits(t_model, train)).float()
    else:
        teacher_logits = None

    def loss_fn(m, batch, idx, gen):
        loc, wd, ts, ev, y = batch
        logits = m(loc, wd, ts, ev).logits
        if teacher_logits is None:
            hard = F.cross_entropy(logits, y)
            return hard, torch.zeros(()), hard
        return distill_loss(logits, teacher_logits[torch.from_numpy(idx)], y, cfg)

    score_fn = None
    if teacher is not None and len(val):
        teacher_val = predict_logits(t_model, val).argmax(1)

        def agreement_with_teacher(m, arrays):
            return float(np.mean(predict_logits(m, arrays).argmax(1) == teacher_val))

        if cfg.select_by == "agreement":
            score_fn = agreement_with_teacher

    report = fit(student, train, val, lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                 seed=cfg.seed, loss_fn=loss_fn, patience=cfg.patience, score_fn=score_fn,
                 report=TrainingReport(score_name="val_agreement" if score_fn else "val_prec_w"))
    agreement = float("nan")
    if teacher is not None and len(val):
        agreement = agreement_with_teacher(student, val)
    report.extra["teacher_agreement"] = agreement
    ckpt = ModelCheckpoint(student, "student", {"teacher_agreement": agreement})
    t_params = teacher.param_count if teacher is not None else 0
    return StudentResult(ckpt, report, agreement, t_params)
