"""Loss terms for rehearsal training with dual knowledge distillation.

The total loss is a weighted sum of cross-entropy over the whole batch, a
feature-space MSE against a frozen teacher encoder, and a prediction-space
KL divergence against the teacher's class distribution. Each distillation
term is scoped either to rehearsal samples only ("R") or to the full batch
("DR"), and its weight follows the scope:

  DR: log(1 + n / (n + m))   with n old and m new classes (natural log),
  R:  sqrt(b_rehe / b_all)   per mini-batch.

With no distillation the cross-entropy weight is 1; with a single term it
is 1 - lambda_kd; with both terms it stays 1 and each term carries its own
scope's weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "KD_SCOPES",
    "KDConfig",
    "BatchComposition",
    "LossWeights",
    "LossBreakdown",
    "lambda_kd",
    "lambda_weights",
    "ce_loss",
    "kld_loss",
    "mse_feature_loss",
    "total_loss",
]

KD_SCOPES = ("none", "R", "DR")


@dataclass(frozen=True)
class KDConfig:
    """Which distillation terms are active and the data they see."""

    feature_scope: str = "none"
    pred_scope: str = "none"
    temperature: float = 1.0

    def __post_init__(self):
        for scope in (self.feature_scope, self.pred_scope):
            if scope not in KD_SCOPES:
                raise ValueError(f"scope must be one of {KD_SCOPES}, got {scope!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @property
    def any_active(self) -> bool:
        return self.feature_scope != "none" or self.pred_scope != "none"


@dataclass(frozen=True)
class BatchComposition:
    b_all: int
    b_rehe: int

    def __post_init__(self):
        if not 0 <= self.b_rehe <= self.b_all:
            raise ValueError(f"need 0 <= b_rehe <= b_all, got {self.b_rehe}/{self.b_all}")


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float
    lambda_feat: float = 0.0
    lambda_pred: float = 0.0


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted term values plus the weighted total (a graph tensor)."""

    ce: float
    kld: float
    mse: float
    total: torch.Tensor
    weights: LossWeights

    @property
    def total_value(self) -> float:
        return float(self.total.detach())


def lambda_kd(scope: str, n: int, m: int, batch: BatchComposition) -> float:
    """Distillation weight for one term given its data scope."""
    if scope == "DR":
        if n < 0 or m < 1:
            raise ValueError(f"DR scope needs n >= 0 and m >= 1, got n={n}, m={m}")
        return math.log(1.0 + n / (n + m))
    if scope == "R":
        if batch.b_all < 1:
            raise ValueError("R scope needs a non-empty mini-batch")
        return math.sqrt(batch.b_rehe / batch.b_all)
    raise ValueError(f"no weight defined for scope {scope!r}")


def lambda_weights(kd: KDConfig, n: int, m: int, batch: BatchComposition) -> LossWeights:
    """Resolve all loss weights for one mini-batch."""
    feat_on = kd.feature_scope != "none"
    pred_on = kd.pred_scope != "none"
    if not feat_on and not pred_on:
        return LossWeights(lambda_ce=1.0)
    lam_feat = lambda_kd(kd.feature_scope, n, m, batch) if feat_on else 0.0
    lam_pred = lambda_kd(kd.pred_scope, n, m, batch) if pred_on else 0.0
    if feat_on and pred_on:
        return LossWeights(lambda_ce=1.0, lambda_feat=lam_feat, lambda_pred=lam_pred)
    lam = lam_feat if feat_on else lam_pred
    assert lam <= 1.0, "single-term weight exceeded 1; schedule bounds are log 2 and 1"
    return LossWeights(lambda_ce=1.0 - lam, lambda_feat=lam_feat, lambda_pred=lam_pred)


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label outside the known class range")
    return F.cross_entropy(logits, labels)


def kld_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """KL(teacher || student) over the teacher's classes, mean over batch.

    The student's logits are sliced to the teacher's class range and
    re-normalized, so the term is a proper KL even though the student also
    scores newer classes. Both logit sets are divided by ``temperature``
    before the softmax.
    """
    n_old = teacher_logits.shape[1]
    if n_old < 1:
        raise ValueError("teacher must cover at least one class")
    if student_logits.shape[1] < n_old:
        raise ValueError("student must cover every teacher class")
    log_p_teacher = F.log_softmax(teacher_logits / temperature, dim=1)
    log_p_student = F.log_softmax(student_logits[:, :n_old] / temperature, dim=1)
    per_sample = (log_p_teacher.exp() * (log_p_teacher - log_p_student)).sum(dim=1)
    return per_sample.mean()


def mse_feature_loss(teacher_emb: torch.Tensor, student_emb: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared distance between embeddings."""
    if teacher_emb.shape != student_emb.shape:
        raise ValueError(
            f"embedding shapes differ: {tuple(teacher_emb.shape)} vs {tuple(student_emb.shape)}"
        )
    return ((teacher_emb - student_emb) ** 2).sum(dim=1).mean()


def _scoped(rows: torch.Tensor, scope: str, rehearsal_mask: torch.Tensor) -> torch.Tensor:
    return rows[rehearsal_mask] if scope == "R" else rows


def total_loss(
    kd: KDConfig,
    student_logits: torch.Tensor,
    labels: torch.Tensor,
    *,
    n_old: int,
    n_new: int,
    rehearsal_mask: torch.Tensor | None = None,
    student_emb: torch.Tensor | None = None,
    teacher_logits: torch.Tensor | None = None,
    teacher_emb: torch.Tensor | None = None,
) -> LossBreakdown:
    """Assemble the weighted loss for one mini-batch.

    Cross-entropy always covers the whole batch. Each active distillation
    term covers the samples its scope selects; a rehearsal-only term on a
    batch without rehearsal samples contributes zero. Teacher outputs are
    required only when the matching term has nonzero weight.
    """
    b_all = student_logits.shape[0]
    if rehearsal_mask is None:
        rehearsal_mask = torch.zeros(b_all, dtype=torch.bool)
    batch = BatchComposition(b_all=b_all, b_rehe=int(rehearsal_mask.sum()))
    weights = lambda_weights(kd, n_old, n_new, batch)

    ce = ce_loss(student_logits, labels)
    total = weights.lambda_ce * ce
    kld_value = 0.0
    mse_value = 0.0

    if weights.lambda_feat > 0.0:
        if teacher_emb is None or student_emb is None:
            raise ValueError("feature distillation is active but embeddings are missing")
        t = _scoped(teacher_emb, kd.feature_scope, rehearsal_mask)
        s = _scoped(student_emb, kd.feature_scope, rehearsal_mask)
        if t.shape[0] > 0:
            mse = mse_feature_loss(t, s)
            total = total + weights.lambda_feat * mse
            mse_value = float(mse.detach())

    if weights.lambda_pred > 0.0:
        if teacher_logits is None:
            raise ValueError("prediction distillation is active but teacher logits are missing")
        t = _scoped(teacher_logits, kd.pred_scope, rehearsal_mask)
        s = _scoped(student_logits, kd.pred_scope, rehearsal_mask)
        if t.shape[0] > 0:
            kld = kld_loss(t, s, kd.temperature)
            total = total + weights.lambda_pred * kld
            kld_value = float(kld.detach())

    return LossBreakdown(
        ce=float(ce.detach()),
        kld=kld_value,
        mse=mse_value,
        total=total,
        weights=weights,
    )
