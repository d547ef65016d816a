"""Distillation losses between a frozen teacher and the training student.

Five flavors: KL over output logits, MSE over pre-head token
representations, cross-entropy between intra-batch similarity matrices,
the batch-versus-queue variant of the same, and the combination of the
queue variant with logit KL. The similarity-based flavors train alongside
an unsupervised contrastive objective whose positive pair is the same
sequence under two dropout draws.

All losses are pure functions of their tensor inputs; the teacher tensors
are expected to be detached (no gradient ever flows into the teacher).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .corpus import MaskedBatch
from .model import MlmEncoder, sentence_representation

log = logging.getLogger(__name__)

LOG_EPS = 1e-12

KD_KINDS = ("logit", "rep", "contrastive", "seed", "seed_logit")

# Default loss weights: 1.0 when distilling logits, 0.1 for
# representation/similarity distillation.
ALPHA_LOGIT = 1.0
ALPHA_OTHER = 0.1


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of the teacher-student regularizer."""

    kd_kind: str = "logit"
    alpha: float = ALPHA_LOGIT
    tau_teacher: float = 0.05
    tau_student: float = 0.01
    tau_simcse: float = 0.05
    logit_positions: str = "masked"              # "masked" | "all"
    kl_direction: str = "teacher_to_student"     # KL(teacher || student) by default
    # weight of the queue-similarity term when combined with logit KD
    alpha_secondary: float = ALPHA_OTHER

    def __post_init__(self):
        if self.kd_kind not in KD_KINDS:
            raise ValueError(f"kd_kind must be one of {KD_KINDS}")
        if self.tau_teacher <= 0 or self.tau_student <= 0 or self.tau_simcse <= 0:
            raise ValueError("temperatures must be positive")
        if self.alpha < 0 or self.alpha_secondary < 0:
            raise ValueError("loss weights must be >= 0")
        if self.logit_positions not in ("masked", "all"):
            raise ValueError("logit_positions must be 'masked' or 'all'")
        if self.kl_direction not in ("teacher_to_student", "student_to_teacher"):
            raise ValueError("unknown kl_direction")

    @classmethod
    def for_kind(cls, kd_kind: str, **overrides) -> "DistillConfig":
        alpha = ALPHA_LOGIT if kd_kind in ("logit", "seed_logit") else ALPHA_OTHER
        return cls(kd_kind=kd_kind, alpha=overrides.pop("alpha", alpha), **overrides)


def logit_kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    positions: torch.Tensor,
    direction: str = "teacher_to_student",
) -> torch.Tensor:
    """Mean KL divergence between teacher and student token distributions.

    ``positions`` is a boolean mask selecting which [batch, len] positions
    participate. Default direction is KL(teacher || student).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student/teacher logit shapes differ")
    if positions.shape != student_logits.shape[:-1]:
        raise ValueError("positions mask shape must match [batch, len]")
    if not bool(positions.any()):
        raise ValueError("no positions selected for logit distillation")
    s = student_logits[positions]
    t = teacher_logits[positions]
    if direction == "student_to_teacher":
        s, t = t, s
    elif direction != "teacher_to_student":
        raise ValueError("unknown kl_direction")
    log_p_t = F.log_softmax(t, dim=-1)
    log_p_s = F.log_softmax(s, dim=-1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1).mean()


def rep_kd_loss(
    h_student: torch.Tensor,
    h_teacher: torch.Tensor,
    padding_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared difference of token representations.

    Mean reduction over positions and hidden dims keeps the loss scale
    independent of sequence length. When ``padding_mask`` is given, only
    real (non-pad) positions contribute.
    """
    if h_student.shape != h_teacher.shape:
        raise ValueError("representation shapes differ")
    diff = (h_student - h_teacher) ** 2
    if padding_mask is None:
        return diff.mean()
    if padding_mask.shape != h_student.shape[:-1]:
        raise ValueError("padding mask shape must match [batch, len]")
    return diff[padding_mask].mean()


def similarity_matrix(
    reps: torch.Tensor,
    tau: float,
    keys: torch.Tensor | None = None,
) -> torch.Tensor:
    """Row-stochastic temperature-softmaxed dot-product similarity.

    With ``keys=None`` this is the intra-batch matrix (self-similarity on
    the diagonal included in the softmax); otherwise rows are the batch
    and columns are the key set (e.g. the representation queue).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    _check_unit_rows(reps, "reps")
    if keys is None:
        keys = reps
    else:
        _check_unit_rows(keys, "keys")
    sims = reps @ keys.T / tau
    return F.softmax(sims, dim=-1)


def _check_unit_rows(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=-1)
    if bool((norms < LOG_EPS).any()):
        raise ValueError(f"{name} contains a zero vector")
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
        raise ValueError(f"{name} rows must be unit-norm")


def contrastive_kd_loss(b_teacher: torch.Tensor, b_student: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between teacher and student similarity matrices.

    loss = -(1/N) * sum_ij teacher_ij * log(student_ij), N = number of rows.
    Student entries are clamped at 1e-12 inside the log.
    """
    if b_teacher.shape != b_student.shape:
        raise ValueError("similarity matrix shapes differ")
    for name, mat in (("teacher", b_teacher), ("student", b_student)):
        row_sums = mat.detach().sum(dim=-1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-4):
            raise ValueError(f"{name} similarity matrix rows must sum to 1")
    if bool((b_student.detach() <= 0).any()):
        log.warning("student similarity matrix has nonpositive entries; clamping at %.0e", LOG_EPS)
    n_rows = b_teacher.shape[0]
    return -(b_teacher * torch.log(b_student.clamp_min(LOG_EPS))).sum() / n_rows


def seed_kd_loss(
    student_reps: torch.Tensor,
    teacher_reps: torch.Tensor,
    queue_snapshot: torch.Tensor,
    tau_teacher: float,
    tau_student: float,
) -> torch.Tensor:
    """Batch-versus-queue similarity distillation.

    Teacher and student rows are softmax-normalized over the queue columns
    with their own temperatures; the loss is the row-mean cross-entropy
    between the two [batch, queue] matrices.
    """
    if queue_snapshot.numel() == 0:
        raise ValueError("representation queue is empty")
    b_teacher = similarity_matrix(teacher_reps, tau_teacher, keys=queue_snapshot)
    b_student = similarity_matrix(student_reps, tau_student, keys=queue_snapshot)
    return contrastive_kd_loss(b_teacher, b_student)


def simcse_loss_from_reps(anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """In-batch contrastive loss: anchor i's positive is positives[i],
    its negatives are the other rows of ``positives``."""
    if anchors.shape != positives.shape:
        raise ValueError("anchor/positive shapes differ")
    if anchors.shape[0] < 2:
        raise ValueError("contrastive objective needs batch size >= 2 (no negatives otherwise)")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = anchors @ positives.T / tau
    labels = torch.arange(anchors.shape[0], device=anchors.device)
    return F.cross_entropy(logits, labels)


def simcse_loss(model: MlmEncoder, batch: MaskedBatch, tau: float = 0.05) -> torch.Tensor:
    """Two train-mode passes over the same batch; dropout provides the views."""
    if not model.training:
        raise ValueError("model must be in train mode (dropout provides the positive pair)")
    anchors = sentence_representation(model, batch)
    positives = sentence_representation(model, batch)
    return simcse_loss_from_reps(anchors, positives, tau)


def combine_losses(
    mlm_loss: torch.Tensor,
    kd_loss: torch.Tensor | None = None,
    alpha: float = 0.0,
    simcse: torch.Tensor | None = None,
    extra_kd: tuple[torch.Tensor, float] | None = None,
) -> torch.Tensor:
    """total = mlm + alpha * kd (+ secondary weighted kd) (+ contrastive aux)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    total = mlm_loss
    if kd_loss is not None:
        total = total + alpha * kd_loss
    if extra_kd is not None:
        loss, weight = extra_kd
        total = total + weight * loss
    if simcse is not None:
        total = total + simcse
    return total
