"""Teacher/student discrimination objective: sharpening, centering, cross-entropy, EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import nn

from .masking import PatchMask, _gather

LOG_EPS = 1e-12


@dataclass(frozen=True)
class Centers:
    c_cls: torch.Tensor
    c_patch: torch.Tensor
    m_c: float = 0.9
    m_p: float = 0.9

    @classmethod
    def zeros(cls, k: int, m_c: float = 0.9, m_p: float = 0.9, dtype=torch.float32) -> "Centers":
        return cls(torch.zeros(k, dtype=dtype), torch.zeros(k, dtype=dtype), m_c, m_p)


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_s: float = 0.1
    tau_t_start: float = 0.09
    tau_t_end: float = 0.099
    warmup_epochs: float = 5

    def __post_init__(self):
        if min(self.tau_s, self.tau_t_start, self.tau_t_end) <= 0:
            raise ValueError("temperatures must be positive")
        if max(self.tau_t_start, self.tau_t_end) >= self.tau_s:
            raise ValueError("teacher temperature must stay below the student temperature")


@dataclass(frozen=True)
class EmaSchedule:
    beta_start: float = 0.996
    beta_end: float = 0.999

    def __post_init__(self):
        if not 0 <= self.beta_start <= self.beta_end <= 1:
            raise ValueError("need 0 <= beta_start <= beta_end <= 1")


def sharpen_softmax(logits: torch.Tensor, temperature: float, center: torch.Tensor | None = None) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if center is not None:
        logits = logits - center
    return torch.softmax(logits / temperature, dim=-1)


def token_cross_entropy(p_teacher: torch.Tensor, p_student: torch.Tensor) -> torch.Tensor:
    """Per-row ``-sum_k p_T[k] log p_S[k]`` with the teacher held constant."""
    return -(p_teacher.detach() * torch.log(p_student.clamp_min(LOG_EPS))).sum(dim=-1)


def _ce_from_logits(p_teacher: torch.Tensor, student_logits: torch.Tensor, tau_s: float) -> torch.Tensor:
    # same quantity as token_cross_entropy(p_T, softmax(s / tau_s)) without the underflow
    logp = torch.log_softmax(student_logits / tau_s, dim=-1).clamp_min(math.log(LOG_EPS))
    return -(p_teacher.detach() * logp).sum(dim=-1)


def discrimination_loss(
    teacher_cls: torch.Tensor,
    teacher_patch: torch.Tensor,
    student_cls: torch.Tensor,
    student_patch: torch.Tensor,
    mask: PatchMask | None,
    centers: Centers,
    tau_s: float,
    tau_t: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(cls term, patch term)``; their sum is the discrimination loss.

    Teacher logits cover all ``n`` patches, student logits only the visible ones.
    Patch pairs are matched by grid index. Both terms are averaged over the batch;
    the patch term is additionally averaged over the visible tokens.
    """
    if student_patch.shape[-2] == 0:
        raise ValueError("discrimination loss needs at least one visible token")
    teacher_cls = teacher_cls.detach()
    teacher_patch = teacher_patch.detach()
    if mask is not None:
        teacher_patch = _gather(teacher_patch, mask.visible_idx)
    if teacher_patch.shape != student_patch.shape:
        raise ValueError("teacher/student patch logits do not pair up")
    p_t_cls = sharpen_softmax(teacher_cls, tau_t, centers.c_cls)
    p_t_patch = sharpen_softmax(teacher_patch, tau_t, centers.c_patch)
    l_cls = _ce_from_logits(p_t_cls, student_cls, tau_s).mean()
    l_patch = _ce_from_logits(p_t_patch, student_patch, tau_s).mean()
    return l_cls, l_patch


def teacher_entropy(teacher_cls: torch.Tensor, teacher_patch: torch.Tensor, centers: Centers, tau_t: float) -> float:
    """Mean entropy of the centred, sharpened teacher distributions (collapse monitor)."""
    with torch.no_grad():
        logp_cls = torch.log_softmax((teacher_cls - centers.c_cls) / tau_t, dim=-1)
        logp_patch = torch.log_softmax((teacher_patch - centers.c_patch) / tau_t, dim=-1)
        h_cls = -(logp_cls.exp() * logp_cls).sum(-1).reshape(-1)
        h_patch = -(logp_patch.exp() * logp_patch).sum(-1).reshape(-1)
        return float(torch.cat([h_cls, h_patch]).mean())


def update_centers(centers: Centers, teacher_cls: torch.Tensor, teacher_patch: torch.Tensor) -> Centers:
    """EMA of the raw teacher head outputs: CLS over the batch, patches over batch and tokens."""
    if teacher_cls.shape[0] == 0 or teacher_patch.numel() == 0:
        raise ValueError("cannot update centers from an empty batch")
    with torch.no_grad():
        mean_cls = teacher_cls.reshape(-1, teacher_cls.shape[-1]).mean(0)
        mean_patch = teacher_patch.reshape(-1, teacher_patch.shape[-1]).mean(0)
        c_cls = centers.m_c * centers.c_cls + (1 - centers.m_c) * mean_cls
        c_patch = centers.m_p * centers.c_patch + (1 - centers.m_p) * mean_patch
    return replace(centers, c_cls=c_cls, c_patch=c_patch)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, beta: float) -> None:
    """In place: ``teacher <- beta * teacher + (1 - beta) * student`` for each shared name."""
    src = dict(student.named_parameters())
    dst = dict(teacher.named_parameters())
    missing = [n for n in dst if n not in src or src[n].shape != dst[n].shape]
    if missing:
        raise ValueError(f"teacher/student manifest mismatch: {missing[:3]}")
    for name, p_t in dst.items():
        p_t.mul_(beta).add_(src[name].detach(), alpha=1 - beta)


def schedules(
    step: int,
    total_steps: int,
    epoch: float,
    temps: TemperatureSchedule = TemperatureSchedule(),
    ema: EmaSchedule = EmaSchedule(),
) -> tuple[float, float]:
    """``(beta, tau_t)``: cosine EMA ramp over training, linear teacher-temperature warmup."""
    progress = min(max(step / total_steps, 0.0), 1.0) if total_steps > 0 else 0.0
    if progress <= 0.0:
        beta = ema.beta_start
    elif progress >= 1.0:
        beta = ema.beta_end
    else:
        beta = ema.beta_end - (ema.beta_end - ema.beta_start) * (math.cos(math.pi * progress) + 1) / 2
    if epoch >= temps.warmup_epochs:
        tau_t = temps.tau_t_end
    else:
        tau_t = temps.tau_t_start + (temps.tau_t_end - temps.tau_t_start) * epoch / temps.warmup_epochs
    return beta, tau_t
