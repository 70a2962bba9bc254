"""Discriminative-pair construction, the two losses, the optimisation loop and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import distill
from .config import RunConfig, config_from_dict, dump_config, to_dict
from .data import ArrayDataset, load_dataset, stream_seed
from .distill import Centers, EmaSchedule, TemperatureSchedule
from .edm import NoiseSpec, perturb, precondition_coeffs, sample_sigma_student
from .masking import PatchMask, sample_mask
from .network import StudentBranch, TeacherBranch, ema_manifest, parameter_manifest

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sddit-checkpoint"
CHECKPOINT_VERSION = 1
STREAMS = ("sigma", "noise", "mask")


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ViewPair:
    x0: torch.Tensor
    labels: torch.Tensor
    student_view: torch.Tensor
    teacher_view: torch.Tensor
    sigma_s: torch.Tensor
    sigma_t: torch.Tensor
    mask: PatchMask


@dataclass
class TrainState:
    config: RunConfig
    student: StudentBranch
    teacher: TeacherBranch
    centers: Centers
    optimizer: torch.optim.Optimizer
    rngs: dict[str, torch.Generator]
    step: int = 0
    steps_per_epoch: int = 1
    log: list[dict] = field(default_factory=list)


def make_rngs(seed: int) -> dict[str, torch.Generator]:
    return {name: torch.Generator().manual_seed(stream_seed(seed, name)) for name in STREAMS}


def init_state(cfg: RunConfig, steps_per_epoch: int = 1, dtype=torch.float32) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_seed(cfg.seed, "init"))
        student = StudentBranch(cfg.model).to(dtype)
    # teacher starts as an exact copy of the student encoder + head
    teacher = TeacherBranch(student)
    k = cfg.model.proj_dim
    centers = Centers.zeros(k, cfg.distill.center_momentum_cls, cfg.distill.center_momentum_patch, dtype)
    opt = torch.optim.AdamW(student.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)
    return TrainState(cfg, student, teacher, centers, opt, make_rngs(cfg.seed), 0, steps_per_epoch)


def build_views(x0: torch.Tensor, labels: torch.Tensor, cfg: RunConfig, rngs: dict[str, torch.Generator]) -> ViewPair:
    """Student view at a log-normal sigma, teacher view at the configured teacher sigma (never masked)."""
    b = x0.shape[0]
    sigma_s = sample_sigma_student(cfg.noise, rngs["sigma"], b, x0.dtype)
    fixed = cfg.teacher_sigma()
    if fixed is None:
        sigma_t = sample_sigma_student(cfg.noise, rngs["sigma"], b, x0.dtype)
    else:
        sigma_t = torch.full((b,), fixed, dtype=x0.dtype)
    student_view = perturb(x0, sigma_s, rngs["noise"])
    teacher_view = perturb(x0, sigma_t, rngs["noise"])
    mask = sample_mask(cfg.model.grid.n_patches, cfg.mask_ratio, rngs["mask"], batch=b)
    return ViewPair(x0, labels, student_view, teacher_view, sigma_s, sigma_t, mask)


def loss_weight(sigma: torch.Tensor, noise: NoiseSpec) -> torch.Tensor:
    """EDM's lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sd = noise.sigma_data
    return (sigma**2 + sd**2) / (sigma * sd) ** 2


def denoising_mse(
    denoised: torch.Tensor,
    x0: torch.Tensor,
    sigma: torch.Tensor | None = None,
    noise: NoiseSpec | None = None,
    weighting: bool = False,
) -> torch.Tensor:
    """Mean squared error over every element (all patches, all samples)."""
    err = (denoised - x0) ** 2
    if weighting:
        w = loss_weight(sigma, noise).reshape(-1, *([1] * (x0.ndim - 1)))
        err = w * err
    return err.mean()


def generative_loss(
    student: StudentBranch, views: ViewPair, noise: NoiseSpec, weighting: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(L_G, encoder tokens)``; the tokens feed the discrimination loss.

    Visible patches are encoded, hidden patches re-enter the decoder unencoded,
    and the preconditioned output is compared to ``x0`` over the whole image.
    """
    c = precondition_coeffs(views.sigma_s, noise)
    shape = (-1,) + (1,) * (views.x0.ndim - 1)
    x = views.student_view
    f, encoded = student(c.c_in.reshape(shape) * x, c.c_noise, views.labels, views.mask)
    denoised = c.c_skip.reshape(shape) * x + c.c_out.reshape(shape) * f
    return denoising_mse(denoised, views.x0, views.sigma_s, noise, weighting), encoded


def teacher_logits(teacher: TeacherBranch, views: ViewPair, noise: NoiseSpec) -> torch.Tensor:
    with torch.no_grad():
        c = precondition_coeffs(views.sigma_t, noise)
        shape = (-1,) + (1,) * (views.x0.ndim - 1)
        encoded = teacher(c.c_in.reshape(shape) * views.teacher_view, c.c_noise, views.labels)
        return teacher.head(encoded)


def compute_losses(state: TrainState, views: ViewPair, tau_t: float) -> dict:
    """Forward pass of both objectives. ``L_D_*`` are zero tensors when disabled."""
    cfg = state.config
    l_g, encoded = generative_loss(state.student, views, cfg.noise, cfg.edm_loss_weighting)
    out = {"L_G": l_g}
    if cfg.disable_L_D:
        zero = l_g.new_zeros(())
        out.update(L_D_cls=zero, L_D_patch=zero, t_logits=None)
        return out
    s_logits = state.student.head(encoded)
    t_logits = teacher_logits(state.teacher, views, cfg.noise)
    l_cls, l_patch = distill.discrimination_loss(
        t_logits[:, 0], t_logits[:, 1:], s_logits[:, 0], s_logits[:, 1:],
        views.mask, state.centers, cfg.distill.tau_s, tau_t,
    )
    out.update(L_D_cls=l_cls, L_D_patch=l_patch, t_logits=t_logits)
    return out


def _schedules(state: TrainState) -> tuple[float, float]:
    d = state.config.distill
    epoch = state.step / state.steps_per_epoch
    return distill.schedules(
        state.step,
        state.config.total_steps,
        epoch,
        TemperatureSchedule(d.tau_s, d.tau_t_start, d.tau_t_end, d.warmup_epochs),
        EmaSchedule(d.beta_start, d.beta_end),
    )


def train_step(state: TrainState, batch: tuple[torch.Tensor, torch.Tensor]) -> dict:
    """One optimiser step on ``L_G + L_D``, then EMA and center updates. Mutates ``state``."""
    x0, labels = batch
    x0 = x0.to(next(state.student.parameters()).dtype)
    beta, tau_t = _schedules(state)
    views = build_views(x0, labels, state.config, state.rngs)
    losses = compute_losses(state, views, tau_t)
    total = losses["L_G"] + losses["L_D_cls"] + losses["L_D_patch"]
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}; sigma_s={views.sigma_s.tolist()}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    grads = [p.grad for p in state.student.parameters() if p.grad is not None]
    grad_norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    state.optimizer.step()
    distill.ema_update(state.teacher, state.student, beta)
    t_logits = losses["t_logits"]
    entropy = None
    if t_logits is not None:
        entropy = distill.teacher_entropy(t_logits[:, 0], t_logits[:, 1:], state.centers, tau_t)
        state.centers = distill.update_centers(state.centers, t_logits[:, 0], t_logits[:, 1:])
    record = {
        "step": state.step,
        "L_G": float(losses["L_G"].detach()),
        "L_D_cls": float(losses["L_D_cls"].detach()),
        "L_D_patch": float(losses["L_D_patch"].detach()),
        "beta": beta,
        "tau_t": tau_t,
        "teacher_entropy": entropy,
        "grad_norm": grad_norm,
    }
    state.step += 1
    return record


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": to_dict(state.config),
        "manifest": [[n, list(s)] for n, s in parameter_manifest(state.student)],
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "centers": {
            "c_cls": state.centers.c_cls,
            "c_patch": state.centers.c_patch,
            "m_c": state.centers.m_c,
            "m_p": state.centers.m_p,
        },
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "rngs": {name: g.get_state() for name, g in state.rngs.items()},
        "dtype": str(next(state.student.parameters()).dtype),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a full training state; raises :class:`CheckpointError` rather than returning partial state."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an sddit checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    try:
        cfg = config_from_dict(payload["config"])
        dtype = getattr(torch, payload["dtype"].removeprefix("torch."))
        state = init_state(cfg, payload["steps_per_epoch"], dtype)
        manifest = [[n, list(s)] for n, s in parameter_manifest(state.student)]
        if manifest != payload["manifest"]:
            raise CheckpointError(f"{path}: parameter manifest does not match the configured model")
        state.student.load_state_dict(payload["student"], strict=True)
        state.teacher.load_state_dict(payload["teacher"], strict=True)
        c = payload["centers"]
        state.centers = Centers(c["c_cls"], c["c_patch"], c["m_c"], c["m_p"])
        state.optimizer.load_state_dict(payload["optimizer"])
        state.step = payload["step"]
        for name, g in state.rngs.items():
            g.set_state(payload["rngs"][name])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return state


def check_teacher_manifest(state: TrainState) -> None:
    if parameter_manifest(state.teacher) != ema_manifest(state.student):
        raise RuntimeError("teacher manifest diverged from the student encoder + head")


def run_training(
    cfg: RunConfig,
    dataset: ArrayDataset | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    dtype=torch.float32,
) -> TrainState:
    """Train for ``cfg.total_steps`` steps; the per-step metrics end up in ``state.log``.

    With ``out_dir`` set, writes ``config.yaml``, ``metrics.jsonl`` (one record
    per step), ``eval.jsonl`` when ``eval_interval > 0`` and checkpoints under
    ``checkpoints/``.
    """
    if dataset is None:
        dataset = load_dataset(cfg.dataset, cfg.seed, cfg.model.input_size)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    spe = dataset.steps_per_epoch(cfg.batch_size)
    if resume is not None:
        state = load_checkpoint(resume)
        state.config = cfg
    else:
        state = init_state(cfg, spe, dtype)
    out = Path(out_dir) if out_dir is not None else None
    metrics_f = eval_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        mode = "a" if resume is not None else "w"
        metrics_f = open(out / "metrics.jsonl", mode)
        if cfg.eval_interval:
            eval_f = open(out / "eval.jsonl", mode)
    t0 = time.perf_counter()
    try:
        while state.step < cfg.total_steps:
            record = train_step(state, dataset.batch_at(state.step, cfg.batch_size))
            record["wallclock"] = time.perf_counter() - t0
            state.log.append(record)
            if metrics_f is not None:
                metrics_f.write(json.dumps(record) + "\n")
            if state.step % 100 == 0:
                log.info("step %d L_G %.4f L_D %.4f", state.step, record["L_G"],
                         record["L_D_cls"] + record["L_D_patch"])
            if cfg.eval_interval and state.step % cfg.eval_interval == 0:
                from .evaluation import fid_against_dataset

                report = fid_against_dataset(state, dataset, cfg.eval_samples, seed=cfg.seed)
                report["step"] = state.step
                if eval_f is not None:
                    eval_f.write(json.dumps(report) + "\n")
                    eval_f.flush()
            if out is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(state, out / "checkpoints" / f"step_{state.step:07d}.pt")
        if out is not None:
            save_checkpoint(state, out / "checkpoints" / "final.pt")
    finally:
        for f in (metrics_f, eval_f):
            if f is not None:
                f.close()
    return state


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
