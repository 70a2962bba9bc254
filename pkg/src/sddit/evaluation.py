"""Class-conditional generation with the student branch, Frechet distance and plots."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from .data import stream_seed  # noqa: E402
from .edm import denoise, heun_sample, sampling_sigmas  # noqa: E402

PLOT_FILES = {
    "loss": "loss_curves.png",
    "entropy": "teacher_entropy.png",
    "fid": "fid_curve.png",
}


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int


def _resolve_state(state_or_path):
    if isinstance(state_or_path, (str, Path)):
        from .training import load_checkpoint

        return load_checkpoint(state_or_path)
    return state_or_path


def generate(state_or_path, class_label: int, count: int, n_steps: int | None = None, seed: int = 0,
             rho: float | None = None) -> torch.Tensor:
    """Draw ``count`` samples of one class with the full (unmasked) student branch.

    Sample ``i`` starts from its own noise stream derived from ``(seed, i)``, so
    results do not depend on ``count``. The teacher is not used.
    """
    state = _resolve_state(state_or_path)
    cfg = state.config
    model_cfg = cfg.model
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= class_label <= model_cfg.null_label:
        raise ValueError(f"class {class_label} outside [0, {model_cfg.n_classes}) (null label {model_cfg.null_label})")
    schedule = sampling_sigmas(cfg.noise, n_steps or cfg.sampler.n_steps, rho or cfg.sampler.rho)
    student = state.student
    dtype = next(student.parameters()).dtype
    shape = (model_cfg.in_channels, model_cfg.input_size, model_cfg.input_size)
    x_init = torch.stack([
        torch.randn(shape, generator=torch.Generator().manual_seed(stream_seed(seed, f"sample/{i}")), dtype=dtype)
        for i in range(count)
    ]) * schedule.sigmas[0]
    labels = torch.full((count,), class_label, dtype=torch.long)

    def network(x_in, c_noise, lab):
        return student(x_in, c_noise.expand(x_in.shape[0]), lab)[0]

    def denoiser(x, sigma, lab):
        return denoise(network, x, sigma, lab, cfg.noise)

    was_training = student.training
    student.eval()
    try:
        return heun_sample(denoiser, schedule, labels, x_init.shape, x_init=x_init)
    finally:
        student.train(was_training)


def pixel_features(images: torch.Tensor) -> np.ndarray:
    """Default feature extractor: flattened pixels."""
    return images.detach().reshape(images.shape[0], -1).double().numpy()


def feature_stats(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("feature_stats needs a (count >= 2, d) array")
    mu = features.mean(axis=0)
    centred = features - mu
    sigma = centred.T @ centred / (features.shape[0] - 1)
    return FeatureStats(mu, (sigma + sigma.T) / 2, features.shape[0])


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min(initial=0.0) < -tol:
        raise ValueError(f"covariance is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the cross term is computed as ``Tr((A^{1/2} B A^{1/2})^{1/2})``,
    which only needs symmetric eigendecompositions.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions differ")
    root_a = _psd_sqrt(a.sigma, tol)
    _psd_sqrt(b.sigma, tol)
    inner = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min(initial=0.0) < -tol:
        raise ValueError("cross-covariance product is not positive semi-definite")
    cross = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mu - b.mu
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * cross
    return float(max(value, 0.0))


def fid_against_dataset(state, dataset, n_fake: int, seed: int = 0,
                        features: Callable[[torch.Tensor], np.ndarray] = pixel_features,
                        n_steps: int | None = None) -> dict:
    """Frechet distance between the data and ``n_fake`` samples spread evenly over classes."""
    n_classes = len(dataset.class_names)
    per_class = [n_fake // n_classes + (c < n_fake % n_classes) for c in range(n_classes)]
    fakes = [generate(state, c, k, n_steps=n_steps, seed=seed + 7919 * c) for c, k in enumerate(per_class) if k]
    fake = torch.cat(fakes)
    real_f, fake_f = features(dataset.images), features(fake)
    fid = frechet_distance(feature_stats(real_f), feature_stats(fake_f))
    return {"n_real": int(real_f.shape[0]), "n_fake": int(fake_f.shape[0]), "d": int(real_f.shape[1]), "fid": fid}


def to_uint8(images: torch.Tensor) -> np.ndarray:
    x = ((images.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def _pil(arr: np.ndarray) -> Image.Image:
    return Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)


def save_images(images: torch.Tensor, out_dir: str | Path, prefix: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, arr in enumerate(to_uint8(images)):
        p = out_dir / f"{prefix}_{i:04d}.png"
        _pil(arr).save(p)
        paths.append(p)
    return paths


def save_grid(images: torch.Tensor, path: str | Path, ncol: int = 8, scale: int = 4) -> Path:
    arr = to_uint8(images)
    n, h, w, c = arr.shape
    ncol = min(ncol, n)
    nrow = math.ceil(n / ncol)
    grid = np.zeros((nrow * (h + 1) + 1, ncol * (w + 1) + 1, c), dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, ncol)
        grid[1 + r * (h + 1): 1 + r * (h + 1) + h, 1 + q * (w + 1): 1 + q * (w + 1) + w] = arr[i]
    img = _pil(grid)
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def _sweep_key(value) -> tuple:
    return (0, float(value), "") if isinstance(value, (int, float)) else (1, math.inf, str(value))


def plot_sweep(param: str, results: list[dict], out_dir: str | Path, metric: str = "fid") -> Path:
    """Metric vs swept value; numeric values ascending, non-numeric ones as dashed reference lines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: _sweep_key(r["value"]))
    numeric = [r for r in results if isinstance(r["value"], (int, float))]
    other = [r for r in results if not isinstance(r["value"], (int, float))]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if numeric:
        ax.plot([r["value"] for r in numeric], [r[metric] for r in numeric], "o-", color="tab:red", label=param)
        if param == "teacher_sigma" and len(numeric) > 1:
            ax.set_xscale("log")
    for i, r in enumerate(other):
        ax.axhline(r[metric], ls="--", color=f"C{i + 1}", label=str(r["value"]))
    ax.set_xlabel(param)
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / f"sweep_{param}.png")


def emit_plots(metrics: Iterable[dict], out_dir: str | Path, eval_records: Iterable[dict] | None = None,
               sweeps: dict[str, list[dict]] | None = None) -> list[Path]:
    """Write ``loss_curves.png``, ``teacher_entropy.png``, ``fid_curve.png`` and ``sweep_<param>.png``.

    Files whose series are empty are skipped.
    """
    metrics = list(metrics)
    if not metrics:
        raise ValueError("metrics log is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    steps = [m["step"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("L_G", "L_D_cls", "L_D_patch"):
        ax.plot(steps, [m[key] for m in metrics], label=key, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend()
    fig.tight_layout()
    written.append(_save(fig, out_dir / PLOT_FILES["loss"]))

    ent = [(m["step"], m["teacher_entropy"]) for m in metrics if m.get("teacher_entropy") is not None]
    if ent:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(*zip(*ent), lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("teacher entropy (nats)")
        fig.tight_layout()
        written.append(_save(fig, out_dir / PLOT_FILES["entropy"]))

    evals = list(eval_records or [])
    if evals:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot([e["step"] for e in evals], [e["fid"] for e in evals], "o-")
        ax.set_xlabel("step")
        ax.set_ylabel("FID (pixel features)")
        fig.tight_layout()
        written.append(_save(fig, out_dir / PLOT_FILES["fid"]))

    for param, results in (sweeps or {}).items():
        if results:
            written.append(plot_sweep(param, results, out_dir))
    return written


def write_fid_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path
