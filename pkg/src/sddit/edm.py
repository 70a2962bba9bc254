"""EDM noise model: perturbation, sigma distributions, preconditioning and the Heun PF-ODE sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import torch

Denoiser = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


class SamplerDivergenceError(RuntimeError):
    """Raised when the sampler trajectory becomes non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite value in sampler trajectory at step {step}")
        self.step = step


@dataclass(frozen=True)
class NoiseSpec:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.p_std < 0:
            raise ValueError("p_std must be non-negative")


@dataclass(frozen=True)
class SigmaSchedule:
    sigmas: tuple[float, ...]
    n_steps: int = 40
    rho: float = 7.0

    def __len__(self) -> int:
        return len(self.sigmas)


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: Any
    c_out: Any
    c_in: Any
    c_noise: Any


def sample_sigma_student(
    noise: NoiseSpec, rng: torch.Generator, size: int | tuple[int, ...] = (), dtype=torch.float32
) -> torch.Tensor:
    """Draw training noise levels with ``ln(sigma) ~ N(p_mean, p_std^2)``."""
    if isinstance(size, int):
        size = (size,)
    z = torch.randn(size, generator=rng, dtype=dtype)
    return torch.exp(noise.p_mean + noise.p_std * z)


def _expand(sigma: torch.Tensor | float, x: torch.Tensor) -> torch.Tensor:
    # per-sample sigma of shape (B,) broadcast against x of shape (B, ...)
    sigma = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
    if sigma.ndim == 0:
        return sigma
    return sigma.reshape(sigma.shape + (1,) * (x.ndim - sigma.ndim))


def perturb(x0: torch.Tensor, sigma: torch.Tensor | float, rng: torch.Generator) -> torch.Tensor:
    """Return ``x0 + n`` with ``n ~ N(0, sigma^2 I)``."""
    if not torch.isfinite(x0).all():
        raise ValueError("perturb: x0 contains non-finite values")
    s = _expand(sigma, x0)
    if (s < 0).any():
        raise ValueError("perturb: sigma must be non-negative")
    n = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return x0 + s * n


def precondition_coeffs(sigma: torch.Tensor | float, noise: NoiseSpec) -> PreconditionCoeffs:
    if isinstance(sigma, torch.Tensor):
        if (sigma <= 0).any():
            raise ValueError("precondition_coeffs: sigma must be positive")
        sd = noise.sigma_data
        denom = torch.sqrt(sigma**2 + sd**2)
        return PreconditionCoeffs(
            c_skip=sd**2 / (sigma**2 + sd**2),
            c_out=sigma * sd / denom,
            c_in=1.0 / denom,
            c_noise=torch.log(sigma) / 4,
        )
    sigma = float(sigma)
    if sigma <= 0:
        raise ValueError("precondition_coeffs: sigma must be positive")
    sd = noise.sigma_data
    denom = math.sqrt(sigma**2 + sd**2)
    return PreconditionCoeffs(
        c_skip=sd**2 / (sigma**2 + sd**2),
        c_out=sigma * sd / denom,
        c_in=1.0 / denom,
        c_noise=math.log(sigma) / 4,
    )


def denoise(
    network_fn: Callable[[torch.Tensor, Any, Any], torch.Tensor],
    x: torch.Tensor,
    sigma: torch.Tensor | float,
    condition: Any,
    noise: NoiseSpec = NoiseSpec(),
) -> torch.Tensor:
    """Preconditioned denoiser ``c_skip x + c_out F(c_in x, c_noise, condition)``.

    ``sigma`` is a scalar or a per-sample vector; ``network_fn`` receives
    ``c_noise`` with the same layout as ``sigma``.
    """
    if not isinstance(sigma, torch.Tensor):
        sigma = torch.tensor(float(sigma), dtype=x.dtype)
    c = precondition_coeffs(sigma.to(x.dtype), noise)
    f = network_fn(_expand(c.c_in, x) * x, c.c_noise, condition)
    if f.shape != x.shape:
        raise ValueError(f"network output shape {tuple(f.shape)} != input shape {tuple(x.shape)}")
    return _expand(c.c_skip, x) * x + _expand(c.c_out, x) * f


def score(D: torch.Tensor, x_sigma: torch.Tensor, sigma: torch.Tensor | float) -> torch.Tensor:
    if D.shape != x_sigma.shape:
        raise ValueError("score: shape mismatch")
    s = _expand(sigma, x_sigma)
    if (s <= 0).any():
        raise ValueError("score: sigma must be positive")
    return (D - x_sigma) / s**2


def sampling_sigmas(noise: NoiseSpec, n_steps: int = 40, rho: float = 7.0) -> SigmaSchedule:
    """Karras time-step discretisation with a trailing zero.

    ``n_steps == 1`` degenerates to ``[sigma_max, 0]``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if n_steps == 1:
        return SigmaSchedule((float(noise.sigma_max), 0.0), n_steps, rho)
    hi = noise.sigma_max ** (1 / rho)
    lo = noise.sigma_min ** (1 / rho)
    sigmas = [(hi + i / (n_steps - 1) * (lo - hi)) ** rho for i in range(n_steps)]
    # pin endpoints against pow round-off
    sigmas[0] = float(noise.sigma_max)
    sigmas[-1] = float(noise.sigma_min)
    return SigmaSchedule(tuple(sigmas) + (0.0,), n_steps, rho)


def heun_sample(
    denoiser: Denoiser,
    schedule: SigmaSchedule,
    condition: Any,
    shape: tuple[int, ...],
    rng: torch.Generator | None = None,
    seed: int | None = None,
    dtype=torch.float32,
    x_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic second-order Heun integration of the EDM probability-flow ODE.

    Starts from ``x ~ N(0, sigma_0^2 I)`` (or from ``x_init`` verbatim) and integrates ``dx/dsigma = (x - D(x, sigma)) / sigma`` down the
    schedule. The last step onto ``sigma = 0`` is plain Euler.
    """
    if x_init is None:
        if rng is None:
            rng = torch.Generator().manual_seed(0 if seed is None else seed)
        x = torch.randn(shape, generator=rng, dtype=dtype) * schedule.sigmas[0]
    else:
        x = x_init.clone()
    sig = schedule.sigmas
    with torch.no_grad():
        for i in range(len(sig) - 1):
            s_cur, s_next = sig[i], sig[i + 1]
            d_cur = (x - denoiser(x, torch.tensor(s_cur, dtype=x.dtype), condition)) / s_cur
            x_next = x + (s_next - s_cur) * d_cur
            if s_next > 0:
                d_next = (x_next - denoiser(x_next, torch.tensor(s_next, dtype=x.dtype), condition)) / s_next
                x_next = x + (s_next - s_cur) * (0.5 * d_cur + 0.5 * d_next)
            if not torch.isfinite(x_next).all():
                raise SamplerDivergenceError(i)
            x = x_next
    return x
