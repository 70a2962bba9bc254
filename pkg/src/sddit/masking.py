"""Patchification and the visible/invisible split used by the student branch.

Masks are exact-count: ``floor(ratio * n)`` patches are hidden. There is no
mask token anywhere; hidden patches re-enter the decoder as their own
(embedded but unencoded) tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

_calls = {"sample_mask": 0}


def sample_mask_calls() -> int:
    """Number of times :func:`sample_mask` has run in this process."""
    return _calls["sample_mask"]


@dataclass(frozen=True)
class PatchGrid:
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @classmethod
    def for_image(cls, height: int, width: int, channels: int, patch_size: int) -> "PatchGrid":
        if height % patch_size or width % patch_size:
            raise ValueError(f"image {height}x{width} not divisible by patch size {patch_size}")
        return cls(height // patch_size, width // patch_size, patch_size, channels)


@dataclass(frozen=True)
class PatchMask:
    """Per-patch mask; ``bits[i] == 1`` means patch ``i`` is hidden from the encoder.

    Fields may carry a leading batch dimension, one mask per sample.
    """

    bits: torch.Tensor
    visible_idx: torch.Tensor
    invisible_idx: torch.Tensor

    @property
    def n(self) -> int:
        return self.bits.shape[-1]

    @classmethod
    def from_bits(cls, bits) -> "PatchMask":
        bits = torch.as_tensor(bits, dtype=torch.long)
        order = torch.argsort(bits, dim=-1, stable=True)
        n_inv = int(bits.reshape(-1, bits.shape[-1])[0].sum())
        if (bits.sum(-1) != n_inv).any():
            raise ValueError("batched masks must hide the same number of patches")
        n_vis = bits.shape[-1] - n_inv
        return cls(bits, order[..., :n_vis], order[..., n_vis:])


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(..., C, H, W) -> (..., n, p*p*C)`` with row-major patch order."""
    *lead, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"spatial dims {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(*lead, c, gh, p, gw, p)
    nd = len(lead)
    # -> (..., gh, gw, p, p, c)
    x = x.permute(*range(nd), nd + 1, nd + 3, nd + 2, nd + 4, nd)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(tokens: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    *lead, n, d = tokens.shape
    if n != grid.n_patches or d != grid.token_dim:
        raise ValueError(f"token layout ({n}, {d}) does not match grid {grid}")
    p, c = grid.patch_size, grid.channels
    nd = len(lead)
    x = tokens.reshape(*lead, grid.grid_h, grid.grid_w, p, p, c)
    x = x.permute(*range(nd), nd + 4, nd, nd + 2, nd + 1, nd + 3)
    return x.reshape(*lead, c, grid.grid_h * p, grid.grid_w * p)


def sample_mask(n: int, ratio: float, rng: torch.Generator, batch: int | None = None) -> PatchMask:
    """Hide exactly ``floor(ratio * n)`` patches chosen uniformly without replacement.

    With ``batch`` set, draws an independent mask per sample.
    """
    _calls["sample_mask"] += 1
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    k = math.floor(ratio * n + 1e-9)
    shape = (n,) if batch is None else (batch, n)
    perm = torch.argsort(torch.rand(shape, generator=rng), dim=-1)
    hidden = perm[..., :k]
    bits = torch.zeros(shape, dtype=torch.long)
    bits.scatter_(-1, hidden, 1)
    return PatchMask.from_bits(bits)


def _gather(tokens: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    if idx.ndim == 1:
        return tokens.index_select(-2, idx)
    idx = idx.unsqueeze(-1).expand(*idx.shape, tokens.shape[-1])
    return torch.gather(tokens, -2, idx)


def split_visible(tokens: torch.Tensor, mask: PatchMask) -> tuple[torch.Tensor, torch.Tensor]:
    if tokens.shape[-2] != mask.n:
        raise ValueError(f"{tokens.shape[-2]} tokens but mask covers {mask.n}")
    return _gather(tokens, mask.visible_idx), _gather(tokens, mask.invisible_idx)


def merge_tokens(encoded_visible: torch.Tensor, invisible: torch.Tensor, mask: PatchMask) -> torch.Tensor:
    """Scatter encoded visible tokens and raw invisible tokens back to grid order."""
    n_vis = mask.visible_idx.shape[-1]
    n_inv = mask.invisible_idx.shape[-1]
    if encoded_visible.shape[-2] != n_vis or invisible.shape[-2] != n_inv:
        raise ValueError(
            f"expected {n_vis} visible / {n_inv} invisible tokens, got "
            f"{encoded_visible.shape[-2]} / {invisible.shape[-2]}"
        )
    both = torch.cat([encoded_visible, invisible], dim=-2)
    order = torch.cat([mask.visible_idx, mask.invisible_idx], dim=-1)
    inverse = torch.argsort(order, dim=-1)
    return _gather(both, inverse)
