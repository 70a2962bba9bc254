"""DiT-style student/teacher networks.

The student branch is an asymmetric encoder/decoder: the encoder sees only the
visible patches (plus a learned [CLS] token), the decoder always sees the full
token set. The teacher branch is a structural copy of the student encoder and
projection head and is only ever updated by EMA.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import nn

from .masking import PatchGrid, PatchMask, merge_tokens, patchify, split_visible, unpatchify


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 8
    in_channels: int = 1
    patch_size: int = 2
    embed_dim: int = 64
    depth_encoder: int = 4
    depth_decoder: int = 8
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 2
    proj_dim: int = 256
    proj_hidden: int = 256

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        if min(self.depth_encoder, self.depth_decoder, self.proj_hidden) < 1:
            raise ValueError("depths and proj_hidden must be positive")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(self.input_size, self.input_size, self.in_channels, self.patch_size)

    @property
    def null_label(self) -> int:
        return self.n_classes


# Full-size encoders on 32x32x4 latents; K=8192 projection.
PRESETS: dict[str, ModelConfig] = {
    "DiT-S/2": ModelConfig(32, 4, 2, 384, 12, 8, 6, 4.0, 1000, 8192, 2048),
    "DiT-B/2": ModelConfig(32, 4, 2, 768, 12, 8, 12, 4.0, 1000, 8192, 2048),
    "DiT-XL/2": ModelConfig(32, 4, 2, 1152, 28, 8, 16, 4.0, 1000, 8192, 2048),
}


def sincos_2d(embed_dim: int, grid_h: int, grid_w: int) -> torch.Tensor:
    """Fixed 2-D sin/cos positional table, shape ``(grid_h * grid_w, embed_dim)``."""
    if embed_dim % 4:
        raise ValueError("embed_dim must be divisible by 4 for 2-D sincos positions")
    quarter = embed_dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(grid_h, dtype=torch.float64), torch.arange(grid_w, dtype=torch.float64), indexing="ij"
    )
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    return torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1).float()


def sinusoidal_features(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=values.dtype) / half)
    # c_noise lives in roughly [-2, 2]; stretch it so low frequencies still resolve it
    args = 1000.0 * values.reshape(-1, 1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ConditionEmbedder(nn.Module):
    def __init__(self, embed_dim: int, n_classes: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.n_classes = n_classes
        self.noise_mlp = nn.Sequential(nn.Linear(freq_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim))
        # last row is the null label
        self.class_table = nn.Embedding(n_classes + 1, embed_dim)
        nn.init.normal_(self.class_table.weight, std=0.02)

    def forward(self, c_noise: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if ((labels < 0) | (labels > self.n_classes)).any():
            raise ValueError(f"class label out of range [0, {self.n_classes}]")
        feats = sinusoidal_features(c_noise.to(self.class_table.weight.dtype), self.freq_dim)
        return self.noise_mlp(feats) + self.class_table(labels)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, L, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(b, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (d // h) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, L, d))


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaLN-zero conditioning."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.adaLN_modulation(c).chunk(6, dim=-1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class Encoder(nn.Module):
    """Patch embedding, condition embedding, [CLS] token and the encoder blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        grid = cfg.grid
        self.n_patches = grid.n_patches
        self.patch_embed = nn.Linear(grid.token_dim, cfg.embed_dim)
        self.register_buffer("pos_embed", sincos_2d(cfg.embed_dim, grid.grid_h, grid.grid_w), persistent=False)
        self.cond = ConditionEmbedder(cfg.embed_dim, cfg.n_classes)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        nn.init.normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            [DiTBlock(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth_encoder)]
        )

    def embed_patches(self, tokens: torch.Tensor) -> torch.Tensor:
        """Embed all ``n`` patch tokens and add positions at their grid indices."""
        return self.patch_embed(tokens) + self.pos_embed.to(tokens.dtype)

    def forward(self, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Encode already-embedded tokens; returns ``(B, 1 + L, D)`` with [CLS] at row 0."""
        if tokens.shape[-2] == 0:
            raise ValueError("encoder received no tokens")
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1)
        for block in self.blocks:
            x = block(x, cond)
        return x


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_patches = cfg.grid.n_patches
        self.blocks = nn.ModuleList(
            [DiTBlock(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth_decoder)]
        )
        self.final = FinalLayer(cfg.embed_dim, cfg.grid.token_dim)

    def forward(self, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] != self.n_patches:
            raise ValueError(f"decoder needs all {self.n_patches} tokens, got {tokens.shape[-2]}")
        x = tokens
        for block in self.blocks:
            x = block(x, cond)
        return self.final(x, cond)


class ProjectionHead(nn.Module):
    """Three-layer MLP mapping encoder tokens to ``K`` logits, shared by [CLS] and patches."""

    def __init__(self, dim: int, hidden: int, k: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, k),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.mlp(tokens)


class StudentBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = ProjectionHead(cfg.embed_dim, cfg.proj_hidden, cfg.proj_dim)

    def forward(
        self,
        x_in: torch.Tensor,
        c_noise: torch.Tensor,
        labels: torch.Tensor,
        mask: PatchMask | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Network ``F``: returns ``(image-shaped output, encoder tokens incl. [CLS])``.

        ``x_in`` is the already ``c_in``-scaled input. Without a mask every patch
        goes through the encoder.
        """
        cond = self.encoder.cond(c_noise, labels)
        embedded = self.encoder.embed_patches(patchify(x_in, self.cfg.patch_size))
        if mask is None:
            encoded = self.encoder(embedded, cond)
            full = encoded[:, 1:]
        else:
            visible, invisible = split_visible(embedded, mask)
            encoded = self.encoder(visible, cond)
            full = merge_tokens(encoded[:, 1:], invisible, mask)
        out = self.decoder(full, cond)
        return unpatchify(out, self.cfg.grid), encoded


class TeacherBranch(nn.Module):
    """Encoder + head with the same parameter names as the student's."""

    def __init__(self, student: StudentBranch):
        super().__init__()
        self.cfg = student.cfg
        self.encoder = copy.deepcopy(student.encoder)
        self.head = copy.deepcopy(student.head)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x_in: torch.Tensor, c_noise: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cond = self.encoder.cond(c_noise, labels)
        embedded = self.encoder.embed_patches(patchify(x_in, self.cfg.patch_size))
        return self.encoder(embedded, cond)


def parameter_manifest(module: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in module.named_parameters()]


def ema_manifest(student: StudentBranch) -> list[tuple[str, tuple[int, ...]]]:
    """The slice of the student manifest mirrored by the teacher."""
    return [(n, s) for n, s in parameter_manifest(student) if n.startswith(("encoder.", "head."))]
