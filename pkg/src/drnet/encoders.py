"""Panel encoders: a residual CNN stream and a transformer (patch) stream.

Both map a batch of grayscale panels (N, 1, H, W) to one embedding per panel
(N, embed_dim).  The CNN stream favors local texture; the transformer stream
attends across patch positions.  Their outputs are aligned to the same width
so a fusion operator can merge them downstream.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .errors import ConfigurationError, NumericError


def check_finite(tensor: torch.Tensor, where: str) -> None:
    """Raise NumericError naming the stage if tensor has NaN/Inf entries."""
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite activation after {where}")


def init_parameters(module: nn.Module) -> None:
    """Initialization applied to every submodule via ``Module.apply``.

    Linear weights: truncated normal (std 0.02).  Conv kernels: Kaiming
    fan-out.  Norm layers: unit scale, zero shift.  All biases zero.
    """
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.Conv1d, nn.Conv2d)):
        nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.LayerNorm, nn.BatchNorm1d, nn.BatchNorm2d)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def validate_panel_batch(panels: torch.Tensor, image_size: int) -> None:
    if panels.ndim != 4 or panels.shape[1] != 1:
        raise ConfigurationError(
            f"panel batch must have shape (N, 1, H, W), got {tuple(panels.shape)}"
        )
    if panels.shape[2] != image_size or panels.shape[3] != image_size:
        raise ConfigurationError(
            f"panel batch is {panels.shape[2]}x{panels.shape[3]} but the model "
            f"was built for {image_size}x{image_size}"
        )


class ResBlock2d(nn.Module):
    """Two stride-2 convolutions with a double-max-pool shortcut.

    Main path: conv(k, stride 2) -> BN -> ReLU -> conv(k, stride 2) -> BN ->
    ReLU.  Shortcut: two 2x2 max pools (matching the 4x downsampling), then a
    1x1 projection conv only when the channel count changes.
    """

    def __init__(self, c_in: int, c_mid: int, c_out: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv2d(c_in, c_mid, kernel, stride=2, padding=pad)
        self.bn1 = nn.BatchNorm2d(c_mid)
        self.conv2 = nn.Conv2d(c_mid, c_out, kernel, stride=2, padding=pad)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.pool = nn.MaxPool2d(2, 2)
        if c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1)
        else:
            self.shortcut = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        s = self.pool(self.pool(x))
        if self.shortcut is not None:
            s = self.shortcut(s)
        return y + s


class CnnBranch(nn.Module):
    """Residual CNN encoder: two blocks, 16x total downsampling, flatten."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        f = config.cnn_filters
        self.image_size = config.image_size
        self.block1 = ResBlock2d(1, f[0], f[1], config.cnn_kernel)
        self.block2 = ResBlock2d(f[1], f[2], f[3], config.cnn_kernel)

    def forward(self, panels: torch.Tensor) -> torch.Tensor:
        validate_panel_batch(panels, self.image_size)
        x = self.block1(panels)
        check_finite(x, "cnn.block1")
        x = self.block2(x)
        check_finite(x, "cnn.block2")
        # Channel-major flatten of (N, C, h, w) to (N, C*h*w).
        return x.reshape(x.shape[0], -1)


class SelfAttention(nn.Module):
    """Multi-head self-attention that can expose its attention weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, return_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        n, t, d = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (n, heads, t, head_dim)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        out = self.proj(out)
        return out, (attn if return_weights else None)


class TransformerBlock(nn.Module):
    """Pre-norm transformer block: attention and GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(
        self, x: torch.Tensor, return_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        attn_out, weights = self.attn(self.norm1(x), return_weights)
        x = x + attn_out
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, weights


class VitBranch(nn.Module):
    """Patch-embedding transformer encoder with mean-pooled output."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.image_size = config.image_size
        self.grid = config.image_size // config.patch_size
        dim = config.embed_dim
        self.patch_embed = nn.Conv2d(
            1, dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(config.num_patches, dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, config.vit_heads, config.vit_mlp_ratio)
            for _ in range(config.vit_depth)
        )
        self.norm = nn.LayerNorm(dim)

    def reset_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def _tokens(self, panels: torch.Tensor) -> torch.Tensor:
        validate_panel_batch(panels, self.image_size)
        x = self.patch_embed(panels)  # (N, dim, grid, grid)
        x = x.flatten(2).transpose(1, 2)  # (N, tokens, dim)
        return x + self.pos_embed

    def forward(self, panels: torch.Tensor) -> torch.Tensor:
        x = self._tokens(panels)
        for i, block in enumerate(self.blocks):
            x, _ = block(x)
            check_finite(x, f"vit.blocks.{i}")
        x = self.norm(x)
        return x.mean(dim=1)

    def attention_weights(self, panels: torch.Tensor) -> torch.Tensor:
        """All attention maps, shape (N, depth, heads, tokens, tokens)."""
        x = self._tokens(panels)
        collected = []
        for block in self.blocks:
            x, weights = block(x, return_weights=True)
            collected.append(weights)
        return torch.stack(collected, dim=1)
