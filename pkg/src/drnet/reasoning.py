"""Fusion of the two panel streams and reasoning over candidate answers.

Pipeline: per-panel embeddings are fused to (B, 16, d), each of the 8
candidates is stacked under the 8 context panels to form a (9, d) group, a
1D-convolutional extractor turns each group into a rule embedding, and a
small MLP scores each embedding.  The predicted answer is the argmax score.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import (
    NUM_CANDIDATES,
    NUM_CONTEXT,
    PANELS_PER_PROBLEM,
    RULE_OUTPUT_POSITIONS,
    RULE_POOL_STRIDE,
    ModelConfig,
)
from .errors import ConfigurationError, NumericError


class SumFusion(nn.Module):
    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return u + v


class MeanFusion(nn.Module):
    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return (u + v) * 0.5


class AdaptiveFusion(nn.Module):
    """Learned 2-way blend: w0*u + w1*v with optional weight normalization.

    norm="none" uses the raw learned pair; "l1" divides by |w0|+|w1|;
    "l2" divides each weight by sqrt(w0^2 + w1^2).
    """

    def __init__(self, norm: str = "none"):
        super().__init__()
        if norm not in ("none", "l1", "l2"):
            raise ConfigurationError(f"unknown adaptive-fusion norm {norm!r}")
        self.norm = norm
        self.weights = nn.Parameter(torch.full((2,), 0.5))

    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        w = self.weights
        if self.norm == "l1":
            w = w / w.abs().sum()
        elif self.norm == "l2":
            w = w / w.pow(2).sum().sqrt()
        return w[0] * u + w[1] * v


class LinearFusion(nn.Module):
    """Concatenate both streams and project back to embed_dim."""

    def __init__(self, dim: int):
        super().__init__()
        self.lin = nn.Linear(2 * dim, dim)

    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.lin(torch.cat((u, v), dim=-1))


def make_fusion(op: str, dim: int) -> nn.Module:
    if op == "SUM":
        return SumFusion()
    if op == "MEA":
        return MeanFusion()
    if op == "AUT":
        return AdaptiveFusion("none")
    if op == "AUT_L1":
        return AdaptiveFusion("l1")
    if op == "AUT_L2":
        return AdaptiveFusion("l2")
    if op == "LIN":
        return LinearFusion(dim)
    raise ConfigurationError(f"unknown fusion_op {op!r}")


def group_candidates(panel_embeddings: torch.Tensor) -> torch.Tensor:
    """(B, 16, d) -> (B, 8, 9, d): context rows plus one candidate each.

    Group j holds the 8 context embeddings in order followed by candidate j.
    """
    if panel_embeddings.ndim != 3 or panel_embeddings.shape[1] != PANELS_PER_PROBLEM:
        raise ConfigurationError(
            f"expected (B, {PANELS_PER_PROBLEM}, d) panel embeddings, "
            f"got {tuple(panel_embeddings.shape)}"
        )
    context = panel_embeddings[:, :NUM_CONTEXT]
    candidates = panel_embeddings[:, NUM_CONTEXT:]
    b, _, d = panel_embeddings.shape
    ctx = context.unsqueeze(1).expand(b, NUM_CANDIDATES, NUM_CONTEXT, d)
    cand = candidates.unsqueeze(2)
    return torch.cat((ctx, cand), dim=2)


class RuleBlock1d(nn.Module):
    """1D residual block: two same-length convs, 1x1-projected shortcut."""

    def __init__(self, c_in: int, c_mid: int, c_out: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(c_in, c_mid, kernel, padding=pad)
        self.bn1 = nn.BatchNorm1d(c_mid)
        self.conv2 = nn.Conv1d(c_mid, c_out, kernel, padding=pad)
        self.bn2 = nn.BatchNorm1d(c_out)
        self.shortcut = nn.Conv1d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        return y + self.shortcut(x)


class RuleExtractor(nn.Module):
    """Turn each (9, d) candidate group into a flat rule embedding.

    The 9 rows act as conv channels over the d embedding positions.  A
    stride-4 max pool after the first block and an adaptive average pool to
    16 positions after the second make the output width independent of d.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        f = config.rule_filters
        k = config.rule_kernel
        self.block1 = RuleBlock1d(NUM_CONTEXT + 1, f[0], f[1], k)
        self.pool = nn.MaxPool1d(RULE_POOL_STRIDE, RULE_POOL_STRIDE)
        self.block2 = RuleBlock1d(f[1], f[2], f[3], k)
        self.adaptive = nn.AdaptiveAvgPool1d(RULE_OUTPUT_POSITIONS)

    def forward(self, groups: torch.Tensor) -> torch.Tensor:
        if groups.ndim != 4 or groups.shape[1] != NUM_CANDIDATES:
            raise ConfigurationError(
                f"expected (B, {NUM_CANDIDATES}, {NUM_CONTEXT + 1}, d) groups, "
                f"got {tuple(groups.shape)}"
            )
        b = groups.shape[0]
        x = groups.reshape(b * NUM_CANDIDATES, groups.shape[2], groups.shape[3])
        x = self.block1(x)
        x = self.pool(x)
        x = self.block2(x)
        x = self.adaptive(x)
        return x.reshape(b, NUM_CANDIDATES, -1)


class CandidateScorer(nn.Module):
    """MLP over rule embeddings: Linear -> ELU -> BatchNorm -> Dropout stacks.

    Candidates are folded into the batch axis so batch norm sees B*8 rows.
    The final linear maps to one score per candidate.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        dims = (config.rule_embed_dim,) + config.classifier_dims
        self.hidden = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(len(dims) - 2):
            self.hidden.append(nn.Linear(dims[i], dims[i + 1]))
            self.norms.append(nn.BatchNorm1d(dims[i + 1]))
        self.dropout = nn.Dropout(config.dropout)
        self.out = nn.Linear(dims[-2], dims[-1])

    def forward(self, rule_embeddings: torch.Tensor) -> torch.Tensor:
        if rule_embeddings.ndim != 3 or rule_embeddings.shape[1] != NUM_CANDIDATES:
            raise ConfigurationError(
                f"expected (B, {NUM_CANDIDATES}, r) rule embeddings, "
                f"got {tuple(rule_embeddings.shape)}"
            )
        b = rule_embeddings.shape[0]
        x = rule_embeddings.reshape(b * NUM_CANDIDATES, -1)
        for lin, bn in zip(self.hidden, self.norms):
            x = self.dropout(bn(F.elu(lin(x))))
        x = self.out(x)
        return x.reshape(b, NUM_CANDIDATES)


def predict(scores: torch.Tensor) -> torch.Tensor:
    """Argmax over candidate scores; ties go to the lowest index.

    Raises NumericError if any score is NaN (Inf is comparable and allowed).
    """
    if scores.ndim != 2 or scores.shape[1] != NUM_CANDIDATES:
        raise ConfigurationError(
            f"expected (B, {NUM_CANDIDATES}) scores, got {tuple(scores.shape)}"
        )
    if torch.isnan(scores).any():
        raise NumericError("NaN candidate score; cannot rank candidates")
    # numpy argmax guarantees the first occurrence on ties.
    idx = np.argmax(scores.detach().cpu().numpy(), axis=1)
    return torch.from_numpy(idx.astype(np.int64))
