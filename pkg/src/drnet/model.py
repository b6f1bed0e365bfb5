"""The full dual-stream matrix-reasoning network."""

from __future__ import annotations

import torch
from torch import nn

from .config import PANELS_PER_PROBLEM, ModelConfig
from .encoders import CnnBranch, VitBranch, check_finite, init_parameters
from .errors import ConfigurationError
from .reasoning import (
    CandidateScorer,
    RuleExtractor,
    group_candidates,
    make_fusion,
    predict,
)


class DRNet(nn.Module):
    """Dual-stream encoder + fusion + rule extractor + candidate scorer.

    Input: float panels (B, 16, 1, H, W) in [0, 1] — 8 context cells of a
    3x3 matrix (answer cell missing) followed by 8 answer candidates.
    Output: (B, 8) candidate scores; argmax picks the answer.

    Top-level submodules are named ``cnn``, ``vit``, ``fusion``, ``rule``
    and ``classifier``, so parameter names look like
    ``cnn.block1.conv1.weight``; disabled streams are absent entirely.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.enable_cnn:
            self.cnn = CnnBranch(config)
        if config.enable_vit:
            self.vit = VitBranch(config)
        if config.enable_cnn and config.enable_vit:
            self.fusion = make_fusion(config.fusion_op, config.embed_dim)
        self.rule = RuleExtractor(config)
        self.classifier = CandidateScorer(config)
        self.apply(init_parameters)
        if config.enable_vit:
            self.vit.reset_parameters()

    # ------------------------------------------------------------------
    # Stages (each usable on its own for analysis)
    # ------------------------------------------------------------------

    def _flatten_problems(self, problems: torch.Tensor) -> torch.Tensor:
        if problems.ndim != 5 or problems.shape[1] != PANELS_PER_PROBLEM:
            raise ConfigurationError(
                f"expected problems of shape (B, {PANELS_PER_PROBLEM}, 1, H, W), "
                f"got {tuple(problems.shape)}"
            )
        b, p, c, h, w = problems.shape
        return problems.reshape(b * p, c, h, w)

    def panel_embeddings(self, panels: torch.Tensor) -> torch.Tensor:
        """Encode a flat panel batch (N, 1, H, W) to fused (N, d) embeddings."""
        if self.config.enable_cnn and self.config.enable_vit:
            u = self.cnn(panels)
            v = self.vit(panels)
            fused = self.fusion(u, v)
            check_finite(fused, "fusion")
            return fused
        if self.config.enable_cnn:
            return self.cnn(panels)
        return self.vit(panels)

    def fused_panels(self, problems: torch.Tensor) -> torch.Tensor:
        """(B, 16, 1, H, W) -> per-panel embeddings (B, 16, d)."""
        flat = self._flatten_problems(problems)
        emb = self.panel_embeddings(flat)
        return emb.reshape(problems.shape[0], PANELS_PER_PROBLEM, -1)

    def rule_embeddings(self, problems: torch.Tensor) -> torch.Tensor:
        """(B, 16, 1, H, W) -> rule embeddings (B, 8, rule_embed_dim)."""
        groups = group_candidates(self.fused_panels(problems))
        out = self.rule(groups)
        check_finite(out, "rule")
        return out

    def forward(self, problems: torch.Tensor) -> torch.Tensor:
        scores = self.classifier(self.rule_embeddings(problems))
        check_finite(scores, "classifier")
        return scores

    def predict(self, problems: torch.Tensor) -> torch.Tensor:
        """Answer indices (B,) for a batch of problems."""
        return predict(self.forward(problems))


def parameter_counts(model: nn.Module) -> dict[str, int]:
    """Trainable-parameter totals per top-level submodule, plus ``total``."""
    counts: dict[str, int] = {}
    for name, child in model.named_children():
        counts[name] = sum(p.numel() for p in child.parameters() if p.requires_grad)
    counts["total"] = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return counts
