"""Analysis exporters: rule embeddings, stream similarity, saliency maps.

Everything here is a deterministic, read-only function of (model weights,
data, flags).  Array outputs are written as CSV or binary (P5) PGM files so
external tools can do the plotting.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np
import torch

from .config import PANELS_PER_PROBLEM
from .data import RpmProblem, rule_label
from .errors import ConfigurationError, FormatError
from .model import DRNet
from .reasoning import predict

HISTOGRAM_BINS = 50


def _problem_tensor(problems: Sequence[RpmProblem]) -> torch.Tensor:
    panels = np.stack([p.panels for p in problems]).astype(np.float32) / 255.0
    return torch.from_numpy(panels).unsqueeze(2)


def export_rule_embeddings(
    model: DRNet, data, sink: str | Path | TextIO, batch_size: int = 16
) -> int:
    """Write ``id,rule,e0..e{r-1}`` rows: one correct-candidate rule
    embedding per problem.  Returns the number of rows written."""
    n = len(data)
    r_dim = model.config.rule_embed_dim
    close = False
    if isinstance(sink, (str, Path)):
        fh = open(sink, "w")
        close = True
    else:
        fh = sink
    was_training = model.training
    model.eval()
    try:
        fh.write("id,rule," + ",".join(f"e{i}" for i in range(r_dim)) + "\n")
        with torch.no_grad():
            for lo in range(0, n, batch_size):
                problems = [data[i] for i in range(lo, min(lo + batch_size, n))]
                for j, p in enumerate(problems):
                    if not p.rules:
                        raise FormatError(
                            f"problem {lo + j} has no rule metadata; "
                            "cannot label embeddings"
                        )
                embeddings = model.rule_embeddings(_problem_tensor(problems))
                for j, p in enumerate(problems):
                    vec = embeddings[j, p.target].numpy()
                    values = ",".join(f"{float(v):.9g}" for v in vec)
                    fh.write(f"{lo + j},{rule_label(p.rules)},{values}\n")
    finally:
        if was_training:
            model.train()
        if close:
            fh.close()
    return n


@dataclass
class SimilarityReport:
    values: np.ndarray  # per-panel cosine values, zero-norm panels excluded
    histogram: np.ndarray  # counts, HISTOGRAM_BINS bins over [-1, 1]
    bin_edges: np.ndarray
    mean: float
    median: float
    skipped: int  # panels dropped for a zero-norm embedding


def stream_similarity(model: DRNet, data, batch_size: int = 16) -> SimilarityReport:
    """Cosine similarity between the two stream embeddings, per panel."""
    if not (model.config.enable_cnn and model.config.enable_vit):
        raise ConfigurationError("stream similarity requires both streams enabled")
    n = len(data)
    values: list[np.ndarray] = []
    skipped = 0
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for lo in range(0, n, batch_size):
                problems = [data[i] for i in range(lo, min(lo + batch_size, n))]
                batch = _problem_tensor(problems)
                b = batch.shape[0]
                flat = batch.reshape(b * PANELS_PER_PROBLEM, *batch.shape[2:])
                u = model.cnn(flat).numpy()
                v = model.vit(flat).numpy()
                nu = np.linalg.norm(u, axis=1)
                nv = np.linalg.norm(v, axis=1)
                ok = (nu > 0) & (nv > 0)
                skipped += int((~ok).sum())
                dots = np.sum(u[ok] * v[ok], axis=1)
                values.append(dots / (nu[ok] * nv[ok]))
    finally:
        if was_training:
            model.train()
    all_values = (
        np.concatenate(values) if values else np.empty(0, dtype=np.float64)
    )
    all_values = np.clip(all_values, -1.0, 1.0)
    hist, edges = np.histogram(all_values, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    return SimilarityReport(
        values=all_values,
        histogram=hist,
        bin_edges=edges,
        mean=float(all_values.mean()) if all_values.size else float("nan"),
        median=float(np.median(all_values)) if all_values.size else float("nan"),
        skipped=skipped,
    )


def write_similarity_csv(report: SimilarityReport, path: str | Path) -> None:
    """Histogram as CSV: one row per bin (bin_lo, bin_hi, count)."""
    lines = ["bin_lo,bin_hi,count"]
    for i in range(len(report.histogram)):
        lines.append(
            f"{report.bin_edges[i]:.6g},{report.bin_edges[i + 1]:.6g},"
            f"{int(report.histogram[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def rollout_matrices(attention: torch.Tensor, layer: int | None = None) -> np.ndarray:
    """Combine per-layer attention into token-to-token rollout matrices.

    attention: (N, depth, heads, T, T) row-stochastic maps.  Per layer:
    average heads, add identity, renormalize rows; the rollout is the
    product of these across layers (or just one layer when ``layer`` is
    given).  Returns (N, T, T).
    """
    a = attention.detach().numpy().astype(np.float64)
    n, depth, _, t, _ = a.shape
    if layer is not None:
        if not 0 <= layer < depth:
            raise ConfigurationError(
                f"layer {layer} out of range for depth {depth}"
            )
        layers = [layer]
    else:
        layers = list(range(depth))
    eye = np.eye(t)
    result = np.broadcast_to(eye, (n, t, t)).copy()
    for li in layers:
        mixed = a[:, li].mean(axis=1) + eye
        mixed = mixed / mixed.sum(axis=2, keepdims=True)
        result = mixed @ result
    return result


def attention_rollout(
    model: DRNet, panels: torch.Tensor, layer: int | None = None
) -> np.ndarray:
    """Per-panel saliency over the patch grid, shape (N, grid, grid).

    Saliency of an input patch is its mean attention received across output
    tokens in the rollout (the model mean-pools tokens into the panel
    embedding, so output tokens contribute equally).
    """
    if not model.config.enable_vit:
        raise ConfigurationError("attention rollout requires the vit stream")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            attn = model.vit.attention_weights(panels)
    finally:
        if was_training:
            model.train()
    rollout = rollout_matrices(attn, layer=layer)
    saliency = rollout.mean(axis=1)  # average over output tokens
    grid = model.vit.grid
    return saliency.reshape(-1, grid, grid)


def saliency_to_image(saliency: np.ndarray, image_size: int) -> np.ndarray:
    """Min-max normalize one (grid, grid) map to uint8 and nearest-neighbor
    upsample to (image_size, image_size)."""
    grid = saliency.shape[0]
    if image_size % grid != 0:
        raise ConfigurationError(
            f"image size {image_size} not a multiple of grid {grid}"
        )
    lo, hi = float(saliency.min()), float(saliency.max())
    if hi > lo:
        levels = np.rint((saliency - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        levels = np.zeros_like(saliency, dtype=np.uint8)
    factor = image_size // grid
    return np.kron(levels, np.ones((factor, factor), dtype=np.uint8))


def cnn_feature_maps(model: DRNet, panels: torch.Tensor, layer: str) -> np.ndarray:
    """Activations of one CNN conv layer for a single panel: (C, h, w).

    ``layer`` is the qualified module name, e.g. ``cnn.block1.conv1``.
    Unknown names raise an error listing the valid choices.
    """
    if not model.config.enable_cnn:
        raise ConfigurationError("feature maps require the cnn stream")
    conv_names = [
        name
        for name, module in model.named_modules()
        if name.startswith("cnn.") and isinstance(module, torch.nn.Conv2d)
    ]
    if layer not in conv_names:
        raise ConfigurationError(
            f"unknown layer {layer!r}; valid layers: {', '.join(conv_names)}"
        )
    if panels.ndim != 4 or panels.shape[0] != 1:
        raise ConfigurationError(
            f"expected one panel of shape (1, 1, H, W), got {tuple(panels.shape)}"
        )
    captured: dict[str, torch.Tensor] = {}
    module = dict(model.named_modules())[layer]

    def hook(_mod, _inp, out):
        captured["value"] = out.detach()

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model.cnn(panels)
    finally:
        handle.remove()
        if was_training:
            model.train()
    return captured["value"][0].numpy()


def feature_maps_to_images(maps: np.ndarray) -> np.ndarray:
    """Min-max normalize each (h, w) channel map to uint8 independently."""
    out = np.zeros(maps.shape, dtype=np.uint8)
    for c in range(maps.shape[0]):
        lo, hi = float(maps[c].min()), float(maps[c].max())
        if hi > lo:
            out[c] = np.rint((maps[c] - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return out


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write one 8-bit grayscale image as binary (P5) PGM."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ConfigurationError("PGM writer needs a 2D uint8 array")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.tobytes())


def predict_problems(model: DRNet, problems: Sequence[RpmProblem]) -> np.ndarray:
    """Convenience: answer indices for a list of problems."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = predict(model(_problem_tensor(problems))).numpy()
    finally:
        if was_training:
            model.train()
    return out
