"""Training loop, evaluation, early stopping, and checkpoint files."""

from __future__ import annotations

import csv
import json
import math
import time
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .config import ModelConfig, TrainConfig, config_fingerprint
from .data import MaterializedDataset, flip_panels, rule_label
from .errors import CheckpointError, NumericError
from .model import DRNet
from .reasoning import predict

CHECKPOINT_FORMAT_VERSION = 1
METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "seconds")


def seed_all(seed: int) -> None:
    torch.manual_seed(seed)


def deterministic_mode(seed: int) -> None:
    """Single-threaded, fixed-seed execution for reproducible runs."""
    torch.set_num_threads(1)
    seed_all(seed)


def candidate_loss(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over the 8 candidate scores, mean over batch."""
    return F.cross_entropy(scores, targets)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam with classic coupled L2 weight decay (decay added to gradients)."""
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


class EarlyStopping:
    """Stop when the tracked value has not strictly improved for `patience`
    consecutive updates."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's value; True means stop now."""
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class EvalReport:
    n: int
    loss: float
    accuracy: float
    #: canonical rule label -> (correct, total)
    per_rule: dict[str, tuple[int, int]] = field(default_factory=dict)


def _dataset_tensors(data) -> tuple[np.ndarray, np.ndarray, list]:
    mat = data if isinstance(data, MaterializedDataset) else MaterializedDataset(data)
    return mat.panels, mat.targets, mat.rules


def _batch_tensor(panels_u8: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(panels_u8))
    return x.unsqueeze(2).float().div_(255.0)


def evaluate(model: DRNet, data, batch_size: int = 64) -> EvalReport:
    """Eval-mode accuracy, mean loss, and a per-rule-label breakdown."""
    panels, targets, rules = _dataset_tensors(data)
    n = panels.shape[0]
    was_training = model.training
    model.eval()
    loss_sum = 0.0
    per_rule: dict[str, list[int]] = {}
    correct_total = 0
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            batch = _batch_tensor(panels[lo:hi])
            t = torch.from_numpy(targets[lo:hi])
            scores = model(batch)
            loss_sum += candidate_loss(scores, t).item() * (hi - lo)
            pred = predict(scores)
            hits = (pred == t).numpy()
            correct_total += int(hits.sum())
            for j in range(hi - lo):
                label = rule_label(rules[lo + j]) if rules[lo + j] else "(unlabeled)"
                cell = per_rule.setdefault(label, [0, 0])
                cell[0] += int(hits[j])
                cell[1] += 1
    if was_training:
        model.train()
    return EvalReport(
        n=n,
        loss=loss_sum / n,
        accuracy=correct_total / n,
        per_rule={k: (v[0], v[1]) for k, v in sorted(per_rule.items())},
    )


@dataclass
class TrainResult:
    history: list[dict[str, Any]]
    best_epoch: int
    best_val_loss: float
    best_val_accuracy: float
    epochs_run: int
    stop_reason: str  # "early_stop" | "max_epochs" | "target_reached"
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None


class MetricsWriter:
    """Append-only CSV: epoch, split, loss, accuracy, seconds."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def append(
        self, epoch: int, split: str, loss: float, accuracy: float, seconds: float
    ) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [epoch, split, f"{loss:.9g}", f"{accuracy:.9g}", f"{seconds:.3f}"]
            )


def train(
    model: DRNet,
    train_data,
    val_data,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    target_train_accuracy: float | None = None,
    target_val_accuracy: float | None = None,
    eval_batch_size: int = 64,
) -> TrainResult:
    """Optimize the model; returns the per-epoch history and best epoch.

    Flip augmentation applies to training batches only.  Validation runs
    once per epoch; the checkpoint with the best validation accuracy is
    kept, and training stops when validation loss has not improved for
    ``cfg.early_stop_patience`` epochs, when ``cfg.max_epochs`` is reached,
    or when an optional accuracy target is met (harness convenience; both
    targets default to off).  With ``out_dir`` set, writes ``metrics.csv``,
    ``best.ckpt`` and ``last.ckpt``.
    """
    cfg.validate()
    if cfg.deterministic:
        deterministic_mode(cfg.seed)
    else:
        seed_all(cfg.seed)

    train_mat = (
        train_data
        if isinstance(train_data, MaterializedDataset)
        else MaterializedDataset(train_data)
    )
    panels, targets = train_mat.panels, train_mat.targets
    n = panels.shape[0]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(out / "metrics.csv" if out is not None else None)

    optimizer = make_optimizer(model, cfg)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history: list[dict[str, Any]] = []
    best_epoch = 0
    best_val_acc = -1.0
    best_val_loss = math.inf
    best_state: dict[str, torch.Tensor] | None = None
    stop_reason = "max_epochs"
    epochs_run = 0

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.monotonic()
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        flip_rng = np.random.default_rng([cfg.seed, epoch, 1])
        loss_sum = 0.0
        correct = 0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            batch_panels = panels[idx]
            if cfg.flip_p > 0:
                batch_panels = batch_panels.copy()
                for j in range(batch_panels.shape[0]):
                    h = bool(flip_rng.random() < cfg.flip_p)
                    v = bool(flip_rng.random() < cfg.flip_p)
                    if h or v:
                        batch_panels[j] = flip_panels(batch_panels[j], h, v)
            batch = _batch_tensor(batch_panels)
            t = torch.from_numpy(targets[idx])
            scores = model(batch)
            loss = candidate_loss(scores, t)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, step {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(idx)
            correct += int((predict(scores.detach()) == t).sum())
        train_loss = loss_sum / n
        train_acc = correct / n
        train_seconds = time.monotonic() - tic

        tic = time.monotonic()
        val = evaluate(model, val_data, batch_size=eval_batch_size)
        val_seconds = time.monotonic() - tic

        metrics.append(epoch, "train", train_loss, train_acc, train_seconds)
        metrics.append(epoch, "val", val.loss, val.accuracy, val_seconds)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_accuracy": train_acc,
            "val_loss": val.loss,
            "val_accuracy": val.accuracy,
        }
        history.append(row)
        epochs_run = epoch

        if val.accuracy > best_val_acc:
            best_val_acc = val.accuracy
            best_val_loss = val.loss
            best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
            if out is not None:
                save_checkpoint(
                    out / "best.ckpt",
                    model,
                    optimizer=optimizer,
                    train_config=cfg,
                    epoch=epoch,
                    val_loss=val.loss,
                    val_accuracy=val.accuracy,
                )

        target_hit = False
        if target_val_accuracy is not None and val.accuracy >= target_val_accuracy:
            target_hit = True
        if target_train_accuracy is not None:
            train_eval = evaluate(model, train_mat, batch_size=eval_batch_size)
            row["train_eval_accuracy"] = train_eval.accuracy
            if train_eval.accuracy >= target_train_accuracy:
                target_hit = True
        if target_hit:
            stop_reason = "target_reached"
            break
        if stopper.update(val.loss):
            stop_reason = "early_stop"
            break

    if out is not None:
        save_checkpoint(
            out / "last.ckpt",
            model,
            optimizer=optimizer,
            train_config=cfg,
            epoch=epochs_run,
            val_loss=history[-1]["val_loss"],
            val_accuracy=history[-1]["val_accuracy"],
        )
    if best_state is not None:
        model.load_state_dict(best_state)

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val_loss,
        best_val_accuracy=best_val_acc,
        epochs_run=epochs_run,
        stop_reason=stop_reason,
        best_checkpoint=(out / "best.ckpt") if out is not None else None,
        last_checkpoint=(out / "last.ckpt") if out is not None else None,
    )


# ---------------------------------------------------------------------------
# Checkpoints: named little-endian arrays in an npz container
# ---------------------------------------------------------------------------

def _little_endian(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(
    path: str | Path,
    model: DRNet,
    optimizer: torch.optim.Adam | None = None,
    train_config: TrainConfig | None = None,
    epoch: int | None = None,
    val_loss: float | None = None,
    val_accuracy: float | None = None,
) -> None:
    """Write a versioned checkpoint: parameters, buffers, optimizer moments.

    Layout: an uncompressed npz whose entries are ``param/<name>`` for every
    state-dict tensor, ``opt/<name>/{exp_avg,exp_avg_sq,step}`` when an
    optimizer is given, and ``__meta__`` (uint8-encoded JSON) holding the
    format version, epoch, metrics, and the full model/train config
    fingerprints.  All arrays are stored little-endian.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = _little_endian(tensor.detach().cpu().numpy())
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                pname = name_of.get(id(p))
                if pname is None:
                    raise CheckpointError(
                        "optimizer tracks a parameter not owned by the model"
                    )
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    value = state[key]
                    if isinstance(value, torch.Tensor):
                        value = value.detach().cpu().numpy()
                    arrays[f"opt/{pname}/{key}"] = _little_endian(np.asarray(value))
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": config_fingerprint(model.config),
        "train_config": (
            {f.name: getattr(train_config, f.name) for f in fields(train_config)}
            if train_config is not None
            else None
        ),
        "epoch": epoch,
        "val_loss": val_loss,
        "val_accuracy": val_accuracy,
        "has_optimizer": optimizer is not None,
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).copy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_meta(path: str | Path) -> dict[str, Any]:
    """Parse and return the checkpoint's metadata block."""
    try:
        with np.load(path, allow_pickle=False) as zf:
            if "__meta__" not in zf.files:
                raise CheckpointError(f"{path}: missing __meta__ entry")
            raw = bytes(zf["__meta__"].tobytes())
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version!r}"
        )
    return meta


def load_checkpoint(
    path: str | Path,
    model: DRNet | None = None,
    optimizer: torch.optim.Adam | None = None,
) -> dict[str, Any]:
    """Restore model (and optionally optimizer) state; returns metadata.

    The checkpoint's stored model-config fingerprint must match the
    receiving model's config exactly; mismatches raise CheckpointError
    naming every differing field.
    """
    meta = read_checkpoint_meta(path)
    if model is None:
        return meta
    saved_fp = meta.get("model_config") or {}
    live_fp = config_fingerprint(model.config)
    diffs = [
        f"{key}: checkpoint={saved_fp.get(key)!r} model={live_fp[key]!r}"
        for key in live_fp
        if saved_fp.get(key) != live_fp[key]
    ]
    if diffs:
        raise CheckpointError(
            f"{path}: config mismatch — " + "; ".join(diffs)
        )
    try:
        with np.load(path, allow_pickle=False) as zf:
            entries = {name: zf[name] for name in zf.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc

    saved_params = {
        name[len("param/"):]: arr
        for name, arr in entries.items()
        if name.startswith("param/")
    }
    live_names = set(model.state_dict().keys())
    missing = sorted(live_names - set(saved_params))
    unexpected = sorted(set(saved_params) - live_names)
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: parameter-name mismatch; missing={missing} "
            f"unexpected={unexpected}"
        )
    with torch.no_grad():
        state = model.state_dict()
        for name, arr in saved_params.items():
            tensor = state[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"checkpoint {arr.shape} vs model {tuple(tensor.shape)}"
                )
            # np.array (not ascontiguousarray) keeps 0-d entries 0-d
            tensor.copy_(torch.from_numpy(np.array(arr, copy=True)))

    if optimizer is not None:
        if not meta.get("has_optimizer"):
            raise CheckpointError(f"{path}: checkpoint stores no optimizer state")
        params_by_name = dict(model.named_parameters())
        for pname, p in params_by_name.items():
            prefix = f"opt/{pname}/"
            keys = {k: entries[k] for k in entries if k.startswith(prefix)}
            if not keys:
                continue
            optimizer.state[p] = {
                key: torch.from_numpy(
                    np.array(keys[prefix + key], copy=True)
                )
                for key in ("step", "exp_avg", "exp_avg_sq")
            }
    return meta
