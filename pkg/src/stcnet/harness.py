"""Training, evaluation, score fusion and curve export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import SkeletonSequenceDataset, read_dataset
from .errors import ConfigError, NumericError
from .model import ModelConfig, STCNet, build_model, load_checkpoint, save_checkpoint
from .nn import RngStream
from .stc import check_curve_invariants, curve_record

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    warmup_epochs: int = 5
    base_lr: float = 0.1
    final_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 4e-4
    batch_size: int = 16
    seed: int = 0
    eval_batch_size: int = 64

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        if self.base_lr < 0 or self.final_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def lr_schedule(epoch: int, step_fraction: float, cfg: TrainConfig) -> float:
    """Linear warm-up from zero, then cosine decay from ``base_lr`` to ``final_lr``.

    ``step_fraction`` is how far into ``epoch`` the step is, in (0, 1].
    """
    progress = epoch + step_fraction
    if progress <= cfg.warmup_epochs and cfg.warmup_epochs > 0:
        return cfg.base_lr * progress / cfg.warmup_epochs
    u = (progress - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    u = min(max(u, 0.0), 1.0)
    return cfg.final_lr + (cfg.base_lr - cfg.final_lr) * (1 + math.cos(math.pi * u)) / 2


def _first_nonfinite(model: STCNet, logits: torch.Tensor) -> str:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return f"parameter {name}"
    if not torch.isfinite(logits).all():
        return "logits"
    return "loss"


def predict(model: STCNet, ds: SkeletonSequenceDataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities (N, num_classes) as float64."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for s in range(0, len(ds), batch_size):
            x = torch.from_numpy(ds.samples[s : s + batch_size]).to(dtype)
            out.append(torch.softmax(model(x).double(), dim=-1).numpy())
    if not out:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(out)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    best_epoch: int
    best_val_acc: float
    history: list[dict]


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data: SkeletonSequenceDataset | str | Path,
    val_data: SkeletonSequenceDataset | str | Path,
    out_dir: str | Path,
    target_val_acc: float | None = None,
) -> TrainResult:
    """SGD with Nesterov momentum; writes ``metrics.jsonl`` and ``best.stck``.

    With ``target_val_acc`` set, training stops after the first epoch whose
    validation accuracy reaches it.
    """
    train_cfg.validate()
    tr = read_dataset(train_data) if not isinstance(train_data, SkeletonSequenceDataset) else train_data
    va = read_dataset(val_data) if not isinstance(val_data, SkeletonSequenceDataset) else val_data
    for name, ds in (("train", tr), ("val", va)):
        if ds.graph.num_nodes != model_cfg.graph.num_nodes:
            raise ConfigError(f"{name} data has V={ds.graph.num_nodes}, model expects {model_cfg.graph.num_nodes}")
        if ds.num_classes > model_cfg.num_classes:
            raise ConfigError(f"{name} data has label {ds.num_classes - 1} beyond {model_cfg.num_classes} classes")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, ckpt_path = out / "metrics.jsonl", out / "best.stck"
    metrics_path.write_text("")

    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg, train_cfg.seed)
    opt = torch.optim.SGD(
        model.parameters(),
        lr=0.0,
        momentum=train_cfg.momentum,
        nesterov=True,
        weight_decay=train_cfg.weight_decay,
    )
    root = RngStream(train_cfg.seed, "train")
    N = len(tr)
    steps = math.ceil(N / train_cfg.batch_size)
    best_acc, best_epoch = -1.0, -1
    history = []
    for epoch in range(train_cfg.epochs):
        model.train()
        order = root.child("shuffle", epoch).permutation(N)
        loss_sum, correct = 0.0, 0
        lr = 0.0
        for step in range(steps):
            idx = order[step * train_cfg.batch_size : (step + 1) * train_cfg.batch_size]
            lr = lr_schedule(epoch, (step + 1) / steps, train_cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            x = torch.from_numpy(tr.samples[idx])
            y = torch.from_numpy(tr.labels[idx])
            logits = model(x, root.child("noise", epoch, step))
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}; first non-finite tensor: {_first_nonfinite(model, logits)}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(-1) == y).sum())
        probs = predict(model, va, train_cfg.eval_batch_size)
        val_acc = float((probs.argmax(-1) == va.labels).mean()) if len(va) else 0.0
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / N,
            "train_acc": correct / N,
            "val_acc": val_acc,
        }
        history.append(row)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        log.info("epoch %d lr %.5f loss %.4f train %.3f val %.3f", epoch, lr, row["train_loss"], row["train_acc"], val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            save_checkpoint(ckpt_path, model, epoch)
        if target_val_acc is not None and val_acc >= target_val_acc:
            break
    return TrainResult(ckpt_path, metrics_path, best_epoch, best_acc, history)


# Scores and fusion ----------------------------------------------------------


@dataclass
class ScoreFile:
    """Per-sample class probabilities from one trained stream."""

    scores: np.ndarray  # (N, K)
    labels: np.ndarray  # (N,)
    sample_ids: list[int]
    stream: str = "joint"
    sigma: int = 0

    @property
    def accuracy(self) -> float:
        return float((self.scores.argmax(-1) == self.labels).mean()) if len(self.labels) else 0.0

    def to_json(self) -> dict:
        return {
            "stream": self.stream,
            "sigma": int(self.sigma),
            "num_classes": int(self.scores.shape[1]),
            "sample_ids": [int(i) for i in self.sample_ids],
            "labels": [int(v) for v in self.labels],
            "scores": [[float(v) for v in row] for row in self.scores],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def read(cls, path: str | Path) -> "ScoreFile":
        d = json.loads(Path(path).read_text())
        scores = np.asarray(d["scores"], dtype=np.float64).reshape(len(d["labels"]), d["num_classes"])
        return cls(scores, np.asarray(d["labels"], dtype=np.int64), list(d["sample_ids"]), d["stream"], d["sigma"])


def evaluate(
    checkpoint: STCNet | str | Path, data: SkeletonSequenceDataset | str | Path, batch_size: int = 64
) -> tuple[float, ScoreFile]:
    model = checkpoint if isinstance(checkpoint, STCNet) else load_checkpoint(checkpoint)[0]
    ds = data if isinstance(data, SkeletonSequenceDataset) else read_dataset(data)
    cfg = model.cfg
    if ds.graph.num_nodes != cfg.graph.num_nodes:
        raise ConfigError(f"dataset has V={ds.graph.num_nodes}, checkpoint expects {cfg.graph.num_nodes}")
    if ds.num_classes > cfg.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, checkpoint predicts {cfg.num_classes}")
    probs = predict(model, ds, batch_size)
    sf = ScoreFile(probs, ds.labels.copy(), list(range(len(ds))), cfg.stream, cfg.sigma)
    return sf.accuracy, sf


def ensemble(score_files: Sequence[ScoreFile | str | Path]) -> dict:
    """Equal-weight sum of probability vectors across streams."""
    sfs = [s if isinstance(s, ScoreFile) else ScoreFile.read(s) for s in score_files]
    if not sfs:
        raise ValueError("ensemble: no score files given")
    ref = sfs[0]
    for i, s in enumerate(sfs[1:], start=1):
        if s.sample_ids != ref.sample_ids or not np.array_equal(s.labels, ref.labels):
            raise ValueError(f"ensemble: score file {i} covers a different sample set")
        if s.scores.shape != ref.scores.shape:
            raise ValueError(f"ensemble: score file {i} has shape {s.scores.shape}, expected {ref.scores.shape}")
    fused = np.sum([s.scores for s in sfs], axis=0)
    pred = fused.argmax(-1)
    return {
        "fused_accuracy": float((pred == ref.labels).mean()) if len(pred) else 0.0,
        "per_stream": [{"stream": s.stream, "sigma": int(s.sigma), "accuracy": s.accuracy} for s in sfs],
        "predictions": [int(p) for p in pred],
    }


# Curve export ---------------------------------------------------------------


def export_curves(
    checkpoint: STCNet | str | Path,
    data: SkeletonSequenceDataset | str | Path,
    sample_ids: Sequence[int],
    out_path: str | Path,
    svg_path: str | Path | None = None,
) -> dict:
    """Eval-mode forward on chosen samples, dumping curves from every STC block."""
    model = checkpoint if isinstance(checkpoint, STCNet) else load_checkpoint(checkpoint)[0]
    ds = data if isinstance(data, SkeletonSequenceDataset) else read_dataset(data)
    stcs = model.stc_modules()
    if not stcs:
        raise ConfigError("export_curves: model has no STC blocks")
    for i in sample_ids:
        if not 0 <= i < len(ds):
            raise ValueError(f"sample id {i} outside [0, {len(ds)})")
    ids = [int(i) for i in sample_ids]
    model.eval()
    model.set_record(True)
    try:
        with torch.no_grad():
            x = torch.from_numpy(ds.samples[ids]).to(next(model.parameters()).dtype)
            model(x)
        records = []
        for name, m in stcs:
            cs = m.last_curves
            problems = check_curve_invariants(cs, m.cfg.exclude_same_node)
            if problems:
                raise AssertionError(f"curve invariants violated in {name}: {problems}")
            T, V = cs.indices.shape[1] + 1, cs.indices.shape[2]
            for row, sid in enumerate(ids):
                records.append(curve_record(int(ds.labels[sid]), T, V, cs.paths(row), sample_id=sid, block=name))
    finally:
        model.set_record(False)
    doc = {"records": records}
    Path(out_path).write_text(json.dumps(doc))
    if svg_path is not None:
        Path(svg_path).write_text(curves_svg(ds, records))
    return doc


_PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173",
]


def curves_svg(ds: SkeletonSequenceDataset, records: list[dict], frame_gap: float = 60.0) -> str:
    """Frames laid out left to right, joints as circles, one polyline per curve."""
    rows = []
    height = 140.0
    width = 0.0
    for r, rec in enumerate(records):
        sample = ds.samples[rec["sample_id"]]
        T_src = sample.shape[1]
        T = rec["T"]
        frames = (np.arange(T) * T_src) // T
        xy = sample[:2, frames, :]  # 2, T, V
        span = max(float(np.ptp(xy[0])), float(np.ptp(xy[1])), 1e-6)
        scale = 100.0 / span
        y0 = r * height + 20
        def pos(t: int, v: int) -> tuple[float, float]:
            return (20 + t * frame_gap + (xy[0, t, v] - xy[0].min()) * scale * 0.5,
                    y0 + 100 - (xy[1, t, v] - xy[1].min()) * scale)
        rows.append(f'<text x="4" y="{y0 - 6:.1f}" font-size="10">sample {rec["sample_id"]} label {rec["label"]} {rec["block"]}</text>')
        for t in range(T):
            for v in range(rec["V"]):
                x, y = pos(t, v)
                rows.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.5" fill="#999"/>')
        for c, path in enumerate(rec["curves"]):
            pts = " ".join("%.1f,%.1f" % pos(t, v) for t, v in enumerate(path))
            rows.append(f'<polyline points="{pts}" fill="none" stroke="{_PALETTE[c % len(_PALETTE)]}" stroke-width="1"/>')
        width = max(width, 40 + T * frame_gap)
    total_h = height * max(1, len(records)) + 20
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{total_h:.0f}">\n'
        + "\n".join(rows)
        + "\n</svg>\n"
    )


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
