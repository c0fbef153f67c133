"""Model building, training, evaluation, sampling and checkpoints."""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .architectures import AutoEncoder, BaseModel, DiffusionModel, NoiseSchedule, SegmentationModel, TaskModel
from .config import ConfigError, ModelConfig, emit_config, parse_config
from .data import (
    DatasetManifest,
    FoldSplit,
    ImageDataset,
    batches,
    kfold_split,
    kspace_undersample,
    synth_shapes_dataset,
)

__all__ = [
    "build_model",
    "seed_everything",
    "load_datasets",
    "linear_lr_lambda",
    "TrainResult",
    "MetricReport",
    "train",
    "evaluate_model",
    "evaluate",
    "sample",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "modmed-checkpoint/1"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def build_model(cfg: ModelConfig) -> TaskModel:
    """Instantiate the task model described by ``cfg``."""
    ctx = cfg.context
    arch = cfg.architecture
    try:
        base = BaseModel(
            cfg.encoder,
            cfg.out_channels,
            time_embedding=bool(ctx.time_embedding),
            num_classes=ctx.num_classes,
            cond_channels=ctx.cond_channels,
            ctx_dim=ctx.ctx_dim,
            share_condition=ctx.share_condition,
            hierarchical=cfg.hierarchical,
            variational=arch == "vae",
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    loss = cfg.loss
    if cfg.task == "segmentation":
        return SegmentationModel(base, loss.ce_weight, loss.dice_weight, loss.pyramid_weight)
    if cfg.task == "reconstruction":
        return AutoEncoder(base, loss.recon, loss.kl_weight, loss.pyramid_weight)
    d = cfg.diffusion
    schedule = NoiseSchedule.linear(d.T, d.beta_start, d.beta_end)
    return DiffusionModel(base, schedule, d.sampler, d.sample_steps, d.eta, d.ensemble)


# ---------------------------------------------------------------------------
# data


def _undersampled(dataset: ImageDataset, keep: float, center: float, seed: int) -> ImageDataset:
    rng = np.random.default_rng(seed)
    for item in dataset.items:
        image = item["image"][0].numpy()
        zf, _ = kspace_undersample(image, keep, rng, center_fraction=center)
        item["target"] = item["image"]
        item["image"] = torch.from_numpy(zf.astype(np.float32)).unsqueeze(0)
    return dataset


def load_datasets(cfg: ModelConfig) -> Dict[str, ImageDataset]:
    """Train/val/test datasets from ``data.root`` (manifest + split) or synthetic shapes."""
    d = cfg.data
    if d.root is None:
        images, labels = synth_shapes_dataset(d.synthetic_n, d.synthetic_dims, d.split_seed)
        ids = [f"shape_{i:04d}" for i in range(len(images))]
        split = kfold_split(ids, d.split_seed)
        out = {}
        for name in ("train", "val", "test"):
            idx = [ids.index(i) for i in split.ids(name)]
            out[name] = ImageDataset.from_arrays(images[idx], labels[idx], [ids[i] for i in idx])
    else:
        root = Path(d.root)
        manifest = DatasetManifest.load(root / "manifest.csv")
        split_path = root / "split.csv"
        split = FoldSplit.load(split_path) if split_path.exists() else kfold_split(manifest.ids, d.split_seed)
        out = {
            name: ImageDataset(manifest, split.ids(name), d.target_dims, d.crop_center, d.crop_nonzero)
            for name in ("train", "val", "test")
        }
    for k, (name, ds) in enumerate(out.items()):
        if cfg.task != "segmentation":
            for item in ds.items:
                item.pop("target", None)
            if d.undersample_keep is not None:
                _undersampled(ds, d.undersample_keep, d.undersample_center, d.split_seed * 3 + k)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Union[str, Path], model: TaskModel, cfg: ModelConfig, **meta) -> Path:
    """Write a self-describing checkpoint: format tag, YAML config echo, parameters and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "config": emit_config(cfg), "state_dict": model.state_dict(),
                "meta": meta}, path)
    return path


def load_checkpoint(path: Union[str, Path]):
    """Return ``(model, cfg, meta)``; the model is in evaluation mode."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    cfg = parse_config(blob["config"])
    model = build_model(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, cfg, blob.get("meta", {})


# ---------------------------------------------------------------------------
# training


def linear_lr_lambda(total_steps: int):
    """Multiplier decaying linearly from 1 at step 0 to 0 at ``total_steps``."""
    return lambda step: max(0.0, 1.0 - step / total_steps)


@dataclass
class MetricReport:
    split: str
    metrics: Dict[str, float]
    per_sample: List[Dict[str, float]] = field(default_factory=list)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        keys = sorted(self.metrics)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id"] + keys)
            for row in self.per_sample:
                writer.writerow([row["id"]] + [repr(row[k]) for k in keys])
            writer.writerow(["mean"] + [repr(self.metrics[k]) for k in keys])
        return path


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_state: dict
    output_dir: Optional[Path] = None

    @property
    def best_checkpoint(self) -> Optional[Path]:
        return None if self.output_dir is None else self.output_dir / "best.pt"


@torch.no_grad()
def _mean_loss(model: TaskModel, dataset, batch_size: int, seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    losses, weights = [], []
    for batch in batches(dataset, batch_size, shuffle=False):
        losses.append(float(model.loss(batch, gen)))
        weights.append(len(batch["id"]))
    return float(np.average(losses, weights=weights)) if losses else math.nan


def train(cfg: ModelConfig, datasets: Optional[Dict[str, ImageDataset]] = None, output_dir=None,
          model: Optional[TaskModel] = None, compute_metrics: Optional[bool] = None) -> TrainResult:
    """Adam with per-step linear learning-rate decay; keeps the best validation state.

    ``output_dir`` (default ``cfg.output_dir``; ``False`` disables writing) receives
    ``config.yaml``, ``metrics.csv``, ``best.pt`` and ``last.pt``.
    """
    tc = cfg.train
    seed_everything(tc.seed)
    if datasets is None:
        datasets = load_datasets(cfg)
    if model is None:
        model = build_model(cfg)
    if compute_metrics is None:
        compute_metrics = cfg.task != "generation"
    out = None if output_dir is False else Path(output_dir or cfg.output_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(emit_config(cfg))

    train_set = datasets["train"]
    val_set = datasets.get("val")
    if val_set is not None and len(val_set) == 0:
        val_set = None
    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    lr_fn = linear_lr_lambda(total) if tc.schedule == "linear" else (lambda step: 1.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_fn)
    gen = torch.Generator().manual_seed(tc.seed)

    history = []
    best, best_epoch, best_state = math.inf, -1, None
    for epoch in range(tc.epochs):
        model.train()
        running, count = 0.0, 0
        for i, batch in enumerate(batches(train_set, tc.batch_size, tc.seed, epoch, workers=tc.workers)):
            loss = model.loss(batch, gen)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {i} (ids {batch['id']})"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(batch["id"])
            count += len(batch["id"])
        row = {"epoch": epoch, "lr": opt.param_groups[0]["lr"], "train_loss": running / count}
        if (epoch + 1) % tc.eval_every == 0 or epoch == tc.epochs - 1:
            model.eval()
            monitor = val_set if val_set is not None else train_set
            row["val_loss"] = _mean_loss(model, monitor, tc.batch_size, tc.seed)
            if compute_metrics:
                report = evaluate_model(model, monitor, "val", tc.batch_size, tc.seed)
                row.update({f"val_{k}": v for k, v in report.metrics.items()})
            if row["val_loss"] < best:
                best, best_epoch = row["val_loss"], epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out is not None:
                    save_checkpoint(out / "best.pt", model, cfg, epoch=epoch, val_loss=best)
        history.append(row)
        log.info("epoch %d %s", epoch, {k: v for k, v in row.items() if k != "epoch"})
    if out is not None:
        save_checkpoint(out / "last.pt", model, cfg, epoch=tc.epochs - 1)
        _write_history(out / "metrics.csv", history)
    return TrainResult(history, best_epoch, best_state, out)


def _write_history(path: Path, history: List[dict]) -> None:
    keys = []
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# evaluation and sampling


@torch.no_grad()
def evaluate_model(model: TaskModel, dataset, split: str = "test", batch_size: int = 4, seed: int = 0) -> MetricReport:
    """Task metrics per sample and their mean; deterministic for a fixed ``seed``."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for batch in batches(dataset, batch_size, shuffle=False):
        pred = model.predict(batch, gen) if isinstance(model, DiffusionModel) else model.predict(batch)
        for j, sid in enumerate(batch["id"]):
            one = {k: (v[j:j + 1] if isinstance(v, torch.Tensor) else v) for k, v in batch.items()}
            rows.append({"id": sid, **model.metrics(pred[j:j + 1], one)})
    model.train(was_training)
    keys = [k for k in rows[0] if k != "id"] if rows else []
    metrics = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    return MetricReport(split, metrics, rows)


def evaluate(checkpoint: Union[str, Path], split: str = "test", datasets=None, seed: int = 0) -> MetricReport:
    model, cfg, _ = load_checkpoint(checkpoint)
    if datasets is None:
        datasets = load_datasets(cfg)
    if split not in datasets:
        raise ValueError(f"unknown split {split!r}")
    return evaluate_model(model, datasets[split], split, cfg.train.batch_size, seed)


def sample(checkpoint: Union[str, Path], n: int = 1, ensemble: Optional[int] = None, condition=None,
           dims=None, seed: int = 0) -> torch.Tensor:
    """Draw ``n`` images from a diffusion checkpoint, each the mean of ``ensemble`` samples.

    ``condition`` is a tensor ``(n or 1, C, *dims)`` broadcast across the draws.
    """
    model, cfg, _ = load_checkpoint(checkpoint)
    if not isinstance(model, DiffusionModel):
        raise ValueError(f"sampling needs a ddpm checkpoint, got architecture {cfg.architecture}")
    if dims is None:
        if condition is not None:
            dims = tuple(condition.shape[2:])
        else:
            dims = tuple(cfg.encoder.input_dims or cfg.data.target_dims or cfg.data.synthetic_dims)
    if condition is not None and condition.shape[0] == 1 and n > 1:
        condition = condition.expand(n, *condition.shape[1:])
    shape = (n, cfg.encoder.in_channels, *dims)
    gen = torch.Generator().manual_seed(seed)
    return model.sample(shape, cond=condition, generator=gen, k=ensemble)
