"""scikit-learn style wrappers around the segmentation and reconstruction models.

Images are arrays ``(n, *dims)`` or ``(n, 1, *dims)`` with values in [0, 1];
label maps are integer arrays ``(n, *dims)``.
"""
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from .config import LossConfig, ModelConfig, TrainConfig
from .codec import EncoderSpec
from .data import ImageDataset, batches
from .harness import build_model, train

__all__ = ["check_images", "check_labels", "SegmentationEstimator", "ReconstructionEstimator"]


def check_images(X, rank: Optional[int] = None) -> np.ndarray:
    """Validate an image batch and return it as float32 ``(n, *dims)``."""
    X = np.asarray(X)
    if X.dtype.kind not in "fiub":
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32)
    if X.ndim in (4, 5) and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim not in (3, 4):
        raise ValueError(f"expected images shaped (n, *dims) with 2 or 3 spatial axes, got {X.shape}")
    if rank is not None and X.ndim - 1 != rank:
        raise ValueError(f"estimator was fitted on rank-{rank} images, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    if len(X) == 0:
        raise ValueError("empty image batch")
    return X


def check_labels(y, X: np.ndarray, num_classes: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape:
        raise ValueError(f"label maps {y.shape} must match images {X.shape}")
    if y.dtype.kind == "f":
        if not np.all(y == np.round(y)):
            raise ValueError("label maps must hold integer class indices")
    elif y.dtype.kind not in "iub":
        raise ValueError(f"label maps must be integer, got dtype {y.dtype}")
    y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y


class _ModelEstimator(BaseEstimator):
    architecture = "sem"

    def __init__(self, backbone: str = "conv", channels: int = 16, num_down: Optional[int] = None,
                 patch_size: Optional[int] = None, hierarchical: bool = False, epochs: int = 50,
                 lr: float = 1e-3, batch_size: int = 4, seed: int = 0):
        self.backbone = backbone
        self.channels = channels
        self.num_down = num_down
        self.patch_size = patch_size
        self.hierarchical = hierarchical
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self, rank: int, architecture: Optional[str] = None, **extra) -> ModelConfig:
        arch = ("h_" if self.hierarchical else "") + (architecture or self.architecture)
        encoder = EncoderSpec(backbone=self.backbone, rank=rank, channels=self.channels, num_down=self.num_down,
                              patch_size=self.patch_size)
        train_cfg = TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)
        return ModelConfig(architecture=arch, encoder=encoder, train=train_cfg, **extra)

    def _fit(self, cfg, dataset):
        result = train(cfg, {"train": dataset}, output_dir=False, compute_metrics=False)
        model = build_model(cfg)
        model.load_state_dict(result.best_state)
        self.model_ = model.eval()
        self.config_ = cfg
        self.history_ = result.history
        self.rank_ = cfg.encoder.rank
        return self

    @torch.no_grad()
    def _outputs(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.rank_)
        outs = []
        for batch in batches(ImageDataset.from_arrays(X), self.batch_size, shuffle=False):
            outs.append(self.model_(batch["image"]))
        return torch.cat(outs).numpy()


class SegmentationEstimator(_ModelEstimator):
    """Semantic segmentation (CE + Dice) with optional hierarchical heads."""

    architecture = "sem"

    def __init__(self, num_classes: Optional[int] = None, backbone: str = "conv", channels: int = 16,
                 num_down: Optional[int] = None, patch_size: Optional[int] = None, hierarchical: bool = False,
                 epochs: int = 50, lr: float = 1e-3, batch_size: int = 4, seed: int = 0):
        super().__init__(backbone, channels, num_down, patch_size, hierarchical, epochs, lr, batch_size, seed)
        self.num_classes = num_classes

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X, self.num_classes)
        k = self.num_classes or max(2, int(y.max()) + 1)
        self.classes_ = np.arange(k)
        cfg = self._config(X.ndim - 1, num_classes=k)
        return self._fit(cfg, ImageDataset.from_arrays(X, y))

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.from_numpy(self._outputs(X))
        return logits.softmax(1).numpy()

    def predict(self, X) -> np.ndarray:
        return self._outputs(X).argmax(1)

    def score(self, X, y) -> float:
        """Mean foreground Dice over the samples."""
        pred = self.predict(X)
        y = check_labels(y, check_images(X, self.rank_), len(self.classes_))
        return float(np.mean([L.dice_score(p, t, len(self.classes_)) for p, t in zip(pred, y)]))


class ReconstructionEstimator(_ModelEstimator, TransformerMixin):
    """Auto-encoder; ``fit(X, y)`` learns ``X -> y`` (``y`` defaults to ``X``)."""

    architecture = "ae"

    def __init__(self, variational: bool = False, recon: str = "mse", kl_weight: float = 1e-4,
                 backbone: str = "conv", channels: int = 16, num_down: Optional[int] = None,
                 patch_size: Optional[int] = None, hierarchical: bool = False, epochs: int = 50,
                 lr: float = 1e-3, batch_size: int = 4, seed: int = 0):
        super().__init__(backbone, channels, num_down, patch_size, hierarchical, epochs, lr, batch_size, seed)
        self.variational = variational
        self.recon = recon
        self.kl_weight = kl_weight

    def _config(self, rank, **extra):
        if self.variational and self.hierarchical:
            raise ValueError("a variational model cannot be hierarchical")
        arch = "vae" if self.variational else "ae"
        return super()._config(rank, arch, loss=LossConfig(recon=self.recon, kl_weight=self.kl_weight), **extra)

    def fit(self, X, y=None):
        X = check_images(X)
        ds = ImageDataset.from_arrays(X)
        if y is not None:
            y = check_images(y)
            if y.shape != X.shape:
                raise ValueError(f"targets {y.shape} must match inputs {X.shape}")
            for item, target in zip(ds.items, y):
                item["target"] = torch.from_numpy(target).unsqueeze(0)
        return self._fit(self._config(X.ndim - 1), ds)

    def transform(self, X) -> np.ndarray:
        return self._outputs(X)[:, 0]

    def predict(self, X) -> np.ndarray:
        return self.transform(X)

    def score(self, X, y=None) -> float:
        """Mean PSNR (dB) of the reconstruction against ``y`` (or ``X``)."""
        X = check_images(X, self.rank_)
        target = X if y is None else check_images(y, self.rank_)
        return float(np.mean([L.psnr(p, t) for p, t in zip(self.transform(X), target)]))
