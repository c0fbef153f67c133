"""Training losses and evaluation metrics.

Losses are differentiable torch functions. Metrics take hard labels or
intensity images (numpy arrays or tensors) and return Python floats.
"""
import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "cross_entropy_loss",
    "dice_loss",
    "mse_loss",
    "l1_loss",
    "kl_loss",
    "segmentation_loss",
    "dice_score",
    "miou",
    "psnr",
    "ssim",
    "gaussian_window",
    "DICE_SMOOTH",
]

DICE_SMOOTH = 1e-5


def _to_one_hot(target: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Index map ``(B, *dims)`` or one-hot ``(B, K, *dims)`` -> float one-hot ``(B, K, *dims)``."""
    if target.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8, torch.int8):
        if target.max() >= num_classes or target.min() < 0:
            raise ValueError(f"target labels out of range for {num_classes} classes")
        return F.one_hot(target.long(), num_classes).movedim(-1, 1).float()
    if target.shape[1] != num_classes:
        raise ValueError(f"class-count mismatch: prediction has {num_classes}, target {target.shape[1]}")
    return target.float()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise cross entropy; ``target`` is an index map or a one-hot/probability map."""
    if target.dtype.is_floating_point:
        if target.shape != logits.shape:
            raise ValueError(f"class-count mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
        return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()
    if target.max() >= logits.shape[1]:
        raise ValueError(f"class-count mismatch: label {int(target.max())} with {logits.shape[1]} classes")
    return F.cross_entropy(logits, target.long())


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - soft Dice`` per sample and class, averaged.

    ``probs`` is ``(B, K, *dims)`` with values in [0, 1]; ``target`` is an index
    map or a one-hot map.
    """
    onehot = _to_one_hot(target, probs.shape[1]).to(probs.dtype)
    if onehot.shape != probs.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(onehot.shape)}")
    dims = tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    total = probs.sum(dims) + onehot.sum(dims)
    return (1.0 - (2.0 * inter + smooth) / (total + smooth)).mean()


def segmentation_loss(logits, target, ce_weight: float = 1.0, dice_weight: float = 1.0):
    """Cross entropy plus soft Dice on softmax probabilities."""
    return ce_weight * cross_entropy_loss(logits, target) + dice_weight * dice_loss(logits.softmax(1), target)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.l1_loss(pred, target)


def kl_loss(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """``KL(N(mean, exp(logvar)) || N(0, 1))`` summed over latent units, averaged over the batch."""
    if mean.shape != logvar.shape:
        raise ValueError("mean and log-variance must have identical shapes")
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return kl.flatten(1).sum(1).mean()


# ---------------------------------------------------------------------------
# metrics


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def _overlap_counts(pred, target, num_classes):
    pred = _np(pred).astype(np.int64).ravel()
    target = _np(target).astype(np.int64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    inter = np.bincount(target[pred == target], minlength=num_classes)[:num_classes]
    p = np.bincount(pred, minlength=num_classes)[:num_classes]
    t = np.bincount(target, minlength=num_classes)[:num_classes]
    return inter, p, t


def _infer_classes(pred, target, num_classes):
    if num_classes is None:
        num_classes = int(max(_np(pred).max(), _np(target).max())) + 1
        num_classes = max(num_classes, 2)
    return num_classes


def dice_score(pred_labels, target, num_classes: Optional[int] = None, return_per_class: bool = False):
    """Hard-label Dice ``2|X n Y| / (|X| + |Y|)`` averaged over foreground classes.

    A class absent from both maps scores 1 and is left out of the mean; if every
    foreground class is absent from both the score is 1.
    """
    num_classes = _infer_classes(pred_labels, target, num_classes)
    inter, p, t = _overlap_counts(pred_labels, target, num_classes)
    denom = p + t
    present = denom > 0
    per_class = np.where(present, 2.0 * inter / np.maximum(denom, 1), 1.0)
    fg = present[1:]
    score = float(per_class[1:][fg].mean()) if fg.any() else 1.0
    return (score, per_class) if return_per_class else score


def miou(pred_labels, target, num_classes: Optional[int] = None, return_per_class: bool = False):
    """Mean over classes of ``|X n Y| / |X u Y|`` (background included).

    Classes absent from both maps score 1 and are excluded from the mean.
    """
    num_classes = _infer_classes(pred_labels, target, num_classes)
    inter, p, t = _overlap_counts(pred_labels, target, num_classes)
    union = p + t - inter
    present = union > 0
    per_class = np.where(present, inter / np.maximum(union, 1), 1.0)
    score = float(per_class[present].mean()) if present.any() else 1.0
    return (score, per_class) if return_per_class else score


def psnr(pred, target, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    pred = _np(pred).astype(np.float64)
    target = _np(target).astype(np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a: torch.Tensor, g: torch.Tensor, rank: int) -> torch.Tensor:
    # separable Gaussian, 'valid' region only
    out = a
    for axis in range(rank):
        shape = [1, 1] + [1] * rank
        shape[2 + axis] = g.numel()
        conv = F.conv2d if rank == 2 else F.conv3d
        out = conv(out, g.view(shape))
    return out


def ssim(pred, target, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over the valid region of a Gaussian-weighted window.

    Inputs with 2 or 4 dims are 2D images (``(H, W)`` or ``(N, C, H, W)``);
    inputs with 3 or 5 dims are volumes. The window shrinks to the largest odd
    size fitting the image when the image is smaller than ``win_size``.
    """
    a = torch.as_tensor(_np(pred), dtype=torch.float64)
    b = torch.as_tensor(_np(target), dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    rank = 2 if a.ndim in (2, 4) else 3
    a = a.reshape(-1, 1, *a.shape[-rank:])
    b = b.reshape(-1, 1, *b.shape[-rank:])
    size = min(win_size, *a.shape[2:])
    if size % 2 == 0:
        size -= 1
    g = torch.as_tensor(gaussian_window(size, sigma))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g, rank)
    mu_b = _filter_valid(b, g, rank)
    var_a = _filter_valid(a * a, g, rank) - mu_a ** 2
    var_b = _filter_valid(b * b, g, rank) - mu_b ** 2
    cov = _filter_valid(a * b, g, rank) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
