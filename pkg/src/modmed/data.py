"""Datasets, preprocessing, fold splits, k-space undersampling and synthetic shapes."""
import csv
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "TASKS",
    "ManifestEntry",
    "DatasetManifest",
    "FoldSplit",
    "kfold_split",
    "nonzero_crop",
    "center_crop",
    "resize",
    "minmax_normalize",
    "preprocess",
    "line_mask",
    "kspace_undersample",
    "slice_volume",
    "synth_shapes",
    "synth_shapes_dataset",
    "load_array",
    "save_array",
    "ImageDataset",
    "epoch_order",
    "batches",
]

TASKS = ("segmentation", "reconstruction", "generation")
NUM_FOLDS = 5


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    label: Optional[str] = None


@dataclass
class DatasetManifest:
    """Sample list stored as ``manifest.csv`` with columns ``id,image,label``.

    Paths are relative to ``root``.
    """

    entries: List[ManifestEntry]
    rank: int = 2
    task: str = "segmentation"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        labelled = {e.label is not None for e in self.entries}
        if len(labelled) > 1:
            raise ValueError("either every manifest entry has a label or none does")
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        self.root = Path(self.root)

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.entries]

    @property
    def has_labels(self) -> bool:
        return bool(self.entries) and self.entries[0].label is not None

    def __len__(self):
        return len(self.entries)

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest([e for e in self.entries if e.id in keep], self.rank, self.task, self.root)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write(f"# rank={self.rank} task={self.task}\n")
            writer = csv.writer(fh)
            writer.writerow(["id", "image", "label"])
            for e in self.entries:
                writer.writerow([e.id, e.image, e.label or ""])
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        meta = {"rank": "2", "task": "segmentation"}
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        if lines and lines[0].startswith("#"):
            for item in lines[0][1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
            lines = lines[1:]
        rows = list(csv.DictReader(lines))
        entries = [ManifestEntry(r["id"], r["image"], r.get("label") or None) for r in rows]
        return cls(entries, int(meta["rank"]), meta["task"], path.parent)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    """Assignment of ids to folds 1..5: folds 1-3 train, 4 validation, 5 test."""

    folds: Dict[str, int]
    seed: int

    def ids(self, split: str) -> List[str]:
        wanted = {"train": (1, 2, 3), "val": (4,), "test": (5,)}
        if split not in wanted:
            raise ValueError(f"split must be train, val or test, got {split!r}")
        return [i for i, f in self.folds.items() if f in wanted[split]]

    def fold_sizes(self) -> List[int]:
        return [sum(1 for f in self.folds.values() if f == k) for k in range(1, NUM_FOLDS + 1)]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            writer = csv.writer(fh)
            writer.writerow(["id", "fold"])
            for i, f in self.folds.items():
                writer.writerow([i, f])
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FoldSplit":
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        seed = int(lines[0].split("=")[1]) if lines and lines[0].startswith("#") else 0
        rows = csv.DictReader(lines[1:] if lines[0].startswith("#") else lines)
        return cls({r["id"]: int(r["fold"]) for r in rows}, seed)


def kfold_split(ids: Sequence[str], seed: int) -> FoldSplit:
    """Random 5-fold split; earlier folds take the remainder so sizes differ by at most one."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = {}
    for k, chunk in enumerate(np.array_split(order, NUM_FOLDS), start=1):
        for j in chunk:
            folds[ids[j]] = k
    return FoldSplit({i: folds[i] for i in ids}, seed)


# ---------------------------------------------------------------------------
# preprocessing


def nonzero_crop(image: np.ndarray, label: Optional[np.ndarray] = None):
    """Crop to the bounding box of non-zero values (the label is cropped identically)."""
    nz = np.nonzero(image)
    if not nz[0].size:
        return (image, label) if label is not None else image
    box = tuple(slice(int(a.min()), int(a.max()) + 1) for a in nz)
    cropped = image[box]
    return (cropped, label[box]) if label is not None else cropped


def center_crop(image: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Central window of ``size`` over the trailing axes; axes already smaller are kept."""
    size = tuple(size)
    lead = image.ndim - len(size)
    box = [slice(None)] * lead
    for d, s in zip(image.shape[lead:], size):
        s = min(s, d)
        start = (d - s) // 2
        box.append(slice(start, start + s))
    return image[tuple(box)]


def resize(image: np.ndarray, dims: Sequence[int], label: bool = False) -> np.ndarray:
    """Resize the trailing ``len(dims)`` axes; labels use nearest interpolation and keep their dtype."""
    dims = tuple(int(d) for d in dims)
    if tuple(image.shape[-len(dims):]) == dims:
        return image
    rank = len(dims)
    x = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float64)
    lead = x.shape[:-rank]
    x = x.reshape(1, -1, *x.shape[-rank:])
    if label:
        out = F.interpolate(x, size=dims, mode="nearest")
        return out.reshape(*lead, *dims).numpy().astype(image.dtype)
    mode = "bilinear" if rank == 2 else "trilinear"
    out = F.interpolate(x, size=dims, mode=mode, align_corners=False)
    return out.reshape(*lead, *dims).numpy()


def minmax_normalize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros_like(image)
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


def preprocess(image: np.ndarray, target_dims: Optional[Sequence[int]] = None, crop_center: Optional[Sequence[int]] = None,
               crop_nonzero: bool = False, label: Optional[np.ndarray] = None):
    """Optional non-zero crop, then center crop, resize and min-max normalisation to [0, 1].

    A label map, when given, follows the same geometry with nearest interpolation;
    the call then returns ``(image, label)``.
    """
    image = np.asarray(image)
    if crop_nonzero:
        if label is not None:
            image, label = nonzero_crop(image, label)
        else:
            image = nonzero_crop(image)
    if crop_center is not None:
        image = center_crop(image, crop_center)
        if label is not None:
            label = center_crop(label, crop_center)
    if target_dims is not None:
        image = resize(image, target_dims)
        if label is not None:
            label = resize(label, target_dims, label=True)
    image = minmax_normalize(image).astype(np.float32)
    return (image, label) if label is not None else image


# ---------------------------------------------------------------------------
# k-space


def line_mask(num_lines: int, keep_fraction: float = 0.1, center_fraction: float = 0.04,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Boolean phase-encode line mask keeping a central band plus random lines.

    ``round(keep_fraction * num_lines)`` lines are kept in total, the central
    ``round(center_fraction * num_lines)`` always among them.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if not 0.0 <= center_fraction <= keep_fraction:
        raise ValueError("center_fraction must lie in [0, keep_fraction]")
    rng = np.random.default_rng() if rng is None else rng
    n_keep = max(1, int(round(keep_fraction * num_lines)))
    n_center = min(int(round(center_fraction * num_lines)), n_keep)
    mask = np.zeros(num_lines, dtype=bool)
    start = (num_lines - n_center) // 2
    mask[start:start + n_center] = True
    rest = np.flatnonzero(~mask)
    mask[rng.choice(rest, n_keep - n_center, replace=False)] = True
    return mask


def kspace_undersample(data: np.ndarray, keep_fraction: float = 0.1, rng: Optional[np.random.Generator] = None,
                       center_fraction: float = 0.04, is_kspace: bool = False, mask: Optional[np.ndarray] = None,
                       axis: int = -2) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-filled reconstruction from line-undersampled k-space.

    ``data`` is a 2D magnitude image (its centred orthonormal FFT is taken) or,
    with ``is_kspace``, a centred complex spectrum. Lines along ``axis`` (the
    phase-encode direction) are kept per ``mask`` (1-d, or drawn with
    :func:`line_mask`). Returns ``(|IFFT(mask * k)|, mask2d)`` where ``mask2d``
    is the broadcast binary mask, constant along the readout axis.
    """
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {data.shape}")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    axis = axis % 2
    if is_kspace:
        k = data.astype(np.complex128)
    else:
        k = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(data.astype(np.float64)), norm="ortho"))
    if mask is None:
        mask = line_mask(data.shape[axis], keep_fraction, center_fraction, rng)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1 or mask.shape[0] != data.shape[axis]:
        raise ValueError("mask must be 1-d with one entry per phase-encode line")
    shape = [1, 1]
    shape[axis] = -1
    mask2d = np.broadcast_to(mask.reshape(shape), data.shape).astype(np.float32)
    image = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(k * mask2d), norm="ortho"))
    return np.abs(image), mask2d


def slice_volume(volume: np.ndarray, drop_first: int = 0, axis: int = 0) -> List[np.ndarray]:
    if drop_first < 0:
        raise ValueError("drop_first must be non-negative")
    volume = np.moveaxis(np.asarray(volume), axis, 0)
    return [volume[i] for i in range(drop_first, volume.shape[0])]


# ---------------------------------------------------------------------------
# synthetic shapes


def _draw_shape(grid, rng, rank, scale):
    dims = np.array([g.shape for g in grid][0])
    center = rng.uniform(0.15, 0.85, size=rank) * dims
    radii = np.maximum(scale * dims * rng.uniform(0.6, 1.4, size=rank), 1.5)
    rel = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    if rng.random() < 0.5:
        return sum(v ** 2 for v in rel) <= 1.0
    return np.all([np.abs(v) <= 1.0 for v in rel], axis=0)


def synth_shapes(dims: Sequence[int], rng: np.random.Generator, fg_band: Tuple[float, float] = (0.05, 0.40),
                 num_classes: int = 2, max_tries: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """One image/mask pair of random ellipses and boxes at large, medium and small scales.

    Shapes take class ``1 + (i % (num_classes - 1))``. Intensities are a
    per-class level plus mild noise, clipped to [0, 1]. The foreground fraction
    is kept inside ``fg_band`` by rejection.
    """
    dims = tuple(int(d) for d in dims)
    rank = len(dims)
    grid = np.meshgrid(*[np.arange(d) + 0.5 for d in dims], indexing="ij")
    for _ in range(max_tries):
        label = np.zeros(dims, dtype=np.int64)
        count = 0
        for scale, n in ((0.22, 1), (0.1, rng.integers(1, 3)), (0.05, rng.integers(1, 4))):
            for _ in range(int(n)):
                label[_draw_shape(grid, rng, rank, scale)] = 1 + count % (num_classes - 1)
                count += 1
        frac = float((label > 0).mean())
        if fg_band[0] <= frac <= fg_band[1]:
            break
    else:
        raise RuntimeError(f"could not place shapes inside foreground band {fg_band}")
    levels = np.linspace(0.15, 0.85, num_classes)
    image = levels[label] + rng.normal(0.0, 0.03, size=dims)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def synth_shapes_dataset(n: int, dims: Sequence[int] = (64, 64), seed: int = 0, out: Optional[Union[str, Path]] = None,
                         num_classes: int = 2, fg_band: Tuple[float, float] = (0.05, 0.40)):
    """Generate ``n`` synthetic pairs; deterministic per seed.

    Without ``out`` returns ``(images, labels)`` arrays of shape ``(n, *dims)``.
    With ``out`` writes ``images/``, ``labels/``, ``manifest.csv`` and
    ``split.csv`` under it and returns the :class:`DatasetManifest`.
    """
    rng = np.random.default_rng(seed)
    pairs = [synth_shapes(dims, rng, fg_band, num_classes) for _ in range(n)]
    images = np.stack([p[0] for p in pairs])
    labels = np.stack([p[1] for p in pairs])
    if out is None:
        return images, labels
    root = Path(out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    ext = ".png" if len(dims) == 2 else ".npy"
    entries = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        sid = f"shape_{i:04d}"
        save_array(root / "images" / f"{sid}{ext}", img)
        save_array(root / "labels" / f"{sid}{ext}", lab, label=True)
        entries.append(ManifestEntry(sid, f"images/{sid}{ext}", f"labels/{sid}{ext}"))
    manifest = DatasetManifest(entries, len(dims), "segmentation", root)
    manifest.save(root / "manifest.csv")
    kfold_split(manifest.ids, seed).save(root / "split.csv")
    return manifest


# ---------------------------------------------------------------------------
# file I/O


def save_array(path: Union[str, Path], array: np.ndarray, label: bool = False) -> Path:
    """Write PNG/TIFF (2D, 8-bit for images scaled from [0, 1]), NIfTI or ``.npy``."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith((".png", ".tif", ".tiff")):
        from PIL import Image

        if array.ndim != 2:
            raise ValueError("raster formats hold 2D arrays only")
        data = array.astype(np.uint8) if label else np.round(np.clip(array, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(data).save(path)
    elif name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        data = np.asarray(array)
        data = data.astype(np.int32) if label or data.dtype.kind in "iub" else data.astype(np.float32)
        nib.save(nib.Nifti1Image(data, np.eye(4)), str(path))
    elif name.endswith(".npy"):
        np.save(path, np.asarray(array))
    else:
        raise ValueError(f"unsupported file format: {path}")
    return path


def load_array(path: Union[str, Path], label: bool = False) -> np.ndarray:
    path = Path(path)
    name = path.name.lower()
    if name.endswith((".png", ".tif", ".tiff")):
        from PIL import Image

        data = np.asarray(Image.open(path))
        if data.ndim == 3:
            data = data[..., 0]
        return data.astype(np.int64) if label else data.astype(np.float32) / (255.0 if data.dtype == np.uint8 else 1.0)
    if name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        data = np.asarray(nib.load(str(path)).dataobj)
    elif name.endswith(".npy"):
        data = np.load(path)
    else:
        raise ValueError(f"unsupported file format: {path}")
    return data.astype(np.int64) if label else data.astype(np.float32)


# ---------------------------------------------------------------------------
# loading


class ImageDataset:
    """In-memory dataset over a manifest; items are dicts of channel-first tensors."""

    def __init__(self, manifest: DatasetManifest, ids: Optional[Sequence[str]] = None,
                 target_dims: Optional[Sequence[int]] = None, crop_center: Optional[Sequence[int]] = None,
                 crop_nonzero: bool = False):
        self.manifest = manifest if ids is None else manifest.subset(ids)
        self.items = []
        for e in self.manifest.entries:
            image = load_array(self.manifest.root / e.image)
            label = load_array(self.manifest.root / e.label, label=True) if e.label else None
            out = preprocess(image, target_dims, crop_center, crop_nonzero, label)
            image, label = out if label is not None else (out, None)
            item = {"id": e.id, "image": torch.from_numpy(np.ascontiguousarray(image)).unsqueeze(0)}
            if label is not None:
                item["target"] = torch.from_numpy(np.ascontiguousarray(label)).long()
            self.items.append(item)

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: Optional[np.ndarray] = None, ids=None) -> "ImageDataset":
        self = cls.__new__(cls)
        self.manifest = None
        ids = ids or [f"s{i:04d}" for i in range(len(images))]
        self.items = []
        for i, sid in enumerate(ids):
            item = {"id": sid, "image": torch.as_tensor(images[i], dtype=torch.float32).unsqueeze(0)}
            if labels is not None:
                item["target"] = torch.as_tensor(labels[i]).long()
            self.items.append(item)
        return self

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    """Sample order for an epoch, a pure function of ``(seed, epoch)``."""
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def collate(items: Sequence[dict]) -> dict:
    batch = {"id": [it["id"] for it in items]}
    for key in items[0]:
        if key != "id":
            batch[key] = torch.stack([it[key] for it in items])
    return batch


def batches(dataset, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True, workers: int = 0,
            depth: int = 4):
    """Collated batches in :func:`epoch_order`.

    With ``workers > 0`` batches are collated by a thread pool and at most
    ``depth`` of them are in flight; they are still yielded in order, so
    worker timing never changes what the caller sees.
    """
    order = epoch_order(len(dataset), seed, epoch, shuffle)
    chunks = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
    load = lambda chunk: collate([dataset[int(i)] for i in chunk])
    if workers <= 0:
        for chunk in chunks:
            yield load(chunk)
        return
    with ThreadPoolExecutor(workers) as pool:
        pending = deque()
        for chunk in chunks:
            pending.append(pool.submit(load, chunk))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
