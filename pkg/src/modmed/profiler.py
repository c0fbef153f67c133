"""Parameter count, peak memory and train/inference timing of segmentation models."""
import csv
import gc
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import psutil
import torch

from .architectures import BaseModel, SegmentationModel
from .blocks import MemoryGateError
from .codec import EncoderSpec

__all__ = ["ProfileRow", "ProfileReport", "count_parameters", "layer_layout", "profile", "parse_dims"]

HEADINGS = ("Block", "Layers", "Patch", "#Params (M)", "Memory (GB)", "Training time (s)",
            "Inference time (s)", "Memory source", "Status")


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parse_dims(text: str) -> Tuple[int, ...]:
    """``"32x32x32"`` -> ``(32, 32, 32)``."""
    try:
        dims = tuple(int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"cannot parse dims {text!r}; expected e.g. 64x64 or 32x32x32") from exc
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise ValueError(f"dims must have 2 or 3 positive entries, got {text!r}")
    return dims


def layer_layout(layers: int, num_down: int) -> dict:
    """Spread ``layers`` building blocks: one per encoder and decoder stage, the rest in the middle."""
    middle = layers - 2 * num_down
    if middle < 0:
        raise ValueError(f"{layers} layers cannot fill {num_down} down-sampling stages (need >= {2 * num_down})")
    return dict(blocks_per_stage=1, num_middle=middle, num_final=0)


@dataclass
class ProfileRow:
    block: str
    layers: int
    patch: str
    params_m: float
    memory_gb: Optional[float]
    train_time: Optional[float]
    infer_time: Optional[float]
    memory_source: str
    status: str = "ok"
    params: int = 0

    def cells(self):
        fmt = lambda v, spec: "n/a" if v is None else format(v, spec)
        return (self.block, str(self.layers), self.patch, f"{self.params_m:.4f}", fmt(self.memory_gb, ".4f"),
                fmt(self.train_time, ".4f"), fmt(self.infer_time, ".4f"), self.memory_source, self.status)


@dataclass
class ProfileReport:
    rows: List[ProfileRow]

    def row(self, block: str, layers: int, patch: str) -> ProfileRow:
        for r in self.rows:
            if (r.block, r.layers, r.patch) == (block, layers, patch):
                return r
        raise KeyError((block, layers, patch))

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HEADINGS)
            writer.writerows(r.cells() for r in self.rows)
        return path

    def to_table(self) -> str:
        cells = [HEADINGS] + [r.cells() for r in self.rows]
        widths = [max(len(c[i]) for c in cells) for i in range(len(HEADINGS))]
        return "\n".join(" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)


class _RssSampler:
    """Peak resident-set size sampled on a background thread."""

    def __init__(self, interval: float = 0.002):
        self.interval = interval
        self.proc = psutil.Process()
        self.peak = self.proc.memory_info().rss
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self.proc.memory_info().rss)
            time.sleep(self.interval)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self.proc.memory_info().rss)


def _best_of(fn, iters, repeats, sync):
    best = float("inf")
    for _ in range(repeats):
        sync()
        t0 = time.perf_counter()
        for _ in range(iters):
            fn()
        sync()
        best = min(best, time.perf_counter() - t0)
    return best


def _build(kind, layers, dims, channels, num_classes, max_tokens):
    rank = len(dims)
    num_down = 2 if rank == 2 else 3
    spec = EncoderSpec(backbone=kind, rank=rank, channels=channels, num_down=num_down,
                       max_attention_tokens=max_tokens, **layer_layout(layers, num_down))
    return SegmentationModel(BaseModel(spec, num_classes))


def _measure(model, dims, iters, batch, num_classes, device, warmup, repeats):
    model = model.to(device)
    x = torch.rand(batch, 1, *dims, device=device)
    y = torch.randint(0, num_classes, (batch, *dims), device=device)
    data = {"image": x, "target": y}
    opt = torch.optim.Adam(model.parameters(), lr=1e-4)

    def train_step():
        opt.zero_grad(set_to_none=True)
        model.loss(data).backward()
        opt.step()

    cuda = device.type == "cuda"
    sync = torch.cuda.synchronize if cuda else (lambda: None)
    if cuda:
        torch.cuda.reset_peak_memory_stats(device)
    sampler = None if cuda else _RssSampler()
    base_rss = psutil.Process().memory_info().rss
    if sampler:
        sampler.__enter__()
    try:
        model.train()
        for _ in range(warmup):
            train_step()
        train_time = _best_of(train_step, iters, repeats, sync)
        model.eval()
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            infer_time = _best_of(lambda: model(x), iters, repeats, sync)
    finally:
        if sampler:
            sampler.__exit__(None, None, None)
    if cuda:
        memory, source = torch.cuda.max_memory_reserved(device) / 2 ** 30, "cuda-reserved"
    else:
        memory, source = max(sampler.peak - base_rss, 0) / 2 ** 30, "rss"
    return memory, source, train_time, infer_time


def profile(block_kinds: Sequence[str], layer_counts: Sequence[int], patch_dims: Sequence[Union[str, Sequence[int]]],
            iters: int = 10, batch: int = 2, channels: int = 8, num_classes: int = 2, device: str = "cpu",
            warmup: int = 1, seed: int = 0, repeats: int = 1,
            max_attention_tokens: Optional[int] = 16384) -> ProfileReport:
    """Measure every (block kind, layer count, input dims) configuration sequentially.

    Times are totals over ``iters`` training steps and ``iters`` inference
    forwards, the best of ``repeats`` such passes. Memory is the CUDA peak reservation on GPU, otherwise the peak
    resident-set growth sampled during the run (labelled ``rss``). Rows that
    run out of memory or exceed ``max_attention_tokens`` in a global attention
    layer are marked failed; their parameter count is still reported.
    """
    if iters < 1 or batch < 1 or repeats < 1:
        raise ValueError("iters, batch and repeats must be >= 1")
    dev = torch.device(device)
    rows = []
    for kind in block_kinds:
        for layers in layer_counts:
            for dims in patch_dims:
                dims = parse_dims(dims) if isinstance(dims, str) else tuple(dims)
                key = "x".join(map(str, dims))
                torch.manual_seed(seed)
                gc.collect()
                model = _build(kind, int(layers), dims, channels, num_classes, max_attention_tokens)
                params = count_parameters(model)
                failed = lambda why: ProfileRow(kind, int(layers), key, params / 1e6, None, None, None, "n/a",
                                                f"failed: {why}", params)
                try:
                    mem, src, tt, it = _measure(model, dims, iters, batch, num_classes, dev, warmup, repeats)
                    rows.append(ProfileRow(kind, int(layers), key, params / 1e6, mem, tt, it, src, "ok", params))
                except (MemoryError, MemoryGateError, torch.cuda.OutOfMemoryError) as exc:
                    rows.append(failed(type(exc).__name__))
                except RuntimeError as exc:
                    if "out of memory" not in str(exc).lower():
                        raise
                    rows.append(failed("out of memory"))
                del model
    return ProfileReport(rows)
