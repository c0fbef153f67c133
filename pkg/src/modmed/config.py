"""YAML run configuration: parsing with strict keys, defaults and echo."""
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union, get_args, get_origin, get_type_hints

import yaml

from .codec import EncoderSpec

__all__ = [
    "ARCHITECTURES",
    "ConfigError",
    "ContextConfig",
    "LossConfig",
    "DiffusionConfig",
    "TrainConfig",
    "DataConfig",
    "ModelConfig",
    "parse_config",
    "emit_config",
    "load_config",
    "config_from_dict",
]

ARCHITECTURES = ("sem", "h_sem", "ae", "h_ae", "vae", "ddpm")


class ConfigError(ValueError):
    pass


@dataclass
class ContextConfig:
    time_embedding: Optional[bool] = None  # None: on for ddpm only
    num_classes: int = 0
    cond_channels: int = 0
    ctx_dim: Optional[int] = None
    share_condition: bool = False


@dataclass
class LossConfig:
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    pyramid_weight: float = 1.0
    recon: str = "mse"
    kl_weight: float = 1e-4


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = "ddim"
    sample_steps: int = 50
    eta: float = 0.0
    ensemble: int = 1


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 3e-4
    epochs: int = 500
    batch_size: int = 4
    schedule: str = "linear"
    seed: int = 0
    eval_every: int = 1
    workers: int = 0


@dataclass
class DataConfig:
    root: Optional[str] = None
    target_dims: Optional[List[int]] = None
    crop_center: Optional[List[int]] = None
    crop_nonzero: bool = False
    split_seed: int = 0
    synthetic_n: int = 40
    synthetic_dims: List[int] = field(default_factory=lambda: [64, 64])
    undersample_keep: Optional[float] = None
    undersample_center: float = 0.04


@dataclass
class ModelConfig:
    architecture: str = "sem"
    hierarchical: Optional[bool] = None
    num_classes: int = 2
    out_channels: Optional[int] = None
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    context: ContextConfig = field(default_factory=ContextConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        arch = self.architecture
        if arch not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {arch!r}")
        if arch == "ddpm" and self.hierarchical:
            raise ConfigError(
                "ddpm cannot be combined with the hierarchical wrapper: vertical feature fusion "
                "is not recommended for diffusion models"
            )
        if self.hierarchical and arch in ("sem", "ae"):
            arch = self.architecture = "h_" + arch
        if self.hierarchical is False and arch.startswith("h_"):
            raise ConfigError(f"architecture {arch} is hierarchical but hierarchical: false was given")
        if arch == "vae" and self.hierarchical:
            raise ConfigError("the hierarchical wrapper is available for sem and ae only")
        self.hierarchical = arch.startswith("h_")
        if self.context.time_embedding is None:
            self.context.time_embedding = arch == "ddpm"
        if arch == "ddpm" and not self.context.time_embedding:
            raise ConfigError("ddpm requires time_embedding: true")
        if self.out_channels is None:
            self.out_channels = self.num_classes if self.task == "segmentation" else self.encoder.in_channels
        if self.task == "segmentation" and self.out_channels != self.num_classes:
            raise ConfigError("segmentation out_channels must equal num_classes")
        if self.loss.recon not in ("mse", "l1"):
            raise ConfigError(f"loss.recon must be mse or l1, got {self.loss.recon!r}")
        if self.loss.pyramid_weight < 0:
            raise ConfigError("loss.pyramid_weight must be >= 0")
        if self.diffusion.sampler not in ("ddim", "ddpm"):
            raise ConfigError("diffusion.sampler must be ddim or ddpm")
        if not 0.0 <= self.diffusion.eta <= 1.0:
            raise ConfigError("diffusion.eta must lie in [0, 1]")
        if not 1 <= self.diffusion.sample_steps <= self.diffusion.T:
            raise ConfigError("diffusion.sample_steps must lie in [1, T]")
        if self.train.optimizer != "adam":
            raise ConfigError("only the adam optimizer is supported")
        if self.train.schedule not in ("linear", "constant"):
            raise ConfigError("train.schedule must be linear or constant")
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")

    @property
    def task(self) -> str:
        return {"sem": "segmentation", "h_sem": "segmentation", "ddpm": "generation"}.get(
            self.architecture, "reconstruction"
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_dict() if isinstance(value, EncoderSpec) else (
                asdict(value) if hasattr(value, "__dataclass_fields__") else value
            )
        return out


def _coerce(value, tp, path: str):
    """Check ``value`` against a field annotation; numeric strings such as ``1e-3`` become floats.

    YAML 1.1 reads exponent notation without a dot as a string, hence the float rule.
    """
    origin = get_origin(tp)
    if origin is Union:
        options = get_args(tp)
        if value is None and type(None) in options:
            return None
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(value, option, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: {value!r} does not match {tp}")
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        (item,) = get_args(tp) or (None,)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be a number, got {value!r}") from None
    if tp is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{path} must be true or false, got {value!r}")
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    hints = get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        path = f"{where}.{name}".lstrip(".")
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, path) if sub else _coerce(value, hints.get(name), path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


_SECTIONS = {
    (ModelConfig, "encoder"): EncoderSpec,
    (ModelConfig, "context"): ContextConfig,
    (ModelConfig, "loss"): LossConfig,
    (ModelConfig, "diffusion"): DiffusionConfig,
    (ModelConfig, "train"): TrainConfig,
    (ModelConfig, "data"): DataConfig,
}


def config_from_dict(data: dict) -> ModelConfig:
    return _build(ModelConfig, data, "")


def parse_config(text: str) -> ModelConfig:
    """Parse YAML text; unknown keys and invalid combinations raise :class:`ConfigError`."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    return config_from_dict(data or {})


def emit_config(cfg: ModelConfig) -> str:
    """Fully defaulted YAML echo; ``parse_config(emit_config(cfg)) == cfg``."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def load_config(path: Union[str, Path]) -> ModelConfig:
    return parse_config(Path(path).read_text())
