"""Composable encoder-decoder models for 2D/3D medical image segmentation, reconstruction and generation."""
from .architectures import (
    AutoEncoder,
    BaseModel,
    DiffusionModel,
    NoiseSchedule,
    PyramidOutput,
    SegmentationModel,
    ddim_sample,
    ddpm_sample,
    ensemble_generate,
    h_model_loss,
    pyramid_loss,
    scale_to,
)
from .blocks import BLOCK_KINDS, ConvBlock, MambaBlock, ResBlock, SwinBlock, ViTBlock, make_block
from .codec import Decoder, Encoder, EncoderSpec
from .config import ModelConfig, emit_config, load_config, parse_config
from .harness import build_model, evaluate, load_checkpoint, sample, save_checkpoint, train
from .profiler import profile

__version__ = "0.1.0"
