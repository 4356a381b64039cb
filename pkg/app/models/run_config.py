# app/models/run_config.py
"""各命令的运行配置。默认值来自 settings，可被配置文件与命令行参数覆盖。"""
from typing import List

from pydantic import BaseModel, Field, field_validator, model_validator

from app.core.config import settings
from app.core.model_config import EncoderKind, ScheduleKind


class ModelConfig(BaseModel):
    image_size: int = settings.IMAGE_SIZE
    num_classes: int = settings.NUM_CLASSES
    channels: List[int] = list(settings.ENCODER_CHANNELS)
    blocks: List[int] = list(settings.ENCODER_BLOCKS)
    head_dim: int = settings.HEAD_DIM
    cond_channels: int = settings.COND_CHANNELS
    embed_dim: int = settings.EMBED_DIM
    decoder_hidden: int = settings.DECODER_HIDDEN
    decoder_heads: int = settings.DECODER_HEADS
    decoder_points: int = settings.DECODER_POINTS
    decoder_layers: int = settings.DECODER_LAYERS
    encoder_kind: EncoderKind = EncoderKind.dat
    schedule: ScheduleKind = ScheduleKind(settings.SCHEDULE)
    scale: float = Field(default=settings.SCALE, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if len(self.channels) != 4 or len(self.blocks) != 4:
            raise ValueError("编码器必须有 4 个 stage")
        if self.image_size % 32:
            raise ValueError(f"图像尺寸必须能被 32 整除, 得到 {self.image_size}")
        if self.decoder_hidden % self.decoder_heads:
            raise ValueError("decoder_hidden 必须能被 decoder_heads 整除")
        if self.num_classes < 1:
            raise ValueError("num_classes 至少为 1")
        return self


class TrainConfig(BaseModel):
    lr: float = Field(default=settings.LR, ge=0)
    weight_decay: float = Field(default=settings.WEIGHT_DECAY, ge=0)
    epochs: int = Field(default=settings.EPOCHS, ge=1)
    batch_size: int = Field(default=settings.BATCH_SIZE, ge=1)
    warmup: float = settings.WARMUP
    power: float = Field(default=settings.POLY_POWER, gt=0)
    grad_clip: float = settings.GRAD_CLIP
    ckpt_every: int = Field(default=settings.CKPT_EVERY, ge=1)
    seed: int = settings.SEED
    num_workers: int = Field(default=settings.NUM_WORKERS, ge=1)
    augment: bool = True

    @field_validator("warmup")
    @classmethod
    def _warmup_range(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError(f"warmup 比例必须在 [0,1), 得到 {v}")
        return v


class SamplerConfig(BaseModel):
    steps: int = Field(default=settings.STEPS, ge=1)
    td: float = Field(default=settings.TD, ge=0)
    seed: int = settings.SEED
