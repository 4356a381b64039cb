# app/core/config.py
from typing import List

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PROJECT_NAME: str = "RGB-D DiffSeg"

    # --- 数据 ---
    IMAGE_SIZE: int = 64
    NUM_CLASSES: int = 6
    TRAIN_COUNT: int = 200
    TEST_COUNT: int = 50
    INVALID_RATE: float = 0.3
    # 合成数据集小物体子集评估时排除的大面积类别
    SYNTH_SMALL_OBJECT_IGNORES: List[str] = ["background"]

    # --- 编码器 (桌面规模) ---
    ENCODER_CHANNELS: List[int] = [32, 64, 128, 256]
    ENCODER_BLOCKS: List[int] = [1, 1, 2, 1]
    HEAD_DIM: int = 32
    COND_CHANNELS: int = 256

    # --- 扩散 / 解码器 ---
    EMBED_DIM: int = 32
    DECODER_HIDDEN: int = 64
    DECODER_HEADS: int = 4
    DECODER_POINTS: int = 4
    DECODER_LAYERS: int = 6
    SCHEDULE: str = "cosine"
    SCALE: float = 0.01
    STEPS: int = 3
    TD: float = 1.0

    # --- 训练 ---
    LR: float = 6e-5
    WEIGHT_DECAY: float = 0.01
    EPOCHS: int = 40
    BATCH_SIZE: int = 4
    WARMUP: float = 0.1
    POLY_POWER: float = 1.0
    GRAD_CLIP: float = 1.0
    CKPT_EVERY: int = 10
    SEED: int = 0
    NUM_WORKERS: int = 2

    # 打开后每个算子都会检查 NaN/Inf
    DEBUG_NUMERICS: bool = False

    model_config = SettingsConfigDict(env_prefix="DIFFSEG_", env_file=".env", case_sensitive=True, extra="ignore")


settings = Settings()
