# app/services/segmenter.py
import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import DataError
from app.models.run_config import ModelConfig
from app.services import tensor as T
from app.services.checkpoint import load_checkpoint
from app.services.diffusion import LabelCodebook, NoiseSchedule
from app.services.encoder import normalize_depth, normalize_rgb
from app.services.fusion import RgbdEncoder
from app.services.mask_decoder import MaskDecoder
from app.services.nn import Module
from app.services.tensor import Tensor

logger = logging.getLogger(__name__)


class DiffSegModel(Module):
    """完整模型：双分支编码 + 融合 + FPN（条件信号）、标签码本、去噪解码器。"""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 0])
        self.cfg = cfg
        self.encoder = RgbdEncoder(cfg, rng)
        self.codebook = LabelCodebook(cfg.num_classes, cfg.embed_dim, cfg.scale, rng)
        self.decoder = MaskDecoder(cfg, rng)
        self.schedule = NoiseSchedule(cfg.schedule)
        logger.info(f"[模型] encoder={cfg.encoder_kind.value}, schedule={cfg.schedule.value}, "
                    f"s={cfg.scale}, 参数量={self.num_parameters():,}")

    def inputs(self, rgb: np.ndarray, depth: np.ndarray) -> Tuple[Tensor, Tensor]:
        """原始 rgb [h,w,3] 与深度（毫米，0 无效）转为编码器输入 [3,h,w]。"""
        return T.as_tensor(normalize_rgb(rgb)), T.as_tensor(normalize_depth(depth))

    def condition(self, rgb: Tensor, depth: Tensor, trace: Optional[list] = None) -> Tensor:
        return self.encoder(rgb, depth, trace)


def checkpoint_metadata(cfg: ModelConfig, seed: int, epoch: int) -> dict:
    return {
        "model": cfg.model_dump(mode="json"),
        "schedule": cfg.schedule.value,
        "scale": cfg.scale,
        "seed": seed,
        "epoch": epoch,
    }


def load_model(path: str) -> Tuple[DiffSegModel, dict]:
    """按检查点元数据重建模型并载入权重。"""
    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise DataError(f"检查点缺少模型配置元数据: {path}")
    try:
        cfg = ModelConfig(**meta["model"])
    except ValidationError as e:
        raise DataError(f"检查点中的模型配置非法: {e}") from e
    model = DiffSegModel(cfg, seed=int(meta.get("seed", 0)))
    model.load_state_dict(state)
    logger.info(f"[模型] 已载入 {path} (epoch {meta.get('epoch')})")
    return model, meta
