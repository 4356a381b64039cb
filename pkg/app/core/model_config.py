# app/core/model_config.py
from enum import Enum

# 标签中表示“忽略”的像素值
IGNORE_ID = 255

# --- 检查点文件 ---
CKPT_MAGIC = b"DDSG"
CKPT_VERSION = 1
DTYPE_F32 = 0

# --- 数据集目录格式 ---
RGB_PATTERN = "{:04d}_rgb.ppm"
DEPTH_PATTERN = "{:04d}_depth.pgm"
LABEL_PATTERN = "{:04d}_label.pgm"
MANIFEST_NAME = "manifest.json"
TRAIN_SPLIT = "train"
TEST_SPLIT = "test"


class ScheduleKind(str, Enum):
    cosine = "cosine"
    linear = "linear"


class EncoderKind(str, Enum):
    dat = "dat"      # 可变形注意力编码器
    conv = "conv"    # 纯卷积基线，用于 loss 尖峰对比


# 余弦调度常量
COSINE_NS = 0.0002
COSINE_DS = 0.00025
LOG_SNR_EPS = 1e-5

# 线性调度常量
LINEAR_T = 1000
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02

# --- 合成数据 ---
SYNTH_CLASS_NAMES = ["background", "box", "ball", "cabinet", "lamp", "screen"]
# 每个类别的基础颜色 (0-255)，同一类的物体只在亮度上抖动
SYNTH_CLASS_COLORS = [
    (150, 140, 130),
    (200, 60, 50),
    (60, 170, 70),
    (70, 90, 200),
    (230, 200, 60),
    (40, 40, 45),
]
# 反光类（屏幕）会被打上大面积无效深度
SYNTH_REFLECTIVE = ["screen"]

# --- 挑战子集 ---
SMALL_OBJECT_IGNORES = {
    "nyuv2": ["wall", "floor", "ceiling", "otherstructure", "otherfurniture", "otherprop"],
    "sunrgbd": ["wall", "floor", "ceiling"],
}
SYNTHETIC_DATASET = "synthetic"
INVALID_SUBSET_FRACTION = 0.2
LOW_LIGHT_GAMMA = 2.0

# --- 消融实验轴 ---
ABLATION_SCHEDULES = ["cosine", "linear"]
ABLATION_SCALES = [0.001, 0.01, 0.03, 0.05, 0.1]

# 固定 40 色调色板，保证不同运行之间的可视化颜色一致
PALETTE = [
    (0, 0, 0), (128, 0, 0), (0, 128, 0), (128, 128, 0), (0, 0, 128),
    (128, 0, 128), (0, 128, 128), (128, 128, 128), (64, 0, 0), (192, 0, 0),
    (64, 128, 0), (192, 128, 0), (64, 0, 128), (192, 0, 128), (64, 128, 128),
    (192, 128, 128), (0, 64, 0), (128, 64, 0), (0, 192, 0), (128, 192, 0),
    (0, 64, 128), (128, 64, 128), (0, 192, 128), (128, 192, 128), (64, 64, 0),
    (192, 64, 0), (64, 192, 0), (192, 192, 0), (64, 64, 128), (192, 64, 128),
    (64, 192, 128), (192, 192, 128), (0, 0, 64), (128, 0, 64), (0, 128, 64),
    (128, 128, 64), (0, 0, 192), (128, 0, 192), (0, 128, 192), (128, 128, 192),
]
IGNORE_COLOR = (255, 255, 255)
# 参考点叠加图中每个 stage 的颜色
STAGE_POINT_COLORS = [(255, 64, 64), (64, 255, 64), (64, 160, 255), (255, 220, 0)]
