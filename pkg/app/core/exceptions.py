# app/core/exceptions.py


class DiffSegError(Exception):
    """项目内所有可预期错误的基类。"""


class ShapeError(DiffSegError, ValueError):
    """张量维度或形状不匹配。"""


class TapeError(DiffSegError):
    """反向传播使用方式错误（非标量 loss、loss 不在 tape 上等）。"""


class NumericError(DiffSegError):
    """出现 NaN/Inf，或训练 loss 非有限。"""


class DataError(DiffSegError):
    """数据文件损坏、清单不一致、标签越界等数据问题。"""


class MetricError(DataError):
    """评估输入退化（例如全部像素都被忽略）。"""


class UsageError(DiffSegError):
    """命令行参数或配置文件不合法。"""
