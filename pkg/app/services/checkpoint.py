# app/services/checkpoint.py
"""
DDSG 检查点格式（小端）：
  magic "DDSG" | u32 版本 | u32 元数据长度 + UTF-8 JSON | u32 条目数
  每个条目: u32 名字长度 | 名字 | u8 dtype 标记 | u32 rank | rank×u32 维度 | u64 字节数
  之后按条目顺序依次是 float32 数据。
"""
import json
import logging
import os
import struct
from typing import Dict, Tuple

import numpy as np

from app.core.exceptions import DataError
from app.core.model_config import CKPT_MAGIC, CKPT_VERSION, DTYPE_F32

logger = logging.getLogger(__name__)


def save_checkpoint(path: str, state: Dict[str, np.ndarray], metadata: dict | None = None):
    meta = json.dumps(metadata or {}, sort_keys=True, ensure_ascii=False).encode("utf-8")
    header = bytearray(CKPT_MAGIC)
    header += struct.pack("<II", CKPT_VERSION, len(meta))
    header += meta
    header += struct.pack("<I", len(state))

    payloads = []
    for name, arr in state.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        raw_name = name.encode("utf-8")
        header += struct.pack("<I", len(raw_name)) + raw_name
        header += struct.pack("<BI", DTYPE_F32, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", len(data))
        payloads.append(data)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        for data in payloads:
            f.write(data)
    os.replace(tmp, path)
    logger.info(f"[检查点] 已保存 {len(state)} 个张量 -> {path}")


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"检查点文件被截断: {self.path}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """返回 (参数表, 元数据)。"""
    if not os.path.isfile(path):
        raise DataError(f"检查点不存在: {path}")
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)

    if r.take(4) != CKPT_MAGIC:
        raise DataError(f"不是 DDSG 检查点: {path}")
    version, meta_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise DataError(f"不支持的检查点版本 {version}")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"检查点元数据损坏: {e}") from e

    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        dtype_tag, rank = r.unpack("<BI")
        if dtype_tag != DTYPE_F32:
            raise DataError(f"参数 {name} 的 dtype 标记未知: {dtype_tag}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(dims, dtype=np.int64)):
            raise DataError(f"参数 {name} 的字节数 {nbytes} 与形状 {dims} 不符")
        entries.append((name, dims, nbytes))

    state = {}
    for name, dims, nbytes in entries:
        state[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise DataError(f"检查点末尾有多余数据: {path}")
    return state, metadata
