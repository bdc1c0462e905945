"""
SEEDCKPT 读写。
布局：magic "SEEDCKPT", u32 version=1, u32 entry count；
每条：u16 名字长度, UTF-8 名字, u8 dtype(0=f32, 1=f64), u8 rank, rank×u64 dims, 小端 payload。
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from errors import CheckpointFormatError, MissingCheckpointError
from tensor_core import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"SEEDCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    """按名字排序编码；同样的数组永远得到同样的字节"""
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointFormatError(f"{name[:40]}...: name too long")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointFormatError(f"bad magic: {buf[:8]!r}")
    if len(buf) < 16:
        raise CheckpointFormatError("truncated header")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            if tag not in _DTYPES:
                raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointFormatError(f"{name}: truncated payload")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
            pos += nbytes
    except struct.error as e:
        raise CheckpointFormatError(f"truncated entry table: {e}") from None
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(path: Path | str, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(arrays))
    tmp.replace(path)
    logger.info("checkpoint saved: %s (%d entries)", path, len(arrays))
    return path


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"no such checkpoint file: {path}")
    return decode_checkpoint(path.read_bytes())


def save_store(path: Path | str, store: ParamStore, prefixes: Iterable[str] | None = None) -> Path:
    """把 store 中指定前缀（默认全部）的参数写成一个文件"""
    prefixes = list(prefixes) if prefixes is not None else [""]
    arrays = {n: t.data for p in prefixes for n, t in store.items(p)}
    return save_checkpoint(path, arrays)


def load_sections(
    path: Path | str,
    sections: Iterable[str],
    *,
    store: ParamStore | None = None,
    frozen: bool = True,
) -> ParamStore:
    """读取指定段（"vit" → 所有 "vit.*" 条目），缺段报 missing checkpoint"""
    path = Path(path)
    sections = list(sections)
    if not path.exists():
        raise MissingCheckpointError(sections[0] if sections else "?", str(path))
    arrays = load_checkpoint(path)
    store = store if store is not None else ParamStore()
    for sec in sections:
        names = [n for n in arrays if n.startswith(sec + ".")]
        if not names:
            raise MissingCheckpointError(sec, str(path))
        for n in names:
            store.add(n, arrays[n], frozen=frozen)
    return store
