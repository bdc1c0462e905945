"""
统一异常：每个异常都带上出错上下文（算子名 / 字段 / 段名），CLI 依此决定退出码。
"""
from __future__ import annotations


class SeedError(Exception):
    """所有可预期错误的基类（CLI 捕获后 exit 1）"""


class ConfigurationError(SeedError, ValueError):
    """形状 / 掩码 / 宽度不匹配，消息里带算子名"""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class ConfigError(SeedError):
    """配置文件错误：缺文件 / 解析失败 / 约束违反（列出全部违反项）"""

    def __init__(self, message: str, messages: list[str] | None = None):
        self.messages = list(messages or [])
        full = message if not self.messages else message + "\n" + "\n".join(f"  - {m}" for m in self.messages)
        super().__init__(full)


class EmptyInputError(SeedError, ValueError):
    """空数据集 / 空 batch / 空序列"""


class VocabError(SeedError, ValueError):
    """token id 越界"""


class CodeIndexError(SeedError, ValueError):
    """视觉码越界（≥ K 或 < 0）"""


class NumericalError(SeedError, ValueError):
    """NaN / Inf 输入，或注意力行没有任何可见 key"""


class GradCheckRefused(SeedError):
    """梯度检查前置条件不满足（非 64 位模式 / 前向非确定）"""


class MissingCheckpointError(SeedError):
    """上游 checkpoint 段缺失"""

    def __init__(self, section: str, path: str = ""):
        super().__init__(f"missing checkpoint {section}.*" + (f" ({path})" if path else ""))
        self.section = section
        self.path = path


class ImageFormatError(ConfigurationError):
    """PPM 图像读不出来：文件缺失 / 坏 magic / 坏文件头 / 像素截断"""

    def __init__(self, path, message: str):
        super().__init__("read_ppm", f"{path}: {message}")
        self.path = str(path)


class CheckpointFormatError(SeedError):
    """SEEDCKPT 文件格式错误"""


class DatasetFormatError(SeedError):
    """SEEDDATA 文件格式错误基类"""


class BadMagicError(DatasetFormatError):
    def __init__(self, found: bytes = b""):
        super().__init__(f"bad magic: {found!r}")
        self.found = found


class TruncatedRecordError(DatasetFormatError):
    def __init__(self, index: int):
        super().__init__(f"truncated record #{index}")
        self.index = index


class UnsupportedVersionError(DatasetFormatError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"unsupported version {found}, this build reads version {supported}")
        self.found = found
        self.supported = supported


class RecordCountMismatchError(DatasetFormatError):
    def __init__(self, declared: int, found: int):
        super().__init__(f"record count mismatch: manifest says {declared}, file holds {found}")
        self.declared = declared
        self.found = found
