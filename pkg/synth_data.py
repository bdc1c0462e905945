"""
合成图文语料：270 种场景（形状 × 颜色 × 九宫格位置 × 大小），渲染与标题都有精确真值。

- render_scene：0.5 灰背景，整数像素判定，无抗锯齿
- caption_tokens：模板 "a {size} {color} {shape} in the {row} {col}"，逐词切分
- SEEDDATA 文件读写，坏 magic / 截断记录 / 条数不符分别报错
- build_corpus：按 (spec, 抖动偏移) 切分训练集与留出集，两者不相交
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from errors import (
    BadMagicError,
    EmptyInputError,
    RecordCountMismatchError,
    TruncatedRecordError,
    UnsupportedVersionError,
    VocabError,
)
from tensor_core import Rng

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple")
PALETTE = {
    "red": (0.8, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.1, 0.8),
    "yellow": (0.8, 0.8, 0.1),
    "purple": (0.6, 0.1, 0.8),
}
SIZES = ("small", "large")
RADIUS = {"small": 3, "large": 6}
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")
CELL_CENTERS = (6, 16, 25)  # 行 / 列中心像素坐标，所有形状都完整落在画布内
IMAGE_SIZE = 32
BACKGROUND = 0.5
N_SPECS = len(SHAPES) * len(COLORS) * 9 * len(SIZES)  # 270
CAPTION_LEN = 8

PREFIX_I2T = ("a", "photo", "of")
PREFIX_T2I = ("generate", "an", "image")


@dataclass(frozen=True, order=True)
class SceneSpec:
    """字段按 (shape, color, cell, size) 排序，即枚举顺序"""

    shape: int
    color: int
    cell: int
    size: int

    def __post_init__(self):
        if not (0 <= self.shape < 3 and 0 <= self.color < 5 and 0 <= self.cell < 9 and 0 <= self.size < 2):
            raise ValueError(f"invalid scene spec {self!r}")

    @property
    def row(self) -> int:
        return self.cell // 3

    @property
    def col(self) -> int:
        return self.cell % 3

    @property
    def index(self) -> int:
        return ((self.shape * 5 + self.color) * 9 + self.cell) * 2 + self.size

    @classmethod
    def from_index(cls, i: int) -> "SceneSpec":
        i = int(i)
        if not 0 <= i < N_SPECS:
            raise ValueError(f"spec index {i} out of range")
        i, size = divmod(i, 2)
        i, cell = divmod(i, 9)
        shape, color = divmod(i, 5)
        return cls(shape, color, cell, size)

    def describe(self) -> str:
        return f"{SIZES[self.size]} {COLORS[self.color]} {SHAPES[self.shape]} @ {ROW_WORDS[self.row]}-{COL_WORDS[self.col]}"


def all_specs() -> list[SceneSpec]:
    return [SceneSpec.from_index(i) for i in range(N_SPECS)]


def sample_scene(rng: Rng) -> SceneSpec:
    """在 270 种场景上均匀采样"""
    return SceneSpec.from_index(int(rng.integers(0, N_SPECS)))


# -------- 渲染 --------


def shape_mask(spec: SceneSpec, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    cy = CELL_CENTERS[spec.row] + offset[0]
    cx = CELL_CENTERS[spec.col] + offset[1]
    r = RADIUS[SIZES[spec.size]]
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dy, dx = y - cy, x - cx
    kind = SHAPES[spec.shape]
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # 尖朝上的等腰三角形：顶点 cy−r，底边 cy+r
    return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)


def render_scene(spec: SceneSpec, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """3×32×32 float32，[0,1]"""
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), BACKGROUND, dtype=np.float32)
    m = shape_mask(spec, offset)
    for ch, value in enumerate(PALETTE[COLORS[spec.color]]):
        img[ch][m] = np.float32(value)
    return img


@lru_cache(maxsize=1)
def canonical_renders() -> np.ndarray:
    """全部 270 个无抖动渲染，(270, 3, 32, 32)，按 spec index 排列"""
    out = np.stack([render_scene(s) for s in all_specs()])
    out.setflags(write=False)
    return out


# -------- 词表 / 标题 --------

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
WORDS = (
    ("a", "in", "the")
    + SIZES
    + COLORS
    + SHAPES
    + ROW_WORDS
    + COL_WORDS
    + ("photo", "of", "generate", "an", "image")
)


class TextVocab:
    """词级词表：特殊符号占 0..3，之后是模板词"""

    def __init__(self, words: Sequence[str] = WORDS, specials: Sequence[str] = SPECIALS):
        self.itos: list[str] = list(specials) + [w for w in words if w not in specials]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = (self.stoi[s] for s in specials)
        self.special_ids = frozenset(self.stoi[s] for s in specials)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in text.lower().split()]

    def decode(self, ids: Iterable[int], *, skip_special: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise VocabError(f"token id {i} outside text vocabulary of size {len(self.itos)}")
            if skip_special and i in self.special_ids:
                continue
            words.append(self.itos[i])
        return " ".join(words)

    def check_ids(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.itos)):
            raise VocabError(f"token ids outside [0, {len(self.itos)})")


@lru_cache(maxsize=1)
def default_vocab() -> TextVocab:
    return TextVocab()


def caption_text(spec: SceneSpec) -> str:
    return (
        f"a {SIZES[spec.size]} {COLORS[spec.color]} {SHAPES[spec.shape]} "
        f"in the {ROW_WORDS[spec.row]} {COL_WORDS[spec.col]}"
    )


def caption_tokens(spec: SceneSpec, vocab: TextVocab | None = None) -> np.ndarray:
    vocab = vocab or default_vocab()
    return np.asarray(vocab.encode(caption_text(spec)), dtype=np.int64)


# -------- 样本 / 数据集 --------


@dataclass
class ImageSample:
    spec: SceneSpec
    image: np.ndarray
    caption_ids: np.ndarray
    offset: tuple[int, int] | None = (0, 0)  # 文件里不存偏移，读回为 None


def make_sample(spec: SceneSpec, offset: tuple[int, int] = (0, 0), vocab: TextVocab | None = None) -> ImageSample:
    return ImageSample(spec, render_scene(spec, offset), caption_tokens(spec, vocab), offset)


@dataclass
class Dataset:
    samples: list[ImageSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    @property
    def captions(self) -> np.ndarray:
        return np.stack([s.caption_ids for s in self.samples]).astype(np.int64)

    @property
    def spec_indices(self) -> np.ndarray:
        return np.asarray([s.spec.index for s in self.samples], dtype=np.int64)

    @property
    def specs(self) -> list[SceneSpec]:
        return [s.spec for s in self.samples]

    def canonical_images(self) -> np.ndarray:
        """解码器目标永远是无抖动渲染"""
        return canonical_renders()[self.spec_indices]

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[int(i)] for i in idx])


def build_corpus(n_train: int, n_heldout: int, jitter_px: int, rng: Rng, vocab: TextVocab | None = None) -> tuple[Dataset, Dataset]:
    """
    键 = (spec, dy, dx)。留出集取 n_heldout 个互不相同的 spec（各带一个随机偏移），
    训练集从其余键里抽取，与留出集不相交；键不够时按轮次重复。
    """
    if n_train < 1 or n_heldout < 1:
        raise EmptyInputError("corpus needs n_train >= 1 and n_heldout >= 1")
    if n_heldout > N_SPECS:
        raise EmptyInputError(f"n_heldout {n_heldout} exceeds the {N_SPECS} distinct specs")
    span = range(-jitter_px, jitter_px + 1)
    offsets = [(dy, dx) for dy in span for dx in span]

    held_specs = rng.permutation(N_SPECS)[:n_heldout]
    held_keys = [(int(s), offsets[int(rng.integers(0, len(offsets)))]) for s in held_specs]
    held_set = set(held_keys)
    pool = [(s, o) for s in range(N_SPECS) for o in offsets if (s, o) not in held_set]
    if not pool:
        raise EmptyInputError("no training keys left after the held-out split")

    picks: list[int] = []
    while len(picks) < n_train:
        picks.extend(int(i) for i in rng.permutation(len(pool)))
    train_keys = [pool[i] for i in picks[:n_train]]
    if n_train > len(pool):
        logger.warning("train split repeats keys: %d requested, %d distinct available", n_train, len(pool))

    def build(keys):
        return Dataset([make_sample(SceneSpec.from_index(s), o, vocab) for s, o in keys])

    return build(train_keys), build(held_keys)


def distinct_spec_batches(spec_indices: np.ndarray, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """打乱后分批，同一批里不出现重复 spec（重复标题在对比损失里是假负例）"""
    order = [int(i) for i in rng.permutation(len(spec_indices))]
    batches: list[np.ndarray] = []
    while order:
        seen: set[int] = set()
        batch, rest = [], []
        for i in order:
            s = int(spec_indices[i])
            if len(batch) < batch_size and s not in seen:
                batch.append(i)
                seen.add(s)
            else:
                rest.append(i)
        batches.append(np.asarray(batch, dtype=np.int64))
        order = rest
    return batches


def shuffled_batches(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -------- SEEDDATA --------

DATA_MAGIC = b"SEEDDATA"
DATA_VERSION = 1
_PIXELS = 3 * IMAGE_SIZE * IMAGE_SIZE


def encode_dataset(samples: Sequence[ImageSample]) -> bytes:
    if not samples:
        raise EmptyInputError("cannot write an empty dataset")
    parts = [DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(samples))]
    for s in samples:
        ids = np.asarray(s.caption_ids)
        parts.append(struct.pack("<BBBBH", s.spec.shape, s.spec.color, s.spec.cell, s.spec.size, ids.size))
        parts.append(ids.astype("<u2").tobytes())
        parts.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    if buf[:8] != DATA_MAGIC:
        raise BadMagicError(bytes(buf[:8]))
    if len(buf) < 16:
        raise TruncatedRecordError(0)
    version, declared = struct.unpack_from("<II", buf, 8)
    if version != DATA_VERSION:
        raise UnsupportedVersionError(version, DATA_VERSION)
    pos = 16
    samples: list[ImageSample] = []
    while pos < len(buf):
        i = len(samples)
        if pos + 6 > len(buf):
            raise TruncatedRecordError(i)
        shape, color, cell, size, n = struct.unpack_from("<BBBBH", buf, pos)
        pos += 6
        end = pos + 2 * n + 4 * _PIXELS
        if end > len(buf):
            raise TruncatedRecordError(i)
        ids = np.frombuffer(buf, dtype="<u2", count=n, offset=pos).astype(np.int64)
        pos += 2 * n
        image = np.frombuffer(buf, dtype="<f4", count=_PIXELS, offset=pos).reshape(3, IMAGE_SIZE, IMAGE_SIZE).astype(np.float32)
        pos = end
        samples.append(ImageSample(SceneSpec(shape, color, cell, size), image, ids, None))
    if len(samples) != declared:
        raise RecordCountMismatchError(declared, len(samples))
    return Dataset(samples)


def write_dataset(path: Path | str, samples: Sequence[ImageSample] | Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = samples.samples if isinstance(samples, Dataset) else list(samples)
    path.write_bytes(encode_dataset(items))
    logger.info("dataset written: %s (%d records)", path, len(items))
    return path


def read_dataset(path: Path | str) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
