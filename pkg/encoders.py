# encoders.py
"""
冻结的确定性编码器：图像按 patch 做固定随机线性投影，文本做哈希词嵌入。
两者的参数只由 (seed, 维度) 决定，训练过程中不更新。
"""
import hashlib
import re
from typing import List, Sequence

import numpy as np

from config import IMAGE_SIZE, PATCH_SIZE, TEXT_TABLE_SIZE
from data_models import Observation
from errors import ShapeMismatchError

# n×d 的 token 特征；批量时为 b×n×d
FeatureMap = np.ndarray
# m×d 的文本 token 特征
TokenSequence = np.ndarray

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """小写化后按空白和标点切分。"""
    return _WORD_RE.findall(text.lower())


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class ImageEncoder:
    """
    每个 patch 的像素（除以 255 归一化）经固定随机矩阵 W 投影到 d 维，再加上固定位置编码。
    token i 只依赖 patch i。
    """

    def __init__(self, d_model: int, seed: int, image_size: int = IMAGE_SIZE, patch_size: int = PATCH_SIZE):
        if image_size % patch_size != 0:
            raise ShapeMismatchError(f"图像尺寸 {image_size} 不是 patch 大小 {patch_size} 的整数倍")
        self.d_model = d_model
        self.seed = seed
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.n_tokens = self.grid * self.grid
        self.patch_dim = patch_size * patch_size * 3

        rng = np.random.default_rng([seed, 0])
        self.projection = _readonly(rng.normal(0.0, 1.0 / np.sqrt(self.patch_dim), size=(self.patch_dim, d_model)))
        self.positional = _readonly(rng.normal(0.0, 0.1, size=(self.n_tokens, d_model)))

    def patches(self, rgb: np.ndarray) -> np.ndarray:
        """H×W×3 → n×(p·p·3)，patch 按行优先排列。"""
        h, w, _ = rgb.shape
        if h != self.image_size or w != self.image_size:
            raise ShapeMismatchError(f"期望 {self.image_size}x{self.image_size} 图像，实际为 {h}x{w}")
        p, g = self.patch_size, self.grid
        x = rgb.astype(np.float64).reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        return x.reshape(self.n_tokens, self.patch_dim) / 255.0

    def encode(self, observation: Observation) -> FeatureMap:
        return self.patches(observation.array) @ self.projection + self.positional

    def encode_batch(self, observations: Sequence[Observation]) -> np.ndarray:
        return np.stack([self.encode(o) for o in observations])

    def token_norm_bound(self) -> np.ndarray:
        """每个 token 范数的上界：‖W‖₂·√(p·p·3) + ‖pos_i‖（像素归一化到 [0,1]）。"""
        spectral = np.linalg.norm(self.projection, ord=2)
        return spectral * np.sqrt(self.patch_dim) + np.linalg.norm(self.positional, axis=1)

    def parameter_bytes(self) -> bytes:
        return self.projection.tobytes() + self.positional.tobytes()


class TextEncoder:
    """词经带密钥的 blake2b 哈希映射到固定大小的随机嵌入表，哈希冲突是允许的。"""

    def __init__(self, d_model: int, seed: int, table_size: int = TEXT_TABLE_SIZE):
        self.d_model = d_model
        self.seed = seed
        self.table_size = table_size
        self._key = int(seed).to_bytes(8, "little", signed=True)
        rng = np.random.default_rng([seed, 1])
        self.table = _readonly(rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(table_size, d_model)))

    def token_ids(self, text: str) -> List[int]:
        ids = []
        for token in tokenize(text):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
            ids.append(int.from_bytes(digest, "little") % self.table_size)
        return ids

    def encode(self, text: str) -> TokenSequence:
        ids = self.token_ids(text)
        if not ids:
            raise ValueError("文本为空或不含任何词，无法编码")
        return self.table[ids].copy()

    def parameter_bytes(self) -> bytes:
        return self.table.tobytes()


def encode_image(encoder: ImageEncoder, observation: Observation) -> FeatureMap:
    return encoder.encode(observation)


def encode_text(encoder: TextEncoder, text: str) -> TokenSequence:
    return encoder.encode(text)


def pad_token_sequences(sequences: Sequence[TokenSequence]) -> tuple:
    """把长度不一的文本序列右侧补零成 b×m×d，并返回 b×m 的有效位掩码。"""
    m = max(seq.shape[0] for seq in sequences)
    d = sequences[0].shape[1]
    batch = np.zeros((len(sequences), m, d))
    mask = np.zeros((len(sequences), m), dtype=bool)
    for i, seq in enumerate(sequences):
        batch[i, : seq.shape[0]] = seq
        mask[i, : seq.shape[0]] = True
    return batch, mask
