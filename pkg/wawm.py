# wawm.py
"""
路点感知世界模型的场景预测模块：
由指令 + 原语描述组成的路点指示做交叉注意力上下文，观测历史做自注意力序列，
预测下一个路点帧的图像特征。
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from data_models import PrimitiveAction
from encoders import FeatureMap, TextEncoder
from errors import ShapeMismatchError
from nn import InitMode, Module, TransformerStack, check_finite
from primitives import describe_primitive

logger = logging.getLogger(__name__)

SEPARATOR = "[SEP]"


class WaypointIndicator(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    instruction: str
    primitive_text: str
    text: str
    encoded: np.ndarray


def indicator_text(instruction: str, primitive: PrimitiveAction) -> str:
    if not instruction.strip():
        raise ValueError("指令为空，无法组成路点指示")
    return f"{instruction} {SEPARATOR} {describe_primitive(primitive)}"


def compose_indicator(encoder: TextEncoder, instruction: str, primitive: PrimitiveAction) -> WaypointIndicator:
    """指令与原语描述用 [SEP] 拼接后编码；带目标的原语会在描述后追加目标名。"""
    text = indicator_text(instruction, primitive)
    return WaypointIndicator(instruction=instruction, primitive_text=describe_primitive(primitive),
                             text=text, encoded=encoder.encode(text))


class ScenePredictor(Module):
    """
    LS 层 Transformer。历史 h+1 帧的 token 各加上可学习的帧编码后沿 token 轴拼接，
    输出只取最后一帧对应的 n 个位置。没有最终 LayerNorm，零初始化时输出就是残差通路。
    """

    def __init__(self, d: int, n_layers: int, heads: int, history: int, rng: np.random.Generator,
                 ffn_mult: int = 4, dropout: float = 0.0, init: InitMode = "normal"):
        super().__init__()
        self.d = d
        self.history = history
        codes = np.zeros((history + 1, d)) if init == "zeros" else rng.normal(0.0, 0.02, size=(history + 1, d))
        self.add_param("frame_codes", codes)
        self.stack = TransformerStack(n_layers, d, heads, rng, ffn_mult, dropout, init)

    def forward(self, history: np.ndarray, text: np.ndarray, text_mask: Optional[np.ndarray] = None) -> np.ndarray:
        """history: (b, h+1, n, d)，text: (b, m, d) → (b, n, d)。"""
        if history.ndim != 4 or history.shape[1] != self.history + 1 or history.shape[-1] != self.d:
            raise ShapeMismatchError(f"历史特征形状应为 (b, {self.history + 1}, n, {self.d})，实际为 {history.shape}")
        b, frames, n, d = history.shape
        self._n = n
        x = (history + self.params["frame_codes"][None, :, None, :]).reshape(b, frames * n, d)
        out = self.stack.forward(x, text, text_mask)
        return check_finite(out[:, -n:, :], "场景预测输出")

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """grad: (b, n, d)。返回对历史特征的梯度 (b, h+1, n, d)。"""
        b, n, d = grad.shape
        frames = self.history + 1
        full = np.zeros((b, frames * n, d))
        full[:, -n:, :] = grad
        dx, _ = self.stack.backward(full)
        dx = dx.reshape(b, frames, n, d)
        self.grads["frame_codes"] += dx.sum(axis=(0, 2))
        return dx


def predict_waypoint_features(predictor: ScenePredictor, indicator: WaypointIndicator,
                              history_features: Sequence[FeatureMap]) -> FeatureMap:
    """单样本预测：h+1 个 n×d 特征图 → n×d。"""
    if len(history_features) != predictor.history + 1:
        raise ShapeMismatchError(f"需要 {predictor.history + 1} 帧历史特征，实际为 {len(history_features)}")
    history = np.stack(history_features)[None]
    return predictor.forward(history, indicator.encoded[None])[0]


def _check_pair(predicted: np.ndarray, target: np.ndarray) -> None:
    if predicted.shape != target.shape:
        raise ShapeMismatchError(f"预测特征 {predicted.shape} 与目标特征 {target.shape} 形状不一致")


def scene_loss(predicted: FeatureMap, target: FeatureMap, squared: bool = False) -> float:
    """所有 token 上对应 d 维向量欧氏距离的平均；squared=True 时改为平方距离的平均。"""
    _check_pair(predicted, target)
    norms = np.linalg.norm(predicted - target, axis=-1)
    return float(np.mean(norms ** 2 if squared else norms))


def scene_loss_grad(predicted: FeatureMap, target: FeatureMap, squared: bool = False) -> np.ndarray:
    _check_pair(predicted, target)
    diff = predicted - target
    count = diff.size // diff.shape[-1]
    if squared:
        return 2.0 * diff / count
    norms = np.linalg.norm(diff, axis=-1, keepdims=True)
    # 距离为 0 的 token 取次梯度 0
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where(norms > 0.0, diff / safe, 0.0) / count


def scene_loss_and_grad(predicted: FeatureMap, target: FeatureMap, squared: bool = False) -> Tuple[float, np.ndarray]:
    return scene_loss(predicted, target, squared), scene_loss_grad(predicted, target, squared)
