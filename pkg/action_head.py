# action_head.py
"""
动作离散化（每维 256 个等频分箱）与轻量动作预测模块。
"""
import logging
from typing import Dict, Sequence, Union

import numpy as np

from config import ACTION_DIMS, N_BINS
from data_models import Action
from errors import DegenerateDimensionError, ShapeMismatchError
from nn import InitMode, LayerNorm, Linear, Module, StateEmbedder, TransformerStack, check_finite

logger = logging.getLogger(__name__)

CONTINUOUS_DIMS = ACTION_DIMS - 1
GRIPPER_DIM = ACTION_DIMS - 1


def fit_edges(values: np.ndarray, n_bins: int = N_BINS, dimension: int = 0) -> np.ndarray:
    """
    单维等频边界：edges[k] = sorted[⌊kN/n_bins⌋]，最后一个边界取最大值。
    相等的边界用 nextafter 向上推开，保证严格递增。
    """
    values = np.sort(np.asarray(values, dtype=np.float64), kind="stable")
    if values.size == 0 or values[0] == values[-1]:
        raise DegenerateDimensionError(dimension)
    N = values.size
    edges = np.empty(n_bins + 1)
    edges[:n_bins] = values[(np.arange(n_bins) * N) // n_bins]
    edges[n_bins] = values[-1]
    for k in range(1, n_bins + 1):
        if edges[k] <= edges[k - 1]:
            edges[k] = np.nextafter(edges[k - 1], np.inf)
    return edges


class Discretizer:
    """6 个连续维度各 257 个边界；夹爪维度只用 0 和 255 两个端点。拟合后不再改变。"""

    def __init__(self, edges: np.ndarray, n_bins: int = N_BINS):
        edges = np.array(edges, dtype=np.float64)
        if edges.shape != (CONTINUOUS_DIMS, n_bins + 1):
            raise ShapeMismatchError(f"分箱边界形状应为 ({CONTINUOUS_DIMS}, {n_bins + 1})，实际为 {edges.shape}")
        if not np.all(np.diff(edges, axis=1) > 0):
            raise ValueError("分箱边界必须严格递增")
        edges.setflags(write=False)
        self.edges = edges
        self.n_bins = n_bins

    def encode(self, vector: np.ndarray) -> np.ndarray:
        """7 维连续动作 → 7 个箱号。连续维度按左闭右开区间落箱，越界值截到两端。"""
        vector = np.asarray(vector, dtype=np.float64)
        indices = np.empty(ACTION_DIMS, dtype=np.int64)
        for dim in range(CONTINUOUS_DIMS):
            inner = self.edges[dim, 1:self.n_bins]
            indices[dim] = np.searchsorted(inner, vector[dim], side="right")
        indices[GRIPPER_DIM] = self.n_bins - 1 if vector[GRIPPER_DIM] >= 0.5 else 0
        return np.clip(indices, 0, self.n_bins - 1)

    def encode_batch(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        indices = np.empty(vectors.shape, dtype=np.int64)
        for dim in range(CONTINUOUS_DIMS):
            indices[:, dim] = np.searchsorted(self.edges[dim, 1:self.n_bins], vectors[:, dim], side="right")
        indices[:, GRIPPER_DIM] = np.where(vectors[:, GRIPPER_DIM] >= 0.5, self.n_bins - 1, 0)
        return np.clip(indices, 0, self.n_bins - 1)

    def decode(self, indices: Sequence[int]) -> np.ndarray:
        """箱号 → 连续值：连续维度取区间中点，夹爪维度 < 128 为张开。"""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != (ACTION_DIMS,):
            raise ShapeMismatchError(f"需要 {ACTION_DIMS} 个箱号，实际为 {indices.shape}")
        if np.any(indices < 0) or np.any(indices >= self.n_bins):
            raise IndexError(f"箱号越界: {indices.tolist()}")
        dims = np.arange(CONTINUOUS_DIMS)
        lo = self.edges[dims, indices[:CONTINUOUS_DIMS]]
        hi = self.edges[dims, indices[:CONTINUOUS_DIMS] + 1]
        gripper = 1.0 if indices[GRIPPER_DIM] >= self.n_bins // 2 else 0.0
        return np.append((lo + hi) / 2.0, gripper)

    def bin_widths(self) -> np.ndarray:
        return np.diff(self.edges, axis=1)

    def blocks(self) -> Dict[str, np.ndarray]:
        return {"discretizer.edges": self.edges}

    @classmethod
    def from_blocks(cls, blocks: Dict[str, np.ndarray]) -> "Discretizer":
        return cls(blocks["discretizer.edges"])


def _action_matrix(actions: Union[np.ndarray, Sequence[Action]]) -> np.ndarray:
    if isinstance(actions, np.ndarray):
        return np.asarray(actions, dtype=np.float64).reshape(-1, ACTION_DIMS)
    return np.array([a.to_vector() for a in actions])


def fit_discretizer(actions: Union[np.ndarray, Sequence[Action]], n_bins: int = N_BINS) -> Discretizer:
    matrix = _action_matrix(actions)
    if matrix.shape[0] < n_bins:
        logger.warning(f"⚠️ 只有 {matrix.shape[0]} 个动作样本，少于分箱数 {n_bins}，边界会很粗")
    edges = np.stack([fit_edges(matrix[:, dim], n_bins, dim) for dim in range(CONTINUOUS_DIMS)])
    return Discretizer(edges, n_bins)


def encode_action(discretizer: Discretizer, action: Action) -> np.ndarray:
    return discretizer.encode(action.to_vector())


def decode_action(discretizer: Discretizer, indices: Sequence[int]) -> Action:
    return Action.from_vector(discretizer.decode(indices))


# --- 动作预测模块 ---

class ActionPredictor(Module):
    """
    自注意力序列：当前帧图像 token、每个历史帧的均值池化 token、每个历史帧的状态嵌入、一个读出 token。
    预测的路点特征作为交叉注意力上下文。读出 token 经 LayerNorm + Linear 得到 7×256 logits。
    """

    def __init__(self, d: int, n_layers: int, heads: int, history: int, rng: np.random.Generator,
                 ffn_mult: int = 4, dropout: float = 0.0, init: InitMode = "normal", n_bins: int = N_BINS):
        super().__init__()
        self.d = d
        self.history = history
        self.n_bins = n_bins
        self.add_param("readout", rng.normal(0.0, 0.02, size=d))
        self.add_param("frame_codes", rng.normal(0.0, 0.02, size=(history + 1, d)))
        # 0: 图像 token，1: 历史池化 token，2: 状态 token
        self.add_param("segment_codes", rng.normal(0.0, 0.02, size=(3, d)))
        self.state_embedder = StateEmbedder(d, rng, ACTION_DIMS)
        self.stack = TransformerStack(n_layers, d, heads, rng, ffn_mult, dropout, init)
        self.norm = LayerNorm(d)
        self.head = Linear(d, ACTION_DIMS * n_bins, rng, init)

    def forward(self, waypoint_features: np.ndarray, history: np.ndarray, states: np.ndarray) -> np.ndarray:
        """
        waypoint_features: (b, n, d)，history: (b, h+1, n, d)，states: (b, h+1, 7) → logits (b, 7, 256)。
        """
        frames = self.history + 1
        if history.ndim != 4 or history.shape[1] != frames or history.shape[-1] != self.d:
            raise ShapeMismatchError(f"历史特征形状应为 (b, {frames}, n, {self.d})，实际为 {history.shape}")
        if states.shape[1:] != (frames, ACTION_DIMS):
            raise ShapeMismatchError(f"状态历史形状应为 (b, {frames}, {ACTION_DIMS})，实际为 {states.shape}")
        b, _, n, d = history.shape
        p = self.params
        codes = p["frame_codes"][None]
        image = history[:, -1] + p["segment_codes"][0]
        pooled = history.mean(axis=2) + codes + p["segment_codes"][1]
        embedded = self.state_embedder.forward(states) + codes + p["segment_codes"][2]
        readout = np.broadcast_to(p["readout"], (b, 1, d))
        x = np.concatenate([image, pooled, embedded, readout], axis=1)
        self._n, self._b = n, b
        out = self.stack.forward(x, waypoint_features)
        logits = self.head.forward(self.norm.forward(out[:, -1, :]))
        return check_finite(logits.reshape(b, ACTION_DIMS, self.n_bins), "动作 logits")

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """grad: (b, 7, 256)。返回对路点特征的梯度 (b, n, d)。"""
        b, n, d = self._b, self._n, self.d
        frames = self.history + 1
        d_token = self.norm.backward(self.head.backward(grad.reshape(b, -1)))
        full = np.zeros((b, n + 2 * frames + 1, d))
        full[:, -1, :] = d_token
        dx, d_context = self.stack.backward(full)

        d_pooled = dx[:, n:n + frames]
        d_states = dx[:, n + frames:n + 2 * frames]
        self.state_embedder.backward(d_states)
        g = self.grads
        g["readout"] += dx[:, -1].sum(axis=0)
        g["frame_codes"] += d_pooled.sum(axis=0) + d_states.sum(axis=0)
        g["segment_codes"][0] += dx[:, :n].sum(axis=(0, 1))
        g["segment_codes"][1] += d_pooled.sum(axis=(0, 1))
        g["segment_codes"][2] += d_states.sum(axis=(0, 1))
        return d_context


def predict_action(predictor: ActionPredictor, waypoint_features: np.ndarray, history_features: Sequence[np.ndarray],
                   state_history: np.ndarray) -> np.ndarray:
    """单样本：返回 7×256 logits。"""
    history = np.stack(history_features)[None]
    return predictor.forward(waypoint_features[None], history, np.asarray(state_history)[None])[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_targets(targets: np.ndarray, n_bins: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= n_bins):
        raise IndexError(f"目标箱号越界 [0, {n_bins})")
    return targets


def action_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """7 个维度（以及批）上交叉熵的平均。"""
    targets = _check_targets(targets, logits.shape[-1])
    log_p = _log_softmax(logits)
    picked = np.take_along_axis(log_p, targets[..., None], axis=-1)[..., 0]
    return float(-picked.mean())


def action_loss_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    targets = _check_targets(targets, logits.shape[-1])
    probs = np.exp(_log_softmax(logits))
    one_hot = np.zeros_like(probs)
    np.put_along_axis(one_hot, targets[..., None], 1.0, axis=-1)
    return (probs - one_hot) / targets.size


def greedy_indices(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1)
