# policy.py
"""
完整策略：冻结编码器 + 场景预测模块 + 动作预测模块 + 离散器。
动作损失的梯度经过交叉注意力回传到场景预测模块，总损失 L = L_scene + L_act。
"""
import hashlib
import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from action_head import (ActionPredictor, Discretizer, action_loss, action_loss_grad, decode_action,
                         greedy_indices)
from config import ExperimentConfig
from data_models import Action, Observation, PrimitiveAction, Trajectory
from encoders import ImageEncoder, TextEncoder, pad_token_sequences
from errors import PivotError, ShapeMismatchError
from nn import Module, module_tensors, read_checkpoint, write_checkpoint
from wawm import ScenePredictor, indicator_text, scene_loss, scene_loss_grad

logger = logging.getLogger(__name__)

_CACHE_LIMIT = 8192


class Batch(NamedTuple):
    history: np.ndarray  # (b, h+1, n, d)
    text: np.ndarray  # (b, m, d)
    text_mask: np.ndarray  # (b, m)
    states: np.ndarray  # (b, h+1, 7)
    target_features: np.ndarray  # (b, n, d)
    target_bins: np.ndarray  # (b, 7)


class LossRecord(NamedTuple):
    scene: float
    action: float
    total: float


class PivotPolicy(Module):
    def __init__(self, config: ExperimentConfig, discretizer: Optional[Discretizer] = None,
                 action_layers: Optional[int] = None):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config.d_model, config.encoder_seed, config.image_size, config.patch_size)
        self.text_encoder = TextEncoder(config.d_model, config.encoder_seed, config.text_table_size)
        rng = np.random.default_rng([config.seed, 2])
        self.scene = ScenePredictor(config.d_model, config.ls, config.heads, config.history, rng,
                                    config.ffn_mult, config.dropout)
        self.action = ActionPredictor(config.d_model, action_layers or config.la, config.heads, config.history, rng,
                                      config.ffn_mult, config.dropout)
        self.discretizer = discretizer
        self.assign_dropout_ids()
        self._image_cache: Dict[bytes, np.ndarray] = {}
        self._text_cache: Dict[str, np.ndarray] = {}

    # --- 特征 ---

    def encode_observation(self, observation: Observation) -> np.ndarray:
        """按帧缓存图像特征；编码器冻结，同一帧的特征不变。"""
        key = hashlib.blake2b(observation.rgb, digest_size=16).digest()
        cached = self._image_cache.get(key)
        if cached is None:
            if len(self._image_cache) >= _CACHE_LIMIT:
                self._image_cache.clear()
            cached = self.image_encoder.encode(observation)
            self._image_cache[key] = cached
        return cached

    def encode_indicator(self, instruction: str, primitive: PrimitiveAction) -> np.ndarray:
        text = indicator_text(instruction, primitive)
        cached = self._text_cache.get(text)
        if cached is None:
            cached = self.text_encoder.encode(text)
            self._text_cache[text] = cached
        return cached

    # --- 训练 ---

    def forward(self, batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
        predicted = self.scene.forward(batch.history, batch.text, batch.text_mask)
        logits = self.action.forward(predicted, batch.history, batch.states)
        return predicted, logits

    def losses(self, batch: Batch) -> LossRecord:
        predicted, logits = self.forward(batch)
        s = scene_loss(predicted, batch.target_features, self._squared)
        a = action_loss(logits, batch.target_bins)
        return LossRecord(scene=s, action=a, total=s + a)

    def loss_and_backward(self, batch: Batch) -> LossRecord:
        """前向、计算两项损失并把梯度累加到所有参数上（不清零）。"""
        predicted, logits = self.forward(batch)
        squared = self._squared
        s = scene_loss(predicted, batch.target_features, squared)
        a = action_loss(logits, batch.target_bins)
        d_predicted = self.action.backward(action_loss_grad(logits, batch.target_bins))
        d_predicted = d_predicted + scene_loss_grad(predicted, batch.target_features, squared)
        self.scene.backward(d_predicted)
        return LossRecord(scene=s, action=a, total=s + a)

    @property
    def _squared(self) -> bool:
        return self.config.scene_loss_variant == "squared"

    # --- 推理 ---

    def predict_scene(self, indicator: np.ndarray, history_features: Sequence[np.ndarray]) -> np.ndarray:
        if len(history_features) != self.config.history + 1:
            raise ShapeMismatchError(f"需要 {self.config.history + 1} 帧历史特征，实际为 {len(history_features)}")
        return self.scene.forward(np.stack(history_features)[None], indicator[None])[0]

    def predict_logits(self, predicted: np.ndarray, history_features: Sequence[np.ndarray],
                       states: np.ndarray) -> np.ndarray:
        return self.action.forward(predicted[None], np.stack(history_features)[None], np.asarray(states)[None])[0]

    def decode(self, logits: np.ndarray) -> Action:
        if self.discretizer is None:
            raise PivotError("策略还没有拟合离散器，无法解码动作")
        return decode_action(self.discretizer, greedy_indices(logits))

    def act(self, instruction: str, primitive: PrimitiveAction, observations: Sequence[Observation],
            states: np.ndarray) -> Action:
        """同步地走完场景预测和动作预测两步，返回贪心解码的动作。"""
        history = [self.encode_observation(o) for o in observations]
        predicted = self.predict_scene(self.encode_indicator(instruction, primitive), history)
        return self.decode(self.predict_logits(predicted, history, states))

    # --- checkpoint ---

    def blocks(self) -> Dict[str, np.ndarray]:
        blocks = {f"model.{name}": value for name, value in self.named_parameters()}
        if self.discretizer is not None:
            blocks.update(self.discretizer.blocks())
        return blocks

    def encoder_digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.image_encoder.parameter_bytes())
        h.update(self.text_encoder.parameter_bytes())
        return h.hexdigest()

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> None:
        metadata = {
            "config": self.config.model_dump(mode="json"),
            "action_layers": len(self.action.stack.layers),
            "encoder_digest": self.encoder_digest(),
            "tensors": len(module_tensors(self)),
        }
        metadata.update(extra or {})
        write_checkpoint(path, self.blocks(), metadata)


def load_policy(path: Union[str, Path]) -> PivotPolicy:
    blocks, metadata = read_checkpoint(path)
    if "config" not in metadata:
        raise PivotError(f"checkpoint 缺少实验配置元数据: {path}")
    config = ExperimentConfig.model_validate(metadata["config"])
    discretizer = Discretizer.from_blocks(blocks) if "discretizer.edges" in blocks else None
    policy = PivotPolicy(config, discretizer, action_layers=metadata.get("action_layers"))
    if metadata.get("encoder_digest") not in (None, policy.encoder_digest()):
        raise PivotError("checkpoint 的编码器参数与当前编码器不一致")
    policy.load_state_dict({name[len("model."):]: value for name, value in blocks.items() if name.startswith("model.")})
    policy.eval()
    logger.info(f"✅ 已加载策略 {path}（{policy.num_parameters()} 个参数）")
    return policy


class FeatureStore:
    """
    训练样本仓库：每条轨迹的每一帧只编码一次，批次按 (轨迹, 步) 索引现取。
    样本只取带动作的步（最后一帧除外）。
    """

    def __init__(self, policy: PivotPolicy, trajectories: Sequence[Trajectory]):
        self.policy = policy
        self.history = policy.config.history
        self.trajectories = list(trajectories)
        self.features: List[np.ndarray] = []
        self.states: List[np.ndarray] = []
        self.actions: List[np.ndarray] = []
        self.samples: List[Tuple[int, int]] = []
        for i, traj in enumerate(self.trajectories):
            if any(step.waypoint_target is None for step in traj.steps):
                raise PivotError(f"第 {i} 条轨迹没有路点标注，请先运行 annotate")
            self.features.append(np.stack([policy.image_encoder.encode(s.observation) for s in traj.steps]))
            self.states.append(np.stack([s.state.to_vector() for s in traj.steps]))
            self.actions.append(np.stack([s.action.to_vector() for s in traj.steps[:-1]]))
            self.samples.extend((i, t) for t in range(traj.length - 1))

    def all_actions(self) -> np.ndarray:
        return np.concatenate(self.actions)

    def window(self, t: int) -> List[int]:
        return [max(0, i) for i in range(t - self.history, t + 1)]

    def batch(self, samples: Sequence[Tuple[int, int]]) -> Batch:
        policy = self.policy
        discretizer = policy.discretizer
        if discretizer is None:
            raise PivotError("组批前必须先拟合离散器")
        history, texts, states, targets, bins = [], [], [], [], []
        for i, t in samples:
            traj = self.trajectories[i]
            step = traj.steps[t]
            idx = self.window(t)
            history.append(self.features[i][idx])
            states.append(self.states[i][idx])
            texts.append(policy.encode_indicator(traj.instruction, step.primitive_label))
            targets.append(self.features[i][step.waypoint_target])
            bins.append(discretizer.encode(self.actions[i][t]))
        text, mask = pad_token_sequences(texts)
        return Batch(history=np.stack(history), text=text, text_mask=mask, states=np.stack(states),
                     target_features=np.stack(targets), target_bins=np.stack(bins))
