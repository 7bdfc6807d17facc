# training.py
"""
训练、闭环评估与世界模型诊断。
指标按行写入 metrics.jsonl（只追加），每个 epoch 覆盖写出最新 checkpoint。
"""
import json
import logging
import math
import time
from collections import deque
from pathlib import Path
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from action_head import fit_discretizer
from ahe import ExecutorConfig, chain_stages, run_pipeline, run_synchronous
from config import DEFAULT_RATES, ExperimentConfig
from data_models import Action, Observation, PrimitiveAction, SceneVariant, Skill, TaskSpec, Trajectory, WorldState
from errors import NonFiniteError, PivotError, TrainingDivergedError
from nn import Optimizer, OptimizerConfig
from policy import FeatureStore, PivotPolicy
from primitives import PrimitiveFsm, coerce_skill
from sim import SimEnvironment, episode_seed
from wawm import scene_loss

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
FEATURES_FILE = "features.jsonl"
PROBE_SIZE = 64

PathLike = Union[str, Path]


class MetricsRecord(BaseModel):
    """一行指标：kind=train 时填损失，kind=eval 时填成功率与延迟。"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["train", "eval"]
    epoch: Optional[int] = None
    scene_loss: Optional[float] = None
    action_loss: Optional[float] = None
    total_loss: Optional[float] = None
    probe_scene: Optional[float] = None
    probe_action: Optional[float] = None
    probe_total: Optional[float] = None
    grad_norm: Optional[float] = None
    mode: Optional[str] = None
    episodes: Optional[int] = None
    success_rate: Optional[float] = Field(None, ge=0.0, le=1.0)
    success_by_level: Dict[str, float] = {}
    success_by_variant: Dict[str, float] = {}
    latency_ms: Optional[float] = None
    staleness_mean: Optional[float] = None
    staleness_max: Optional[float] = None
    regrasp_mean: Optional[float] = None

    @field_validator("scene_loss", "action_loss", "total_loss", "probe_scene", "probe_action", "probe_total",
                     "grad_norm")
    @classmethod
    def _finite(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not math.isfinite(value):
            raise ValueError("损失必须是有限值")
        return value

    @field_validator("success_by_level", "success_by_variant")
    @classmethod
    def _rates(cls, value: Dict[str, float]) -> Dict[str, float]:
        if any(not 0.0 <= v <= 1.0 for v in value.values()):
            raise ValueError("成功率必须在 [0, 1] 内")
        return value


def append_metrics(path: PathLike, record: MetricsRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        f.write(record.model_dump_json(exclude_none=True) + "\n")


def read_metrics(path: PathLike) -> List[MetricsRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(MetricsRecord.model_validate_json(line))
        except ValueError as e:
            raise PivotError(f"{path} 第 {lineno} 行不是合法的指标记录: {e}") from e
    return records


# --- 训练 ---

class TrainingResult(NamedTuple):
    policy: PivotPolicy
    records: List[MetricsRecord]
    checkpoint: Optional[Path]


def _probe_samples(store: FeatureStore, seed: int) -> List[Tuple[int, int]]:
    rng = np.random.default_rng([seed, 4])
    count = min(PROBE_SIZE, len(store.samples))
    chosen = np.sort(rng.choice(len(store.samples), size=count, replace=False))
    return [store.samples[i] for i in chosen]


def _diverged(message: str, epoch: int, step: int, last: Optional[dict]) -> TrainingDivergedError:
    detail = json.dumps(last, ensure_ascii=False) if last else "无"
    return TrainingDivergedError(f"训练在 epoch {epoch} 第 {step} 步发散: {message}；上一步损失 {detail}")


def train(config: ExperimentConfig, trajectories: Sequence[Trajectory],
          output_dir: Optional[PathLike] = None) -> TrainingResult:
    """
    在带路点标注的轨迹上最小化 L_scene + L_act。
    编码器冻结；离散器只在训练动作上拟合一次。epoch 0 记录训练前探针批上的损失。
    """
    if not trajectories:
        raise PivotError("训练集为空")
    policy = PivotPolicy(config)
    store = FeatureStore(policy, trajectories)
    policy.discretizer = fit_discretizer(store.all_actions())
    digest = policy.encoder_digest()
    optimizer = Optimizer(policy, OptimizerConfig(lr=config.lr, algorithm=config.optimizer), config.grad_clip)
    rng = np.random.default_rng([config.seed, 3])
    probe = store.batch(_probe_samples(store, config.seed))

    out = Path(output_dir) if output_dir is not None else None
    checkpoint = out / CHECKPOINT_FILE if out is not None else None
    records: List[MetricsRecord] = []

    def emit(record: MetricsRecord) -> None:
        records.append(record)
        if out is not None:
            append_metrics(out / METRICS_FILE, record)

    policy.eval()
    initial = policy.losses(probe)
    emit(MetricsRecord(kind="train", epoch=0, probe_scene=initial.scene, probe_action=initial.action,
                       probe_total=initial.total))
    logger.info(f"🚀 开始训练：{len(store.samples)} 个样本，{config.epochs} 个 epoch，初始探针损失 {initial.total:.4f}")

    step = 0
    last: Optional[dict] = None
    for epoch in range(1, config.epochs + 1):
        policy.train()
        order = rng.permutation(len(store.samples))
        sums = np.zeros(3)
        norms = []
        for start in range(0, len(order), config.batch_size):
            chunk = [store.samples[i] for i in order[start:start + config.batch_size]]
            batch = store.batch(chunk)
            policy.zero_grad()
            policy.set_dropout_context(config.seed, step)
            try:
                losses = policy.loss_and_backward(batch)
                if not math.isfinite(losses.total):
                    raise _diverged("总损失不是有限值", epoch, step, last)
                norms.append(optimizer.step())
            except NonFiniteError as e:
                raise _diverged(str(e), epoch, step, last) from e
            sums += np.array([losses.scene, losses.action, losses.total]) * len(chunk)
            last = losses._asdict()
            step += 1
        scene, action, _ = sums / len(order)
        policy.eval()
        probed = policy.losses(probe)
        emit(MetricsRecord(kind="train", epoch=epoch, scene_loss=float(scene), action_loss=float(action),
                           total_loss=float(scene + action), probe_scene=probed.scene, probe_action=probed.action,
                           probe_total=probed.total, grad_norm=float(np.mean(norms))))
        if checkpoint is not None:
            policy.save(checkpoint, {"epoch": epoch})
        logger.info(f"epoch {epoch}/{config.epochs}: scene={scene:.4f} action={action:.4f} "
                    f"probe={probed.total:.4f}")

    if policy.encoder_digest() != digest:
        raise PivotError("编码器参数在训练中被修改")
    policy.eval()
    logger.info(f"✅ 训练完成，探针损失 {initial.total:.4f} → {records[-1].probe_total:.4f}")
    return TrainingResult(policy=policy, records=records, checkpoint=checkpoint)


# --- 闭环评估 ---

class FrameWindow(NamedTuple):
    """camera 邮箱里的值：最近 h+1 帧观测、对应的 7 维状态和当前世界状态。"""
    observations: Tuple[Observation, ...]
    states: np.ndarray
    world: WorldState


class SimFrameSource:
    """把 SimEnvironment 包装成执行器的环境钩子，observe 返回带历史的帧窗口。"""

    def __init__(self, env: SimEnvironment, history: int):
        self.env = env
        self.history = history
        first = (env.observe(), env.robot_state.to_vector())
        self._frames = deque([first] * (history + 1), maxlen=history + 1)

    def observe(self) -> FrameWindow:
        observations, states = zip(*self._frames)
        return FrameWindow(observations=tuple(observations), states=np.stack(states), world=self.env.world)

    def apply(self, action: Action) -> None:
        self.env.apply(action)
        self._frames.append((self.env.observe(), self.env.robot_state.to_vector()))

    @property
    def done(self) -> bool:
        return self.env.done


ParserFn = Callable[[FrameWindow], PrimitiveAction]


class PolicyStages:
    """三个阶段的计算函数，并记录每次计算的墙钟耗时。"""

    def __init__(self, policy: PivotPolicy, skill: Skill, instruction: str, world: WorldState,
                 parser: Optional[ParserFn] = None):
        self.policy = policy
        self.instruction = instruction
        self.fsm = PrimitiveFsm(skill, world)
        self.parser = parser
        self.wall_s: Dict[str, float] = {"parser": 0.0, "scene": 0.0, "action": 0.0}

    def _timed(self, name: str, fn):
        def compute(inputs):
            began = time.perf_counter()
            try:
                return fn(inputs)
            finally:
                self.wall_s[name] += time.perf_counter() - began
        return compute

    def _parse(self, inputs) -> PrimitiveAction:
        window: FrameWindow = inputs["camera"]
        if self.parser is not None:
            return self.parser(window)
        return self.fsm.update(window.world)

    def _features(self, window: FrameWindow) -> List[np.ndarray]:
        return [self.policy.encode_observation(o) for o in window.observations]

    def _scene(self, inputs) -> np.ndarray:
        window: FrameWindow = inputs["camera"]
        indicator = self.policy.encode_indicator(self.instruction, inputs["parser"])
        return self.policy.predict_scene(indicator, self._features(window))

    def _action(self, inputs) -> Action:
        window: FrameWindow = inputs["camera"]
        logits = self.policy.predict_logits(inputs["scene"], self._features(window), window.states)
        return self.policy.decode(logits)

    def computes(self) -> list:
        return [self._timed("parser", self._parse), self._timed("scene", self._scene),
                self._timed("action", self._action)]

    @property
    def total_wall_ms(self) -> float:
        return sum(self.wall_s.values()) * 1000.0


class EpisodeOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    skill: Skill
    level: int
    variant: SceneVariant
    success: bool
    steps: int
    regrasp_attempts: int
    wall_ms: float
    max_staleness: float
    mean_staleness: float


def run_episode(policy: PivotPolicy, spec: TaskSpec, seed: int, mode: Literal["async", "sync"] = "async",
                rates: Sequence[float] = DEFAULT_RATES, costs_ms: Sequence[float] = (0.0, 0.0, 0.0),
                max_steps: Optional[int] = None, parser_factory: Optional[Callable[[str], ParserFn]] = None
                ) -> EpisodeOutcome:
    """单回合闭环：async 走虚拟时钟的异步执行器，sync 每步串行执行三个阶段。"""
    max_steps = max_steps or policy.config.max_episode_steps
    env = SimEnvironment(spec, seed, max_steps)
    source = SimFrameSource(env, policy.config.history)
    parser = parser_factory(env.instruction) if parser_factory is not None else None
    stages = PolicyStages(policy, spec.skill, env.instruction, env.world, parser)
    chain = chain_stages(rates, costs_ms, stages.computes())
    if mode == "sync":
        trace = run_synchronous(chain, max_steps, source)
    else:
        duration = max_steps / float(rates[-1])
        trace = run_pipeline(ExecutorConfig(rates=tuple(rates), mode="virtual", duration_s=duration), chain, source)
    staleness = [v for r in trace.records if r.status == "executed" for v in r.staleness.values()]
    result = env.result()
    return EpisodeOutcome(skill=spec.skill, level=spec.level, variant=spec.variant, success=result.success,
                          steps=result.steps, regrasp_attempts=result.regrasp_attempts,
                          wall_ms=stages.total_wall_ms,
                          max_staleness=max(staleness, default=0.0),
                          mean_staleness=float(np.mean(staleness)) if staleness else 0.0)


def _rate(outcomes: Sequence[EpisodeOutcome]) -> float:
    return sum(o.success for o in outcomes) / len(outcomes) if outcomes else 0.0


def summarize_outcomes(outcomes: Sequence[EpisodeOutcome], mode: str) -> MetricsRecord:
    if not outcomes:
        raise PivotError("没有评估回合")
    by_level: Dict[str, List[EpisodeOutcome]] = {}
    by_variant: Dict[str, List[EpisodeOutcome]] = {}
    for o in outcomes:
        by_level.setdefault(str(o.level), []).append(o)
        by_variant.setdefault(o.variant.value, []).append(o)
    steps = sum(o.steps for o in outcomes)
    return MetricsRecord(
        kind="eval", mode=mode, episodes=len(outcomes), success_rate=_rate(outcomes),
        success_by_level={k: _rate(v) for k, v in sorted(by_level.items())},
        success_by_variant={k: _rate(v) for k, v in by_variant.items()},
        # 每步平均计算耗时：一个回合内全部阶段的墙钟时间 / 环境步数
        latency_ms=sum(o.wall_ms for o in outcomes) / steps if steps else 0.0,
        staleness_mean=float(np.mean([o.mean_staleness for o in outcomes])),
        staleness_max=max(o.max_staleness for o in outcomes),
        regrasp_mean=float(np.mean([o.regrasp_attempts for o in outcomes])),
    )


def evaluate(policy: PivotPolicy, tasks: Sequence[Union[Skill, str]], episodes: int,
             levels: Sequence[int] = (1,), variants: Sequence[SceneVariant] = (SceneVariant.SEEN,),
             mode: Literal["async", "sync"] = "async", seed: Optional[int] = None,
             rates: Optional[Sequence[float]] = None, costs_ms: Sequence[float] = (0.0, 0.0, 0.0),
             max_steps: Optional[int] = None, parser_factory: Optional[Callable[[str], ParserFn]] = None,
             output_dir: Optional[PathLike] = None) -> MetricsRecord:
    """
    每个 (变体, 等级, 技能) 组合跑 episodes 个测试回合，回合种子取测试划分。
    返回总体、分等级、分变体成功率，以及每步平均计算延迟与重抓次数。
    """
    if policy.discretizer is None:
        raise PivotError("策略没有离散器，不是训练过的 checkpoint")
    policy.eval()
    seed = policy.config.seed if seed is None else seed
    rates = tuple(rates or policy.config.rates)
    logger.info(f"🚀 评估：{len(tasks)} 个技能 × {len(levels)} 个等级 × {len(variants)} 个变体 × {episodes} 回合，"
                f"模式 {mode}")
    outcomes: List[EpisodeOutcome] = []
    for variant in variants:
        for level in levels:
            for task_index, task in enumerate(tasks):
                skill = coerce_skill(task)
                spec = TaskSpec(skill=skill, level=level, variant=variant)
                for e in range(episodes):
                    ep_seed = episode_seed(seed, (task_index * 10 + level) * 10000 + e, "test")
                    outcomes.append(run_episode(policy, spec, ep_seed, mode, rates, costs_ms, max_steps,
                                                parser_factory))
    record = summarize_outcomes(outcomes, mode)
    if output_dir is not None:
        append_metrics(Path(output_dir) / METRICS_FILE, record)
    logger.info(f"✅ 评估完成：成功率 {record.success_rate:.2%}，每步 {record.latency_ms:.2f} ms")
    return record


def latency_ratio(sync_record: MetricsRecord, async_record: MetricsRecord) -> float:
    if not async_record.latency_ms:
        return float("inf")
    return sync_record.latency_ms / async_record.latency_ms


# --- 世界模型诊断 ---

class FeatureDistanceSeries(BaseModel):
    """一条轨迹每一步的 D1（当前帧 vs 路点帧）与 D2（预测 vs 路点帧）。"""
    model_config = ConfigDict(frozen=True)

    instruction: str
    d1: List[float]
    d2: List[float]


class FeatureDistanceReport(BaseModel):
    series: List[FeatureDistanceSeries]
    mean_d1: float
    mean_d2: float
    d2_below_d1: float


def diag_feature_distances(policy: PivotPolicy, trajectories: Sequence[Trajectory]) -> FeatureDistanceReport:
    policy.eval()
    squared = policy.config.scene_loss_variant == "squared"
    h = policy.config.history
    series: List[FeatureDistanceSeries] = []
    for i, traj in enumerate(trajectories):
        if any(s.waypoint_target is None or s.primitive_label is None for s in traj.steps):
            raise PivotError(f"第 {i} 条轨迹缺少路点或原语标注")
        features = [policy.encode_observation(s.observation) for s in traj.steps]
        d1, d2 = [], []
        for t, step in enumerate(traj.steps):
            target = features[step.waypoint_target]
            window = [features[max(0, j)] for j in range(t - h, t + 1)]
            predicted = policy.predict_scene(policy.encode_indicator(traj.instruction, step.primitive_label), window)
            d1.append(scene_loss(features[t], target, squared))
            d2.append(scene_loss(predicted, target, squared))
        series.append(FeatureDistanceSeries(instruction=traj.instruction, d1=d1, d2=d2))
    all_d1 = np.concatenate([s.d1 for s in series]) if series else np.zeros(0)
    all_d2 = np.concatenate([s.d2 for s in series]) if series else np.zeros(0)
    return FeatureDistanceReport(
        series=series,
        mean_d1=float(all_d1.mean()) if all_d1.size else 0.0,
        mean_d2=float(all_d2.mean()) if all_d2.size else 0.0,
        d2_below_d1=float(np.mean(all_d2 < all_d1)) if all_d1.size else 0.0,
    )


def save_feature_distances(report: FeatureDistanceReport, path: PathLike) -> None:
    """每行一条轨迹的序列，最后一行是汇总。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [s.model_dump_json() for s in report.series]
    lines.append(json.dumps({"mean_d1": report.mean_d1, "mean_d2": report.mean_d2,
                             "d2_below_d1": report.d2_below_d1}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"✅ 特征距离序列已写出: {path}")


def load_feature_distances(path: PathLike) -> FeatureDistanceReport:
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise PivotError(f"特征距离文件为空: {path}")
    try:
        summary = json.loads(lines[-1])
        series = [FeatureDistanceSeries.model_validate_json(line) for line in lines[:-1]]
        return FeatureDistanceReport(series=series, **summary)
    except ValueError as e:
        raise PivotError(f"{path} 不是合法的特征距离文件: {e}") from e
