# state.py
import operator
from fractions import Fraction
from typing import Annotated, Any, Dict, List, Optional, TypedDict

from ahe import TickRecord
from config import ExperimentConfig
from data_models import Trajectory
from training import FeatureDistanceReport, MetricsRecord


# --- 同步步进图的状态 ---

class SyncStepState(TypedDict):
    """
    串行基线每一步依次经过 parser → scene → action 三个节点。
    records 由各节点追加，时间是精确有理数。
    """
    step: int
    steps: int
    time: Fraction
    records: Annotated[List[TickRecord], operator.add]
    env_steps: int
    error_message: Optional[str]


# --- 实验工作流的状态 ---

class ExperimentState(TypedDict, total=False):
    """
    一次“准备数据 → 标注 → 训练 → 评估 → 汇总”的共享状态。
    label 是消融表里这一行的名字。
    """
    config: ExperimentConfig
    label: str
    eval_mode: str
    train_data: List[Trajectory]
    test_data: List[Trajectory]
    policy: Any
    train_metrics: List[MetricsRecord]
    eval_metrics: Optional[MetricsRecord]
    feature_distances: Optional[FeatureDistanceReport]
    row: Dict[str, Any]
    output_dir: Optional[str]

    # 流程控制/辅助信息
    error_message: Optional[str]
