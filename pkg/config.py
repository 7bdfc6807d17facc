# config.py
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

load_dotenv()

# --- 视觉-语言模型（VLM）服务 ---
VLM_BASE_URL = os.getenv("PIVOT_VLM_BASE_URL", "http://127.0.0.1:8765")
VLM_MODEL = os.getenv("PIVOT_VLM_MODEL", "llava-desk")
VLM_TIMEOUT_MS = int(os.getenv("PIVOT_VLM_TIMEOUT_MS", "5000"))
VLM_MAX_RETRIES = int(os.getenv("PIVOT_VLM_MAX_RETRIES", "3"))
VLM_BACKOFF_MS = int(os.getenv("PIVOT_VLM_BACKOFF_MS", "1000"))
VLM_MAX_TOKENS = 512

LOG_LEVEL = os.getenv("PIVOT_LOG_LEVEL", "INFO")

# --- 图像/文本编码器 ---
IMAGE_SIZE = 56
PATCH_SIZE = 8
TEXT_TABLE_SIZE = 4096

# --- 动作离散化 ---
N_BINS = 256
ACTION_DIMS = 7
ACTION_BOUND = 0.02  # 每步每个分量的最大位移（米 / 弧度）

# --- 仿真器（单位：米） ---
WORKSPACE = ((0.0, 1.0), (0.0, 1.0), (0.0, 0.5))
TABLE_HEIGHT = 0.0
GRASP_RADIUS = 0.02
GRIPPER_RADIUS = 0.015
HOME_POSITION = (0.5, 0.15, 0.25)
HOVER_HEIGHT = 0.15
MIN_OBJECT_SPACING = 0.15
LIFT_SUCCESS = 0.10
NEAR_SUCCESS = 0.10
PUSH_SUCCESS = 0.10
DOOR_OPEN_DEG = 80.0
DOOR_CLOSED_DEG = 10.0
MAX_EPISODE_STEPS = 200

# 门：绕竖直铰链转动，角度 0° 为关闭，把手随角度沿圆弧移动
DOOR_HINGE = (0.3, 0.9)
DOOR_LENGTH = 0.3
DOOR_HANDLE_Z = 0.1
DOOR_HANDLE_RADIUS = 0.02
DOOR_MAX_DEG = 120.0

# --- 专家策略 ---
EXPERT_STEP_CAP = 0.018
EXPERT_NOISE = 2e-4
PUSH_CLEARANCE = 0.01  # 推之前夹爪与物体接触圆之间的间隙
PLACE_OFFSET = 0.07  # MoveANearB 中 A 放到 B 旁边的水平距离
CARRY_HEIGHT = 0.12  # MoveUp 的目标：物体底部离桌面的高度

# --- 路点标注 ---
WAYPOINT_SPEED_EPS = 1e-3
WAYPOINT_WINDOW = 3
INTERVAL_FRAMES = 5

# --- AHE 执行频率 (v1 < v2 < v3) ---
DEFAULT_RATES = (3.0, 10.0, 30.0)

DATASET_HEADER = "pivot-dataset v1"
CHECKPOINT_HEADER = "pivot-checkpoint v1"
TRACE_HEADER = "pivot-trace v1"

_ENV_PREFIX = "PIVOT_"


def setup_logging(level: Optional[str] = None) -> None:
    """按 PIVOT_LOG_LEVEL 配置根日志器，只生效一次。"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class ExperimentConfig(BaseModel):
    """
    一次实验的全部超参数。
    完整规模的取值（d=512, LS=12, LA=3, heads=8, dropout=0.1, lr=3e-5, h=3）见 configs/full.env。
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    encoder_seed: int = 1234
    d_model: int = 64
    ls: int = Field(2, ge=1)
    la: int = Field(2, ge=1)
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    lr: float = Field(1e-3, gt=0.0)
    optimizer: Literal["sgd", "adam"] = "adam"
    grad_clip: float = 1.0
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(20, ge=1)
    history: int = Field(3, ge=0)
    rates: Tuple[float, float, float] = DEFAULT_RATES
    waypoint_target_mode: Literal["waypoint", "pac", "rsc", "next", "interval", "final"] = "waypoint"
    scene_loss_variant: Literal["unsquared", "squared"] = "unsquared"
    video_decoder: bool = False
    parser_mode: Literal["rule", "wire"] = "rule"
    vlm_base_url: Optional[str] = None
    tasks: List[str] = ["PickTarget"]
    demos_per_task: int = 200
    levels: List[int] = [1]
    eval_episodes: int = 50
    max_episode_steps: int = MAX_EPISODE_STEPS
    image_size: int = IMAGE_SIZE
    patch_size: int = PATCH_SIZE
    text_table_size: int = TEXT_TABLE_SIZE
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    output_dir: str = "runs/desk"

    @field_validator("rates", "tasks", "levels", mode="before")
    @classmethod
    def _split_csv(cls, value: Any) -> Any:
        # 配置文件里的列表写成逗号分隔
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads={self.heads} 不能整除 d_model={self.d_model}")
        v1, v2, v3 = self.rates
        if not (0 < v1 < v2 < v3):
            raise ValueError(f"执行频率必须满足 0 < v1 < v2 < v3，当前为 {self.rates}")
        if self.image_size % self.patch_size != 0:
            raise ValueError("图像尺寸必须是 patch 大小的整数倍")
        if any(level not in (1, 2, 3, 4) for level in self.levels):
            raise ValueError(f"指令等级只能是 1..4，当前为 {self.levels}")
        return self

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def check_paths(self) -> None:
        """运行开始时，配置中引用的数据文件必须存在。"""
        for name in ("train_path", "test_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"配置项 {name} 指向的文件不存在: {path}")


def load_experiment_config(path: Optional[str] = None, **overrides: Any) -> ExperimentConfig:
    """
    读取 KEY=value 格式（dotenv 语法）的实验配置文件。
    优先级：显式 overrides > 环境变量 PIVOT_<KEY> > 配置文件 > 默认值。
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"配置文件不存在: {path}")
        raw.update({k.lower(): v for k, v in dotenv_values(path).items() if v is not None})

    for field_name in ExperimentConfig.model_fields:
        env_value = os.getenv(_ENV_PREFIX + field_name.upper())
        if env_value is not None:
            raw[field_name] = env_value

    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"实验配置校验失败: {e}") from e
