# data_models.py
import base64
import math
from enum import Enum, IntEnum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from config import DOOR_HANDLE_Z, DOOR_HINGE, DOOR_LENGTH


def normalize_angle(theta: float) -> float:
    """把角度规整到 (-π, π]，对已规整的值是恒等映射。"""
    r = math.remainder(theta, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


class Skill(str, Enum):
    """仿真器支持的 8 个技能。"""
    PICK_TARGET = "PickTarget"
    PLACE_TARGET = "PlaceTarget"
    MOVE_A_NEAR_B = "MoveANearB"
    OPEN_DOOR = "OpenDoor"
    CLOSE_DOOR = "CloseDoor"
    PUSH_TARGET_FRONT = "PushTargetFront"
    PUSH_TARGET_ASIDE = "PushTargetAside"
    KNOCK_TARGET_OVER = "KnockTargetOver"


class GripperState(IntEnum):
    OPEN = 0
    CLOSED = 1


class Pose6(BaseModel):
    """末端位姿或位姿增量：x, y, z 单位米；roll, pitch, yaw 单位弧度。"""
    model_config = ConfigDict(frozen=True)

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    @field_validator("x", "y", "z", "roll", "pitch", "yaw")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("位姿分量必须是有限值")
        return value

    @field_validator("roll", "pitch", "yaw")
    @classmethod
    def _wrap(cls, value: float) -> float:
        return normalize_angle(value)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, values) -> "Pose6":
        x, y, z, roll, pitch, yaw = (float(v) for v in values)
        return cls(x=x, y=y, z=z, roll=roll, pitch=pitch, yaw=yaw)


class Action(BaseModel):
    """7 维动作 A=(ΔS, G)：末端位姿增量加夹爪目标状态。"""
    model_config = ConfigDict(frozen=True)

    delta: Pose6 = Pose6()
    gripper: GripperState = GripperState.OPEN

    def to_vector(self) -> np.ndarray:
        return np.append(self.delta.as_array(), float(self.gripper))

    @classmethod
    def from_vector(cls, values) -> "Action":
        values = np.asarray(values, dtype=np.float64)
        return cls(delta=Pose6.from_array(values[:6]),
                   gripper=GripperState.CLOSED if values[6] >= 0.5 else GripperState.OPEN)

    def within_bounds(self, bound: float) -> bool:
        return bool(np.all(np.abs(self.delta.as_array()) <= bound + 1e-12))


class Observation(BaseModel):
    """H×W×3 的 uint8 RGB 图像，按行优先存储为原始字节。"""
    model_config = ConfigDict(frozen=True)

    rgb: bytes
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    timestamp: int = 0

    @field_validator("rgb", mode="before")
    @classmethod
    def _decode(cls, value):
        if isinstance(value, str):
            return base64.b64decode(value.encode("ascii"), validate=True)
        return value

    @field_serializer("rgb", when_used="json")
    def _encode(self, value: bytes) -> str:
        return base64.b64encode(value).decode("ascii")

    @model_validator(mode="after")
    def _check_size(self) -> "Observation":
        if len(self.rgb) != self.height * self.width * 3:
            raise ValueError(f"rgb 字节数 {len(self.rgb)} 与 {self.height}x{self.width}x3 不符")
        return self

    @property
    def array(self) -> np.ndarray:
        return np.frombuffer(self.rgb, dtype=np.uint8).reshape(self.height, self.width, 3)

    @classmethod
    def from_array(cls, image: np.ndarray, timestamp: int = 0) -> "Observation":
        image = np.ascontiguousarray(image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"图像必须是 H×W×3，当前为 {image.shape}")
        return cls(rgb=image.tobytes(), height=image.shape[0], width=image.shape[1], timestamp=timestamp)


class PrimitiveKind(str, Enum):
    CLOSE_TO = "CloseTo"
    GRASP = "Grasp"
    MOVE_UP = "MoveUp"
    MOVE_DOWN = "MoveDown"
    RELEASE = "Release"
    ROTATE = "Rotate"
    PUSH = "Push"
    PULL = "Pull"
    OPEN = "Open"
    CLOSE = "Close"


DIRECTIONAL_KINDS = (PrimitiveKind.ROTATE, PrimitiveKind.PUSH, PrimitiveKind.PULL)


class Direction(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"
    FRONT = "Front"
    BACK = "Back"


class PrimitiveAction(BaseModel):
    """原语动作：10 类之一，旋转/推/拉可带方向，target 为目标物体标签（可为空）。"""
    model_config = ConfigDict(frozen=True)

    kind: PrimitiveKind
    direction: Optional[Direction] = None
    target: str = ""

    @model_validator(mode="after")
    def _direction_only_when_directional(self) -> "PrimitiveAction":
        if self.direction is not None and self.kind not in DIRECTIONAL_KINDS:
            raise ValueError(f"原语 {self.kind.value} 不接受方向参数")
        return self


class WaypointCause(str, Enum):
    PRIMITIVE_COMPLETION = "PrimitiveCompletion"
    ROBOT_STATE_CHANGE = "RobotStateChange"


class WaypointMark(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int = Field(ge=0)
    primitive: Optional[PrimitiveAction] = None
    cause: WaypointCause


class RobotState(BaseModel):
    """机器人状态 S_t：末端位姿与夹爪状态，向量形式为 7 维。"""
    model_config = ConfigDict(frozen=True)

    pose: Pose6 = Pose6()
    gripper: GripperState = GripperState.OPEN

    def to_vector(self) -> np.ndarray:
        return np.append(self.pose.as_array(), float(self.gripper))


class TrajectoryStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    observation: Observation
    state: RobotState
    action: Optional[Action] = None
    waypoint_target: Optional[int] = None
    primitive_label: Optional[PrimitiveAction] = None


class Trajectory(BaseModel):
    """一条示教轨迹 Tra = {l, [O_t, S_t, A_t, M_t] ...}。"""
    model_config = ConfigDict(frozen=True)

    instruction: str = Field(min_length=1)
    level: int = Field(ge=1, le=4)
    task: Skill
    steps: List[TrajectoryStep]
    waypoints: List[WaypointMark] = []
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_invariants(self) -> "Trajectory":
        T = len(self.steps)
        if T < 2:
            raise ValueError(f"轨迹长度 T={T}，至少需要 2 步")
        for i, step in enumerate(self.steps[:-1]):
            if step.action is None:
                raise ValueError(f"第 {i} 步缺少动作（只有最后一步可以没有动作）")
        for i, step in enumerate(self.steps):
            if step.waypoint_target is not None and not (i <= step.waypoint_target < T):
                raise ValueError(f"第 {i} 步的 waypoint_target={step.waypoint_target} 超出 [{i}, {T})")
        previous = -1
        for mark in self.waypoints:
            if mark.step <= previous or mark.step >= T:
                raise ValueError(f"路点 {mark.step} 未严格递增或超出轨迹范围")
            previous = mark.step
        return self

    @property
    def length(self) -> int:
        return len(self.steps)


class HistoryWindow(BaseModel):
    """最近 h+1 帧的观测和状态，最旧的在前。"""
    model_config = ConfigDict(frozen=True)

    h: int = Field(ge=0)
    indices: Tuple[int, ...]
    observations: Tuple[Observation, ...]
    states: Tuple[RobotState, ...]

    @model_validator(mode="after")
    def _check_length(self) -> "HistoryWindow":
        if not (len(self.indices) == len(self.observations) == len(self.states) == self.h + 1):
            raise ValueError("历史窗口必须恰好包含 h+1 项")
        return self

    def state_matrix(self) -> np.ndarray:
        return np.stack([s.to_vector() for s in self.states])


# --- 仿真器世界状态 ---

class SceneVariant(str, Enum):
    """鲁棒性评估的场景变体。"""
    SEEN = "seen"
    UNSEEN_BACKGROUND = "unseen_background"
    CHANGING_LIGHT = "changing_light"
    DISTRACTORS = "distractors"


class SimObject(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    color: str
    shape: str
    position: Tuple[float, float, float]
    start_position: Tuple[float, float, float]
    radius: float = Field(gt=0.0)
    upright: bool = True

    @field_validator("position", "start_position")
    @classmethod
    def _finite(cls, value):
        if not all(math.isfinite(v) for v in value):
            raise ValueError("物体坐标必须是有限值")
        return value

    @property
    def xyz(self) -> np.ndarray:
        return np.array(self.position)

    @property
    def bottom(self) -> float:
        return self.position[2] - self.radius


class TaskSpec(BaseModel):
    """一个任务：技能、指令等级、干扰物数量与场景变体。目标物体标签在 reset 时确定。"""
    model_config = ConfigDict(frozen=True)

    skill: Skill
    level: int = Field(1, ge=1, le=4)
    distractors: Optional[int] = Field(None, ge=0)
    variant: SceneVariant = SceneVariant.SEEN


class WorldState(BaseModel):
    """
    桌面世界的完整状态。门用铰链角度（度）表示，None 表示场景里没有门。
    held 非空时夹爪一定是闭合的。
    """
    model_config = ConfigDict(frozen=True)

    skill: Skill
    targets: Tuple[str, ...]
    direction: Optional[Direction] = None
    objects: Tuple[SimObject, ...]
    gripper: Pose6
    gripper_state: GripperState = GripperState.OPEN
    held: Optional[str] = None
    door_angle: Optional[float] = None
    door_grasped: bool = False
    table_height: float = 0.0
    step_count: int = 0
    variant: SceneVariant = SceneVariant.SEEN

    @model_validator(mode="after")
    def _check_holding(self) -> "WorldState":
        if self.held is not None:
            if self.gripper_state != GripperState.CLOSED:
                raise ValueError("持有物体时夹爪必须闭合")
            if self.held not in {o.label for o in self.objects}:
                raise ValueError(f"持有的物体 {self.held} 不在场景中")
        if self.door_grasped and self.door_angle is None:
            raise ValueError("场景中没有门，不能抓住门把手")
        return self

    def object(self, label: str) -> SimObject:
        for obj in self.objects:
            if obj.label == label:
                return obj
        raise KeyError(label)

    @property
    def gripper_xyz(self) -> np.ndarray:
        return self.gripper.position

    @property
    def robot_state(self) -> RobotState:
        return RobotState(pose=self.gripper, gripper=self.gripper_state)

    def door_handle(self, angle: Optional[float] = None) -> np.ndarray:
        """门把手在给定角度（默认当前角度）下的三维位置。"""
        theta = math.radians(self.door_angle if angle is None else angle)
        hx, hy = DOOR_HINGE
        return np.array([hx + DOOR_LENGTH * math.cos(theta), hy - DOOR_LENGTH * math.sin(theta), DOOR_HANDLE_Z])


class EpisodeResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    success: bool
    steps: int
    final_state: WorldState
    trajectory: Optional[Trajectory] = None
    regrasp_attempts: int = 0


# --- VLM 对话 ---

class PromptMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    content: str


class PromptRound(BaseModel):
    """
    一轮对话请求：按顺序排列的带角色消息，最后一条是本轮的用户提示。
    image 为附在最后一条用户消息上的 PNG 字节。
    """
    model_config = ConfigDict(frozen=True)

    stage: int = Field(ge=1, le=3)
    mode: Literal["primitive", "new_instruction", "new_task"] = "primitive"
    messages: Tuple[PromptMessage, ...]
    image: Optional[bytes] = None

    @model_validator(mode="after")
    def _ends_with_user(self) -> "PromptRound":
        if not self.messages or self.messages[-1].role != "user":
            raise ValueError("最后一条消息必须是用户提示")
        return self

    @property
    def prompt(self) -> str:
        return self.messages[-1].content
