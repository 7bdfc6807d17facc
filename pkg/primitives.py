# primitives.py
"""
原语动作分类表、按技能推进的规则有限状态机，以及 VLM 输出解析。

规则状态机既是桌面规模下 VLM 的替代品，也是数据标注的原语来源：
每个技能是一串 (原语, 完成谓词)，谓词只看当前 WorldState 的几何关系。
"""
import json
import logging
import re
from typing import Callable, Dict, List, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from config import (DOOR_CLOSED_DEG, DOOR_OPEN_DEG, GRASP_RADIUS, GRIPPER_RADIUS, LIFT_SUCCESS, NEAR_SUCCESS,
                    PLACE_OFFSET, PUSH_CLEARANCE, PUSH_SUCCESS)
from data_models import DIRECTIONAL_KINDS, Direction, PrimitiveAction, PrimitiveKind, Skill, WorldState
from errors import PrimitiveParseError, UnknownSkillError

logger = logging.getLogger(__name__)

# 原语的文字描述，用于组成路点指示文本
PRIMITIVE_DESCRIPTIONS: Dict[PrimitiveKind, str] = {
    PrimitiveKind.CLOSE_TO: "Move close to the target object",
    PrimitiveKind.GRASP: "Hold or pick up the target object",
    PrimitiveKind.MOVE_UP: "Lift the target object upwards",
    PrimitiveKind.MOVE_DOWN: "Lower the target object downwards",
    PrimitiveKind.RELEASE: "Let go of or put down the target object",
    PrimitiveKind.ROTATE: "Turn the target object",
    PrimitiveKind.PUSH: "Push the target object",
    PrimitiveKind.PULL: "Pull the target object",
    PrimitiveKind.OPEN: "Open an object, such as a door or container",
    PrimitiveKind.CLOSE: "Close an object, such as a door or container",
}

DIRECTION_VECTORS: Dict[Direction, np.ndarray] = {
    Direction.FRONT: np.array([0.0, 1.0]),
    Direction.BACK: np.array([0.0, -1.0]),
    Direction.LEFT: np.array([-1.0, 0.0]),
    Direction.RIGHT: np.array([1.0, 0.0]),
}

DOOR_LABEL = "door"
# 门的开/关谓词比成功阈值多留 5° 余量
DOOR_OPEN_DONE = DOOR_OPEN_DEG + 5.0
DOOR_CLOSED_DONE = DOOR_CLOSED_DEG - 5.0
PLACE_DONE_HEIGHT = 0.01
CARRY_NEAR_DONE = NEAR_SUCCESS - 0.02


def describe_primitive(primitive: PrimitiveAction) -> str:
    """原语的小写文字描述；带方向时追加方向，带目标时追加 ': 目标'。"""
    text = PRIMITIVE_DESCRIPTIONS[primitive.kind].lower()
    if primitive.direction is not None:
        text += f" {primitive.direction.value.lower()}"
    if primitive.target:
        text += f": {primitive.target}"
    return text


# --- 几何谓词 ---

def _distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


def prepush_pose(world: WorldState, label: str, direction: Direction, high: bool = False) -> np.ndarray:
    """推之前夹爪应到达的位置：物体后方、接触圆外 PUSH_CLEARANCE 处。high=True 时位于物体中心上方（用于推倒）。"""
    obj = world.object(label)
    offset = obj.radius + GRIPPER_RADIUS + PUSH_CLEARANCE
    xy = np.array(obj.position[:2]) - DIRECTION_VECTORS[direction] * offset
    z = obj.position[2] + (0.8 * obj.radius if high else 0.0)
    return np.array([xy[0], xy[1], z])


def push_displacement(world: WorldState, label: str, direction: Direction) -> float:
    obj = world.object(label)
    moved = np.array(obj.position[:2]) - np.array(obj.start_position[:2])
    return float(moved @ DIRECTION_VECTORS[direction])


def carry_goal(world: WorldState, label_a: str, label_b: str) -> np.ndarray:
    """MoveANearB 中 A 的水平目标点：B 朝 A 起始位置方向偏移 PLACE_OFFSET。"""
    a, b = world.object(label_a), world.object(label_b)
    towards_a = np.array(a.start_position[:2]) - np.array(b.position[:2])
    norm = np.linalg.norm(towards_a)
    unit = towards_a / norm if norm > 1e-9 else np.array([1.0, 0.0])
    return np.array(b.position[:2]) + unit * PLACE_OFFSET


def _near(label: str) -> Callable[[WorldState], bool]:
    def done(world: WorldState) -> bool:
        return world.held == label or _distance(world.gripper_xyz, world.object(label).xyz) <= GRASP_RADIUS
    return done


def _grasped(label: str) -> Callable[[WorldState], bool]:
    return lambda world: world.held == label


def _lifted(label: str) -> Callable[[WorldState], bool]:
    return lambda world: world.object(label).bottom - world.table_height >= LIFT_SUCCESS - 1e-9


def _lowered(label: str) -> Callable[[WorldState], bool]:
    return lambda world: world.object(label).bottom - world.table_height <= PLACE_DONE_HEIGHT


def _released(label: str) -> Callable[[WorldState], bool]:
    return lambda world: world.held != label


def _carried_near(label_a: str, label_b: str) -> Callable[[WorldState], bool]:
    def done(world: WorldState) -> bool:
        a, b = world.object(label_a), world.object(label_b)
        return _distance(np.array(a.position[:2]), np.array(b.position[:2])) <= CARRY_NEAR_DONE
    return done


def _at_prepush(label: str, direction: Direction, high: bool = False) -> Callable[[WorldState], bool]:
    return lambda world: _distance(world.gripper_xyz, prepush_pose(world, label, direction, high)) <= GRASP_RADIUS


def _pushed(label: str, direction: Direction) -> Callable[[WorldState], bool]:
    return lambda world: push_displacement(world, label, direction) >= PUSH_SUCCESS


def _knocked(label: str) -> Callable[[WorldState], bool]:
    return lambda world: not world.object(label).upright


def _near_handle(world: WorldState) -> bool:
    return world.door_grasped or _distance(world.gripper_xyz, world.door_handle()) <= GRASP_RADIUS


class ProgramStep(NamedTuple):
    primitive: PrimitiveAction
    done: Callable[[WorldState], bool]


def _step(kind: PrimitiveKind, target: str, done, direction: Optional[Direction] = None) -> ProgramStep:
    return ProgramStep(PrimitiveAction(kind=kind, direction=direction, target=target), done)


def coerce_skill(task: Union[Skill, str]) -> Skill:
    try:
        return Skill(task)
    except ValueError:
        raise UnknownSkillError(f"未知技能: {task!r}")


def skill_program(task: Union[Skill, str], world: WorldState) -> List[ProgramStep]:
    """技能对应的原语序列及每一步的完成谓词。"""
    skill = coerce_skill(task)
    K = PrimitiveKind
    if skill in (Skill.OPEN_DOOR, Skill.CLOSE_DOOR):
        if world.door_angle is None:
            raise UnknownSkillError(f"技能 {skill.value} 需要场景中有门")
        if skill == Skill.OPEN_DOOR:
            swing = _step(K.OPEN, DOOR_LABEL, lambda w: w.door_angle >= DOOR_OPEN_DONE)
        else:
            swing = _step(K.CLOSE, DOOR_LABEL, lambda w: w.door_angle <= DOOR_CLOSED_DONE)
        return [
            _step(K.CLOSE_TO, DOOR_LABEL, _near_handle),
            _step(K.GRASP, DOOR_LABEL, lambda w: w.door_grasped),
            swing,
            _step(K.RELEASE, DOOR_LABEL, lambda w: not w.door_grasped),
        ]

    target = world.targets[0]
    if skill == Skill.PICK_TARGET:
        return [
            _step(K.CLOSE_TO, target, _near(target)),
            _step(K.GRASP, target, _grasped(target)),
            _step(K.MOVE_UP, target, _lifted(target)),
        ]
    if skill == Skill.PLACE_TARGET:
        return [
            _step(K.MOVE_DOWN, target, _lowered(target)),
            _step(K.RELEASE, target, _released(target)),
        ]
    if skill == Skill.MOVE_A_NEAR_B:
        other = world.targets[1]
        return [
            _step(K.CLOSE_TO, target, _near(target)),
            _step(K.GRASP, target, _grasped(target)),
            _step(K.MOVE_UP, target, _lifted(target)),
            _step(K.CLOSE_TO, other, _carried_near(target, other)),
            _step(K.MOVE_DOWN, target, _lowered(target)),
            _step(K.RELEASE, target, _released(target)),
        ]
    if skill in (Skill.PUSH_TARGET_FRONT, Skill.PUSH_TARGET_ASIDE):
        direction = world.direction or Direction.FRONT
        return [
            _step(K.CLOSE_TO, target, _at_prepush(target, direction)),
            _step(K.PUSH, target, _pushed(target, direction), direction),
        ]
    # KnockTargetOver
    return [
        _step(K.CLOSE_TO, target, _at_prepush(target, Direction.FRONT, high=True)),
        _step(K.PUSH, target, _knocked(target), Direction.FRONT),
    ]


def parse_primitive_rule(task: Union[Skill, str], world: WorldState, start: int = 0) -> PrimitiveAction:
    """从第 start 个原语开始，跳过已完成的原语，返回第一个未完成的（全部完成时返回最后一个）。"""
    program = skill_program(task, world)
    return program[_advance(program, world, start)].primitive


def _advance(program: List[ProgramStep], world: WorldState, index: int) -> int:
    while index < len(program) - 1 and program[index].done(world):
        index += 1
    return index


class PrimitiveFsm:
    """带单调索引的规则解析器：一个回合内只会前进，不会回到已完成的原语。"""

    def __init__(self, task: Union[Skill, str], world: WorldState):
        self.skill = coerce_skill(task)
        self.program = skill_program(self.skill, world)
        self.index = 0

    def update(self, world: WorldState) -> PrimitiveAction:
        self.index = _advance(self.program, world, self.index)
        return self.program[self.index].primitive

    @property
    def current(self) -> PrimitiveAction:
        return self.program[self.index].primitive

    def finished(self, world: WorldState) -> bool:
        return self.index == len(self.program) - 1 and self.program[-1].done(world)

    def sequence(self) -> List[PrimitiveAction]:
        return [step.primitive for step in self.program]


# --- VLM 输出解析 ---

class DoAction(BaseModel):
    model_config = ConfigDict(frozen=True)

    action: str
    target: str = ""


ACTION_SYNONYMS: Dict[str, PrimitiveKind] = {
    "move close to": PrimitiveKind.CLOSE_TO,
    "close to": PrimitiveKind.CLOSE_TO,
    "move to": PrimitiveKind.CLOSE_TO,
    "approach": PrimitiveKind.CLOSE_TO,
    "go to": PrimitiveKind.CLOSE_TO,
    "reach": PrimitiveKind.CLOSE_TO,
    "clamp": PrimitiveKind.GRASP,
    "grasp": PrimitiveKind.GRASP,
    "grab": PrimitiveKind.GRASP,
    "hold": PrimitiveKind.GRASP,
    "pick up": PrimitiveKind.GRASP,
    "lift": PrimitiveKind.MOVE_UP,
    "move up": PrimitiveKind.MOVE_UP,
    "raise": PrimitiveKind.MOVE_UP,
    "move down": PrimitiveKind.MOVE_DOWN,
    "put down": PrimitiveKind.MOVE_DOWN,
    "lower": PrimitiveKind.MOVE_DOWN,
    "unclamp": PrimitiveKind.RELEASE,
    "release": PrimitiveKind.RELEASE,
    "let go": PrimitiveKind.RELEASE,
    "drop": PrimitiveKind.RELEASE,
    "screw": PrimitiveKind.ROTATE,
    "rotate": PrimitiveKind.ROTATE,
    "turn": PrimitiveKind.ROTATE,
    "twist": PrimitiveKind.ROTATE,
    "push": PrimitiveKind.PUSH,
    "move": PrimitiveKind.PUSH,
    "pull": PrimitiveKind.PULL,
    "open": PrimitiveKind.OPEN,
    "close": PrimitiveKind.CLOSE,
}

DIRECTION_WORDS: Dict[str, Direction] = {
    "left": Direction.LEFT,
    "right": Direction.RIGHT,
    "front": Direction.FRONT,
    "forward": Direction.FRONT,
    "back": Direction.BACK,
    "backward": Direction.BACK,
}

# 规范回写时使用的短语，parse_vlm_output ∘ render_do_action 为恒等
CANONICAL_PHRASES: Dict[PrimitiveKind, str] = {
    PrimitiveKind.CLOSE_TO: "close to",
    PrimitiveKind.GRASP: "grasp",
    PrimitiveKind.MOVE_UP: "move up",
    PrimitiveKind.MOVE_DOWN: "move down",
    PrimitiveKind.RELEASE: "release",
    PrimitiveKind.ROTATE: "rotate",
    PrimitiveKind.PUSH: "push",
    PrimitiveKind.PULL: "pull",
    PrimitiveKind.OPEN: "open",
    PrimitiveKind.CLOSE: "close",
}


def map_action_phrase(phrase: str, target: str = "") -> PrimitiveAction:
    """把 VLM 的动作短语映射到分类表；方向词只对旋转/推/拉保留。"""
    words = re.findall(r"[a-z]+", phrase.lower())
    direction = None
    rest = []
    for word in words:
        if word in DIRECTION_WORDS and direction is None:
            direction = DIRECTION_WORDS[word]
        else:
            rest.append(word)
    normalized = " ".join(rest)
    kind = ACTION_SYNONYMS.get(normalized)
    # 单独的 "move" 只有带方向时才表示推
    if kind is None or (normalized == "move" and direction is None):
        raise PrimitiveParseError(f"无法映射到原语分类表的动作: {phrase!r}", raw_text=phrase)
    return PrimitiveAction(kind=kind, direction=direction if kind in DIRECTIONAL_KINDS else None, target=target)


def iter_json_objects(text: str):
    """按出现顺序枚举文本中每个花括号配平的片段（跳过字符串内部的括号）。"""
    for start in (i for i, ch in enumerate(text) if ch == "{"):
        depth, in_string, escaped = 0, False, False
        for end in range(start, len(text)):
            ch = text[end]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield text[start:end + 1]
                    break


def _loads_lenient(fragment: str) -> Optional[dict]:
    # 示例输出里的 `"do_action" {` 缺少冒号，以及结尾多余的逗号
    for candidate in (fragment,
                      re.sub(r'"(\w+)"\s*(?=[{\[])', r'"\1": ', fragment),
                      re.sub(r",\s*([}\]])", r"\1", re.sub(r'"(\w+)"\s*(?=[{\[])', r'"\1": ', fragment))):
        try:
            value = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    return None


def extract_do_action(text: str) -> DoAction:
    for fragment in iter_json_objects(text):
        obj = _loads_lenient(fragment)
        if obj is None:
            continue
        payload = obj.get("do_action", obj if "action" in obj else None)
        if not isinstance(payload, dict):
            continue
        try:
            return DoAction.model_validate(payload)
        except ValidationError:
            continue
    raise PrimitiveParseError("输出中没有格式正确的 do_action 对象", raw_text=text)


def parse_vlm_output(text: str) -> PrimitiveAction:
    """解析第三轮回复：取第一个合法的 do_action 对象并映射到原语。"""
    do_action = extract_do_action(text)
    try:
        return map_action_phrase(do_action.action, do_action.target)
    except PrimitiveParseError as e:
        raise PrimitiveParseError(str(e), raw_text=text) from e


def parse_action_list(text: str) -> List[PrimitiveAction]:
    """解析第二轮回复中的 actions 列表；无法映射的条目被丢弃并记录。"""
    match = re.search(r'"actions"\s*:\s*\[', text)
    if match is None:
        raise PrimitiveParseError("输出中没有 actions 列表", raw_text=text)
    start = match.end() - 1
    depth = 0
    for end in range(start, len(text)):
        if text[end] == "[":
            depth += 1
        elif text[end] == "]":
            depth -= 1
            if depth == 0:
                break
    body = text[start:end + 1]
    actions: List[PrimitiveAction] = []
    for fragment in iter_json_objects(body):
        obj = _loads_lenient(fragment)
        if not obj or "action" not in obj:
            continue
        try:
            actions.append(map_action_phrase(str(obj["action"]), str(obj.get("target", ""))))
        except PrimitiveParseError:
            logger.warning(f"⚠️ 丢弃无法映射的动作: {obj.get('action')!r}")
    return actions


def parse_new_instruction_output(text: str) -> str:
    """新指令/新任务模式下，取回复中改写后的 instruction 字段。"""
    for fragment in iter_json_objects(text):
        obj = _loads_lenient(fragment)
        if obj and isinstance(obj.get("instruction"), str) and obj["instruction"].strip():
            return obj["instruction"].strip()
    raise PrimitiveParseError("输出中没有 instruction 字段", raw_text=text)


def render_do_action(primitive: PrimitiveAction) -> str:
    """原语的规范第三轮回复文本。"""
    phrase = CANONICAL_PHRASES[primitive.kind]
    if primitive.direction is not None:
        phrase += f" {primitive.direction.value.lower()}"
    return json.dumps({"do_action": {"action": phrase, "target": primitive.target}}, ensure_ascii=False)


def all_primitive_variants(target: str = "") -> List[PrimitiveAction]:
    """10 类原语及旋转/推/拉的 4 个方向变体。"""
    variants = []
    for kind in PrimitiveKind:
        variants.append(PrimitiveAction(kind=kind, target=target))
        if kind in DIRECTIONAL_KINDS:
            variants.extend(PrimitiveAction(kind=kind, direction=d, target=target) for d in Direction)
    return variants
