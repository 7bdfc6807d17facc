# sim.py
"""
确定性的桌面运动学仿真器：8 个技能、成功判定、合成渲染、脚本专家与 4 级指令模板。
没有动力学和摩擦：夹爪闭合时吸附最近的物体，张开时物体落回桌面。
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import (ACTION_BOUND, CARRY_HEIGHT, DOOR_CLOSED_DEG, DOOR_HANDLE_RADIUS, DOOR_HINGE, DOOR_MAX_DEG,
                    DOOR_OPEN_DEG, EXPERT_NOISE, EXPERT_STEP_CAP, GRASP_RADIUS, GRIPPER_RADIUS, HOME_POSITION,
                    HOVER_HEIGHT, IMAGE_SIZE, LIFT_SUCCESS, MAX_EPISODE_STEPS, MIN_OBJECT_SPACING, NEAR_SUCCESS,
                    PUSH_SUCCESS, TABLE_HEIGHT, WORKSPACE)
from data_models import (Action, Direction, EpisodeResult, GripperState, Observation, Pose6, PrimitiveAction,
                         PrimitiveKind, RobotState, SceneVariant, SimObject, Skill, TaskSpec, Trajectory,
                         TrajectoryStep, WorldState)
from errors import ExpertError, InstructionError, PlacementError
from object_catalog import CatalogEntry, load_catalog
from primitives import (DIRECTION_VECTORS, DOOR_LABEL, PrimitiveFsm, carry_goal, coerce_skill,
                        parse_primitive_rule, prepush_pose, push_displacement)
from waypoints import TargetMode, annotate_dataset

logger = logging.getLogger(__name__)

SKILLS: List[Skill] = list(Skill)
DOOR_SKILLS = (Skill.OPEN_DOOR, Skill.CLOSE_DOOR)

# 物体摆放区域（x, y）以及离门铰链的最小距离
PLACEMENT_REGION = ((0.15, 0.85), (0.30, 0.70))
DOOR_CLEARANCE = 0.40
PLACEMENT_TRIES = 200
PLACEMENT_RESTARTS = 50

TOPPLE_HEIGHT = 0.05  # 松手时物体底部高于此值会倒下
APPROACH_TOLERANCE = 0.005
DOOR_SWING_STEP_DEG = 25.0
PUSH_OVERSHOOT = 0.02
SPATIAL_MARGIN = 0.03

_BACKGROUNDS: Dict[SceneVariant, Tuple[int, int, int]] = {
    SceneVariant.SEEN: (196, 170, 130),
    SceneVariant.UNSEEN_BACKGROUND: (70, 95, 120),
    SceneVariant.CHANGING_LIGHT: (196, 170, 130),
    SceneVariant.DISTRACTORS: (196, 170, 130),
}
_FALLEN_SHADE = 0.55
_OPEN_MARKER = (255, 255, 255)
_CLOSED_MARKER = (30, 30, 30)


def _as_skill(task: Union[TaskSpec, Skill, str]) -> Skill:
    return task.skill if isinstance(task, TaskSpec) else coerce_skill(task)


# --- reset ---

def _distractor_count(task: TaskSpec) -> int:
    if task.distractors is not None:
        return task.distractors
    count = 0 if task.level == 1 else 2
    if task.variant == SceneVariant.DISTRACTORS:
        count += 3
    return count


def _sample_positions(rng: np.random.Generator, radii: Sequence[float], avoid_door: bool) -> List[np.ndarray]:
    (x_lo, x_hi), (y_lo, y_hi) = PLACEMENT_REGION
    hinge = np.array(DOOR_HINGE)
    for _ in range(PLACEMENT_RESTARTS):
        placed: List[np.ndarray] = []
        for _radius in radii:
            for _ in range(PLACEMENT_TRIES):
                xy = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
                if avoid_door and np.linalg.norm(xy - hinge) < DOOR_CLEARANCE:
                    continue
                if all(np.linalg.norm(xy - other) >= MIN_OBJECT_SPACING for other in placed):
                    placed.append(xy)
                    break
            else:
                break
        if len(placed) == len(radii):
            return placed
    raise PlacementError(f"{len(radii)} 个物体在 {PLACEMENT_RESTARTS} 次重试后仍无法满足最小间距 {MIN_OBJECT_SPACING} m")


def reset(task: TaskSpec, seed: int) -> WorldState:
    """按 (技能, 等级, 种子) 确定性地摆放物体。"""
    skill = task.skill
    rng = np.random.default_rng([seed, SKILLS.index(skill), task.level])
    catalog = load_catalog()

    n_targets = 0 if skill in DOOR_SKILLS else (2 if skill == Skill.MOVE_A_NEAR_B else 1)
    n_objects = n_targets + _distractor_count(task)
    if n_objects > len(catalog.objects):
        raise PlacementError(f"场景需要 {n_objects} 个物体，属性表只有 {len(catalog.objects)} 个")
    picks = rng.choice(len(catalog.objects), size=n_objects, replace=False)
    entries = [catalog.objects[int(i)] for i in picks]
    positions = _sample_positions(rng, [e.radius for e in entries], avoid_door=skill in DOOR_SKILLS)

    objects = []
    for entry, xy in zip(entries, positions):
        position = (float(xy[0]), float(xy[1]), TABLE_HEIGHT + entry.radius)
        objects.append(SimObject(label=entry.label, color=entry.color, shape=entry.shape,
                                 position=position, start_position=position, radius=entry.radius))

    targets = (DOOR_LABEL,) if skill in DOOR_SKILLS else tuple(e.label for e in entries[:n_targets])
    direction = None
    if skill in (Skill.PUSH_TARGET_FRONT, Skill.KNOCK_TARGET_OVER):
        direction = Direction.FRONT
    elif skill == Skill.PUSH_TARGET_ASIDE:
        direction = Direction.LEFT if objects[0].position[0] > 0.5 else Direction.RIGHT

    gripper = Pose6(x=HOME_POSITION[0], y=HOME_POSITION[1], z=HOME_POSITION[2])
    gripper_state, held = GripperState.OPEN, None
    if skill == Skill.PLACE_TARGET:
        # 放置任务从“已经拿在手里”开始
        target = objects[0]
        lifted = (target.position[0], target.position[1], TABLE_HEIGHT + target.radius + CARRY_HEIGHT)
        objects[0] = target.model_copy(update={"position": lifted, "start_position": lifted})
        gripper = Pose6(x=lifted[0], y=lifted[1], z=lifted[2])
        gripper_state, held = GripperState.CLOSED, target.label

    door_angle = None
    if skill == Skill.OPEN_DOOR:
        door_angle = 0.0
    elif skill == Skill.CLOSE_DOOR:
        door_angle = 90.0

    return WorldState(skill=skill, targets=targets, direction=direction, objects=tuple(objects), gripper=gripper,
                      gripper_state=gripper_state, held=held, door_angle=door_angle, table_height=TABLE_HEIGHT,
                      variant=task.variant)


# --- step ---

def _clip_to_workspace(pose: np.ndarray, floor: float) -> np.ndarray:
    (x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi) = WORKSPACE
    pose = pose.copy()
    pose[0] = np.clip(pose[0], x_lo, x_hi)
    pose[1] = np.clip(pose[1], y_lo, y_hi)
    pose[2] = np.clip(pose[2], max(z_lo, floor), z_hi)
    return pose


def _door_angle_at(xyz: np.ndarray) -> float:
    hx, hy = DOOR_HINGE
    angle = math.degrees(math.atan2(hy - xyz[1], xyz[0] - hx))
    return float(np.clip(angle, 0.0, DOOR_MAX_DEG))


def step(world: WorldState, action: Action) -> WorldState:
    """
    执行一步动作：位移按分量裁剪到 ±ACTION_BOUND，位置裁剪到工作空间。
    夹爪由开变闭时吸附抓取半径内最近的物体（或门把手），由闭变开时放下物体。
    夹爪横向进入未被抓住物体的接触圆时，把物体沿径向推开。
    """
    delta = np.clip(action.delta.as_array(), -ACTION_BOUND, ACTION_BOUND)
    objects = list(world.objects)
    index = {obj.label: i for i, obj in enumerate(objects)}
    held = world.held
    floor = world.table_height + (objects[index[held]].radius if held else 0.0)
    pose = _clip_to_workspace(world.gripper.as_array() + delta, floor)
    gripper = Pose6.from_array(pose)
    xyz = pose[:3]

    gripper_state = world.gripper_state
    door_grasped = world.door_grasped
    door_angle = world.door_angle

    if action.gripper == GripperState.OPEN and gripper_state == GripperState.CLOSED:
        if held is not None:
            obj = objects[index[held]]
            toppled = obj.bottom - world.table_height > TOPPLE_HEIGHT
            landed = (obj.position[0], obj.position[1], world.table_height + obj.radius)
            objects[index[held]] = obj.model_copy(update={"position": landed, "upright": obj.upright and not toppled})
            held = None
        door_grasped = False
        gripper_state = GripperState.OPEN

    if held is not None:
        objects[index[held]] = objects[index[held]].model_copy(update={"position": tuple(float(v) for v in xyz)})

    old_xy, new_xy = world.gripper_xyz[:2], xyz[:2]
    for i, obj in enumerate(objects):
        if obj.label == held:
            continue
        contact = obj.radius + GRIPPER_RADIUS
        center = np.array(obj.position)
        if abs(xyz[2] - center[2]) >= contact:
            continue
        old_d = np.linalg.norm(old_xy - center[:2])
        new_d = np.linalg.norm(new_xy - center[:2])
        if old_d >= contact - 1e-9 and new_d < contact:
            if new_d > 1e-12:
                u = (center[:2] - new_xy) / new_d
            else:
                u = (new_xy - old_xy) / np.linalg.norm(new_xy - old_xy)
            pushed = new_xy + u * contact
            knocked = xyz[2] > center[2] + 0.5 * obj.radius
            objects[i] = obj.model_copy(update={
                "position": (float(pushed[0]), float(pushed[1]), float(center[2])),
                "upright": obj.upright and not knocked,
            })

    if action.gripper == GripperState.CLOSED and gripper_state == GripperState.OPEN:
        gripper_state = GripperState.CLOSED
        reachable = [
            (float(np.linalg.norm(np.array(obj.position) - xyz)), i) for i, obj in enumerate(objects)
            if np.linalg.norm(np.array(obj.position) - xyz) <= GRASP_RADIUS + obj.radius
        ]
        if reachable:
            _, i = min(reachable)
            held = objects[i].label
            objects[i] = objects[i].model_copy(update={"position": tuple(float(v) for v in xyz)})
        elif door_angle is not None and np.linalg.norm(world.door_handle() - xyz) <= GRASP_RADIUS + DOOR_HANDLE_RADIUS:
            door_grasped = True

    if door_grasped:
        door_angle = _door_angle_at(xyz)

    return world.model_copy(update={
        "objects": tuple(objects),
        "gripper": gripper,
        "gripper_state": gripper_state,
        "held": held,
        "door_angle": door_angle,
        "door_grasped": door_grasped,
        "step_count": world.step_count + 1,
    })


# --- 成功判定 ---

def success_check(task: Union[TaskSpec, Skill, str], world: WorldState) -> bool:
    skill = _as_skill(task)
    if skill == Skill.OPEN_DOOR:
        return world.door_angle is not None and world.door_angle > DOOR_OPEN_DEG
    if skill == Skill.CLOSE_DOOR:
        return world.door_angle is not None and world.door_angle < DOOR_CLOSED_DEG

    target = world.object(world.targets[0])
    if skill == Skill.PICK_TARGET:
        return target.bottom - world.table_height >= LIFT_SUCCESS - 1e-9
    if skill == Skill.PLACE_TARGET:
        return world.held != target.label and target.upright and target.bottom - world.table_height <= 1e-6
    if skill == Skill.MOVE_A_NEAR_B:
        other = world.object(world.targets[1])
        moved = np.linalg.norm(target.xyz - np.array(target.start_position)) >= 0.01
        return bool(moved and np.linalg.norm(target.xyz - other.xyz) < NEAR_SUCCESS)
    if skill == Skill.PUSH_TARGET_FRONT:
        return push_displacement(world, target.label, Direction.FRONT) >= PUSH_SUCCESS
    if skill == Skill.PUSH_TARGET_ASIDE:
        return abs(target.position[0] - target.start_position[0]) >= PUSH_SUCCESS
    return not target.upright


# --- 渲染 ---

def scene_brightness(world: WorldState) -> float:
    if world.variant == SceneVariant.CHANGING_LIGHT:
        return 1.0 + 0.3 * math.sin(2.0 * math.pi * world.step_count / 50.0)
    return 1.0


def _to_pixel(x: float, y: float, size: int) -> Tuple[float, float]:
    return x * size, (1.0 - y) * size


def _draw_disc(image: np.ndarray, cx: float, cy: float, radius: float, color) -> None:
    size = image.shape[0]
    rows, cols = np.ogrid[:size, :size]
    mask = (cols + 0.5 - cx) ** 2 + (rows + 0.5 - cy) ** 2 <= radius ** 2
    image[mask] = color


def _draw_segment(image: np.ndarray, start: Tuple[float, float], end: Tuple[float, float], color) -> None:
    size = image.shape[0]
    for s in np.linspace(0.0, 1.0, 4 * size):
        col = int(start[0] + s * (end[0] - start[0]))
        row = int(start[1] + s * (end[1] - start[1]))
        if 0 <= row < size and 0 <= col < size:
            image[row, col] = color


def _draw_gripper(image: np.ndarray, world: WorldState) -> None:
    size = image.shape[0]
    gx, gy, gz = world.gripper_xyz
    col, row = (int(v) for v in _to_pixel(gx, gy, size))
    half = 1 + int(round(8 * gz))
    r0, r1 = max(0, row - half), min(size, row + half + 1)
    c0, c1 = max(0, col - half), min(size, col + half + 1)
    if world.gripper_state == GripperState.CLOSED:
        image[r0:r1, c0:c1] = _CLOSED_MARKER
    else:
        if 0 <= row < size:
            image[row, c0:c1] = _OPEN_MARKER
        if 0 <= col < size:
            image[r0:r1, col] = _OPEN_MARKER


def render(world: WorldState, brightness: Optional[float] = None, size: int = IMAGE_SIZE) -> Observation:
    """
    俯视合成图：桌面背景、门（铰链到把手的线段）、按高度从低到高画的彩色圆盘、夹爪标记。
    圆盘半径随物体离桌面的高度放大；倒下的物体颜色变暗。
    """
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = _BACKGROUNDS[world.variant]
    if world.variant == SceneVariant.UNSEEN_BACKGROUND:
        image[(np.arange(size) // 4) % 2 == 1] *= 0.85

    catalog = load_catalog()
    if world.door_angle is not None:
        handle = world.door_handle()
        _draw_segment(image, _to_pixel(*DOOR_HINGE, size), _to_pixel(handle[0], handle[1], size),
                      catalog.door.rgb)

    for obj in sorted(world.objects, key=lambda o: o.position[2]):
        color = np.array(catalog.entry(obj.label).rgb, dtype=np.float64)
        if not obj.upright:
            color = color * _FALLEN_SHADE
        height = max(0.0, obj.bottom - world.table_height)
        cx, cy = _to_pixel(obj.position[0], obj.position[1], size)
        _draw_disc(image, cx, cy, obj.radius * size * 1.5 * (1.0 + 2.0 * height), np.round(color))

    _draw_gripper(image, world)

    scale = scene_brightness(world) if brightness is None else brightness
    pixels = np.clip(np.rint(image * scale), 0, 255).astype(np.uint8)
    return Observation.from_array(pixels, timestamp=world.step_count)


# --- 脚本专家 ---

def _approach(world: WorldState, goal: np.ndarray) -> np.ndarray:
    """先在悬停高度水平对准，再下降。"""
    gripper = world.gripper_xyz
    if np.linalg.norm(goal[:2] - gripper[:2]) > APPROACH_TOLERANCE:
        return np.array([goal[0], goal[1], max(HOVER_HEIGHT, goal[2])])
    return goal


def expert_subgoal(world: WorldState, primitive: PrimitiveAction) -> Tuple[np.ndarray, GripperState]:
    """当前原语的几何子目标和夹爪指令。"""
    K = PrimitiveKind
    gripper = world.gripper_xyz
    holding = GripperState.CLOSED if (world.held is not None or world.door_grasped) else world.gripper_state
    kind, label = primitive.kind, primitive.target

    if kind == K.GRASP:
        return gripper, GripperState.CLOSED
    if kind == K.RELEASE:
        return gripper, GripperState.OPEN

    if label == DOOR_LABEL:
        if kind == K.CLOSE_TO:
            return _approach(world, world.door_handle()), holding
        if kind == K.OPEN:
            return world.door_handle(min(world.door_angle + DOOR_SWING_STEP_DEG, 95.0)), holding
        if kind == K.CLOSE:
            return world.door_handle(max(world.door_angle - DOOR_SWING_STEP_DEG, -5.0)), holding

    if kind == K.CLOSE_TO:
        if world.held is not None and world.held != label:
            xy = carry_goal(world, world.held, label)
            return np.array([xy[0], xy[1], gripper[2]]), holding
        if world.skill in (Skill.PUSH_TARGET_FRONT, Skill.PUSH_TARGET_ASIDE):
            return _approach(world, prepush_pose(world, label, world.direction or Direction.FRONT)), holding
        if world.skill == Skill.KNOCK_TARGET_OVER:
            return _approach(world, prepush_pose(world, label, Direction.FRONT, high=True)), holding
        return _approach(world, world.object(label).xyz), holding

    obj = world.object(label)
    if kind == K.MOVE_UP:
        return np.array([gripper[0], gripper[1], world.table_height + obj.radius + CARRY_HEIGHT]), holding
    if kind == K.MOVE_DOWN:
        return np.array([gripper[0], gripper[1], world.table_height + obj.radius + 0.005]), holding
    if kind == K.PUSH:
        u = DIRECTION_VECTORS[primitive.direction or Direction.FRONT]
        reach = PUSH_SUCCESS + PUSH_OVERSHOOT - (obj.radius + GRIPPER_RADIUS)
        xy = np.array(obj.start_position[:2]) + u * reach
        return np.array([xy[0], xy[1], gripper[2]]), holding
    if kind == K.PULL:
        u = DIRECTION_VECTORS[primitive.direction or Direction.BACK]
        xy = gripper[:2] - u * EXPERT_STEP_CAP
        return np.array([xy[0], xy[1], gripper[2]]), holding
    # Rotate 和 Open/Close 非门目标：原地不动
    return gripper, holding


def expert_policy(task: Union[TaskSpec, Skill, str], world: WorldState, primitive: Optional[PrimitiveAction] = None,
                  rng: Optional[np.random.Generator] = None) -> Action:
    """
    朝当前原语子目标的比例控制（增益 1，每分量限幅 EXPERT_STEP_CAP）。
    给定 rng 时在 6 个连续维度上叠加 N(0, EXPERT_NOISE) 噪声。
    """
    skill = _as_skill(task)
    try:
        if primitive is None:
            primitive = parse_primitive_rule(skill, world)
        goal, gripper_command = expert_subgoal(world, primitive)
    except (KeyError, IndexError) as e:
        raise ExpertError(f"专家无法在当前场景执行技能 {skill.value}: {e}") from e

    delta = np.zeros(6)
    delta[:3] = np.clip(goal - world.gripper_xyz, -EXPERT_STEP_CAP, EXPERT_STEP_CAP)
    if rng is not None:
        delta += rng.normal(0.0, EXPERT_NOISE, size=6)
    delta = np.clip(delta, -ACTION_BOUND, ACTION_BOUND)
    return Action(delta=Pose6.from_array(delta), gripper=gripper_command)


def rollout_expert(task: TaskSpec, world: WorldState, instruction: str, seed: int,
                   max_steps: int = MAX_EPISODE_STEPS) -> EpisodeResult:
    """
    用专家跑完一个回合，记录每一步的观测、状态、动作和状态机原语标签。
    成功且原语序列走完时停止；最后一步只有观测没有动作。
    """
    rng = np.random.default_rng([seed, 7])
    fsm = PrimitiveFsm(task.skill, world)
    steps: List[TrajectoryStep] = []

    while True:
        primitive = fsm.update(world)
        if success_check(task, world) and fsm.finished(world):
            break
        if len(steps) >= max_steps:
            raise ExpertError(f"专家在 {max_steps} 步内没有完成 {task.skill.value}（种子 {seed}）")
        action = expert_policy(task, world, primitive, rng)
        steps.append(TrajectoryStep(observation=render(world), state=world.robot_state,
                                    action=action, primitive_label=primitive))
        world = step(world, action)

    if not steps:
        raise ExpertError(f"{task.skill.value} 的初始状态已经满足成功条件（种子 {seed}）")
    steps.append(TrajectoryStep(observation=render(world), state=world.robot_state, primitive_label=fsm.current))
    trajectory = Trajectory(instruction=instruction, level=task.level, task=task.skill, steps=steps, seed=seed)
    return EpisodeResult(success=True, steps=len(steps) - 1, final_state=world, trajectory=trajectory)


# --- 指令生成 ---

_LEVEL1 = {
    Skill.PICK_TARGET: "pick {a}",
    Skill.PLACE_TARGET: "place {a}",
    Skill.MOVE_A_NEAR_B: "move {a} near {b}",
    Skill.OPEN_DOOR: "open {a}",
    Skill.CLOSE_DOOR: "close {a}",
    Skill.PUSH_TARGET_FRONT: "push {a} front",
    Skill.PUSH_TARGET_ASIDE: "push {a} aside",
    Skill.KNOCK_TARGET_OVER: "knock {a} over",
}

_PARAPHRASES = {
    Skill.PICK_TARGET: ["could you please go grab {a} for me", "I need you to pick up {a}",
                        "lift {a} off the table", "please get {a} into your hand"],
    Skill.PLACE_TARGET: ["please put {a} down on the table", "set {a} back down gently",
                         "could you lay {a} on the table"],
    Skill.MOVE_A_NEAR_B: ["could you bring {a} over next to {b}", "please carry {a} close to {b}",
                          "put {a} beside {b}"],
    Skill.OPEN_DOOR: ["could you please swing open {a}", "I would like {a} opened", "pull {a} open for me"],
    Skill.CLOSE_DOOR: ["could you please shut {a}", "I would like {a} closed", "swing {a} shut for me"],
    Skill.PUSH_TARGET_FRONT: ["slide {a} forward a bit", "could you nudge {a} away from you",
                              "give {a} a push to the front"],
    Skill.PUSH_TARGET_ASIDE: ["slide {a} out of the way", "could you nudge {a} to the side",
                              "shove {a} aside for me"],
    Skill.KNOCK_TARGET_OVER: ["tip {a} over", "could you topple {a}", "make {a} fall over"],
}

_SPATIAL_PHRASES = {
    "leftmost": "the object on the far left",
    "rightmost": "the object on the far right",
    "frontmost": "the object furthest to the front",
    "backmost": "the object furthest to the back",
}


def _entry(label: str) -> CatalogEntry:
    try:
        return load_catalog().entry(label)
    except KeyError as e:
        raise InstructionError(f"物体 {label!r} 没有可用的属性描述") from e


def spatial_relations(world: WorldState, label: str, margin: float = SPATIAL_MARGIN) -> List[str]:
    """目标在场景物体中以至少 margin 的优势占据的极值方位。"""
    target = world.object(label)
    others = [o for o in world.objects if o.label != label]
    x, y = target.position[0], target.position[1]
    checks = {
        "leftmost": all(x + margin <= o.position[0] for o in others),
        "rightmost": all(x - margin >= o.position[0] for o in others),
        "frontmost": all(y - margin >= o.position[1] for o in others),
        "backmost": all(y + margin <= o.position[1] for o in others),
    }
    return [name for name, holds in checks.items() if holds]


def reference_phrase(world: WorldState, label: str, rng: np.random.Generator) -> Tuple[str, str, Optional[str]]:
    """4 级指代：(短语, 类型 spatial|appearance, 方位关系)。"""
    entry = _entry(label)
    relations = spatial_relations(world, label) if label != DOOR_LABEL else []
    if relations and rng.random() < 0.5:
        relation = relations[int(rng.integers(len(relations)))]
        return _SPATIAL_PHRASES[relation], "spatial", relation
    return f"the {entry.appearance}", "appearance", None


def _noun(world: WorldState, label: str, level: int, rng: np.random.Generator) -> str:
    if level <= 2:
        return f"the {label}"
    if level == 3:
        return _entry(label).function
    return reference_phrase(world, label, rng)[0]


def gen_instruction(task: Union[TaskSpec, Skill, str], world: WorldState, level: int, seed: int) -> str:
    """
    1 级：动词+名词；2 级：点名的自然说法；3 级：功能描述（不出现物体名）；
    4 级：方位或外观指代（不出现物体名）。同一种子结果相同。
    """
    if level not in (1, 2, 3, 4):
        raise InstructionError(f"指令等级只能是 1..4，当前为 {level}")
    skill = _as_skill(task)
    rng = np.random.default_rng([seed, level, 11])
    labels = list(world.targets)
    a = _noun(world, labels[0], level, rng)
    b = _noun(world, labels[1], level, rng) if len(labels) > 1 else ""

    if level == 1:
        text = _LEVEL1[skill].format(a=a, b=b)
    else:
        options = _PARAPHRASES[skill]
        text = options[int(rng.integers(len(options)))].format(a=a, b=b)

    if level >= 3:
        leaked = [label for label in labels if label.lower() in text.lower()]
        if leaked:
            raise InstructionError(f"{level} 级指令泄露了物体名 {leaked}: {text!r}")
    return text


# --- 数据集生成 ---

def episode_seed(seed: int, episode: int, split: str) -> int:
    """训练集用偶数偏移，测试集用奇数偏移，两者的摆放种子不相交。"""
    if split not in ("train", "test"):
        raise ValueError(f"未知数据划分: {split}")
    return seed * 100000 + 2 * episode + (0 if split == "train" else 1)


def generate_dataset(tasks: Sequence[Union[Skill, str]], n_per_task: int, seed: int,
                     levels: Sequence[int] = (1,), split: str = "train",
                     variant: SceneVariant = SceneVariant.SEEN, distractors: Optional[int] = None,
                     mode: TargetMode = "waypoint") -> List[Trajectory]:
    """专家演示 + 原语标签 + 路点标注。等级按回合轮换。"""
    logger.info(f"🚀 生成 {split} 数据：{len(tasks)} 个技能 × {n_per_task} 条演示")
    trajectories = []
    for task_index, task in enumerate(tasks):
        skill = coerce_skill(task)
        for j in range(n_per_task):
            level = levels[j % len(levels)]
            spec = TaskSpec(skill=skill, level=level, distractors=distractors, variant=variant)
            ep_seed = episode_seed(seed, task_index * n_per_task + j, split)
            world = reset(spec, ep_seed)
            instruction = gen_instruction(spec, world, level, ep_seed)
            result = rollout_expert(spec, world, instruction, ep_seed)
            trajectories.append(result.trajectory)
    return annotate_dataset(trajectories, mode)


class SimEnvironment:
    """执行器与评估使用的环境：持有当前世界状态，统计重抓次数。"""

    def __init__(self, task: TaskSpec, seed: int, max_steps: int = MAX_EPISODE_STEPS,
                 instruction: Optional[str] = None):
        self.task = task
        self.seed = seed
        self.max_steps = max_steps
        self.world = reset(task, seed)
        self.instruction = instruction or gen_instruction(task, self.world, task.level, seed)
        self.success = success_check(task, self.world)
        self.grasp_events = 0

    @property
    def done(self) -> bool:
        return self.success or self.world.step_count >= self.max_steps

    @property
    def robot_state(self) -> RobotState:
        return self.world.robot_state

    @property
    def regrasp_attempts(self) -> int:
        return max(0, self.grasp_events - 1)

    def observe(self) -> Observation:
        return render(self.world)

    def apply(self, action: Action) -> WorldState:
        if self.done:
            return self.world
        if action.gripper == GripperState.CLOSED and self.world.gripper_state == GripperState.OPEN:
            self.grasp_events += 1
        self.world = step(self.world, action)
        self.success = success_check(self.task, self.world)
        return self.world

    def result(self) -> EpisodeResult:
        return EpisodeResult(success=self.success, steps=self.world.step_count, final_state=self.world,
                             regrasp_attempts=self.regrasp_attempts)
