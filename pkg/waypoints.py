# waypoints.py
"""
路点标注：
  (a) 原语完成帧：第 t 步的原语标签与第 t+1 步不同（最后一步总是完成帧）；
  (b) 机械臂速度趋近零：最近 w 步位移范数的均值 < ε_v；
  (c) 夹爪状态相对上一步发生变化。
相邻（间隔不超过 1 步）的候选帧合并为一个，保留最早的一步。
"""
import logging
from typing import Dict, List, Literal, Set

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import INTERVAL_FRAMES, WAYPOINT_SPEED_EPS, WAYPOINT_WINDOW
from data_models import Trajectory, WaypointCause, WaypointMark
from errors import DatasetFormatError

logger = logging.getLogger(__name__)

TargetMode = Literal["waypoint", "pac", "rsc", "next", "interval", "final"]


class WaypointRuleConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    speed_eps: float = Field(WAYPOINT_SPEED_EPS, gt=0.0)
    window: int = Field(WAYPOINT_WINDOW, ge=1)
    use_completion: bool = True
    use_state_change: bool = True


def rule_config_for_mode(mode: TargetMode, base: WaypointRuleConfig = WaypointRuleConfig()) -> WaypointRuleConfig:
    """pac 只用原语完成帧，rsc 只用机器人状态变化帧，其余模式两者都用。"""
    if mode == "pac":
        return base.model_copy(update={"use_completion": True, "use_state_change": False})
    if mode == "rsc":
        return base.model_copy(update={"use_completion": False, "use_state_change": True})
    return base


def waypoint_candidates(trajectory: Trajectory, config: WaypointRuleConfig) -> Dict[int, Set[WaypointCause]]:
    """合并前的候选帧及其成因。"""
    steps = trajectory.steps
    T = len(steps)
    candidates: Dict[int, Set[WaypointCause]] = {}

    def add(t: int, cause: WaypointCause) -> None:
        candidates.setdefault(t, set()).add(cause)

    if config.use_completion:
        labels = [s.primitive_label for s in steps]
        missing = [i for i, label in enumerate(labels) if label is None]
        if missing:
            raise DatasetFormatError(f"第 {missing[0]} 步缺少原语标签，无法使用完成帧规则", field="primitive_label")
        for t in range(T - 1):
            if labels[t] != labels[t + 1]:
                add(t, WaypointCause.PRIMITIVE_COMPLETION)
        add(T - 1, WaypointCause.PRIMITIVE_COMPLETION)

    if config.use_state_change:
        positions = np.array([s.state.pose.position for s in steps])
        speeds = np.linalg.norm(np.diff(positions, axis=0), axis=1)  # speeds[t-1] = ‖p_t − p_{t−1}‖
        w = config.window
        for t in range(w, T):
            if speeds[t - w:t].mean() < config.speed_eps:
                add(t, WaypointCause.ROBOT_STATE_CHANGE)
        for t in range(1, T):
            if steps[t].state.gripper != steps[t - 1].state.gripper:
                add(t, WaypointCause.ROBOT_STATE_CHANGE)

    return candidates


def _merge_groups(steps_sorted: List[int]) -> List[List[int]]:
    groups: List[List[int]] = []
    for t in steps_sorted:
        if groups and t - groups[-1][-1] <= 1:
            groups[-1].append(t)
        else:
            groups.append([t])
    return groups


def extract_waypoints(trajectory: Trajectory, config: WaypointRuleConfig = WaypointRuleConfig()) -> List[WaypointMark]:
    """按三条规则找出路点，合并相邻候选，最后一步总是路点。"""
    T = trajectory.length
    candidates = waypoint_candidates(trajectory, config)
    terminal = T - 1
    inner = sorted(t for t in candidates if t != terminal)

    marks: List[WaypointMark] = []
    for group in _merge_groups(inner):
        causes = set().union(*(candidates[t] for t in group))
        marks.append(_mark(trajectory, group[0], causes))
    marks.append(_mark(trajectory, terminal, candidates.get(terminal, {WaypointCause.PRIMITIVE_COMPLETION})))
    return marks


def _mark(trajectory: Trajectory, step: int, causes: Set[WaypointCause]) -> WaypointMark:
    cause = (WaypointCause.PRIMITIVE_COMPLETION if WaypointCause.PRIMITIVE_COMPLETION in causes
             else WaypointCause.ROBOT_STATE_CHANGE)
    return WaypointMark(step=step, primitive=trajectory.steps[step].primitive_label, cause=cause)


def waypoint_target(t: int, T: int, marks: List[WaypointMark], mode: TargetMode = "waypoint") -> int:
    if mode == "next":
        return min(t + 1, T - 1)
    if mode == "interval":
        return min(t + INTERVAL_FRAMES, T - 1)
    if mode == "final":
        return T - 1
    for mark in marks:
        if mark.step > t:
            return mark.step
    return T - 1


def assign_waypoint_targets(trajectory: Trajectory, marks: List[WaypointMark],
                            mode: TargetMode = "waypoint") -> Trajectory:
    """为每一步填写监督用的路点目标 M_t，并把路点列表写回轨迹。"""
    T = len(trajectory.steps)
    if T == 0:
        raise ValueError("轨迹为空")
    steps = [
        step.model_copy(update={"waypoint_target": waypoint_target(t, T, marks, mode)})
        for t, step in enumerate(trajectory.steps)
    ]
    return trajectory.model_copy(update={"steps": steps, "waypoints": list(marks)})


def annotate_trajectory(trajectory: Trajectory, mode: TargetMode = "waypoint",
                        base: WaypointRuleConfig = WaypointRuleConfig()) -> Trajectory:
    marks = extract_waypoints(trajectory, rule_config_for_mode(mode, base))
    return assign_waypoint_targets(trajectory, marks, mode)


def annotate_dataset(trajectories: List[Trajectory], mode: TargetMode = "waypoint",
                     base: WaypointRuleConfig = WaypointRuleConfig()) -> List[Trajectory]:
    annotated = [annotate_trajectory(traj, mode, base) for traj in trajectories]
    total = sum(len(t.waypoints) for t in annotated)
    logger.info(f"✅ 标注完成：{len(annotated)} 条轨迹，共 {total} 个路点（模式 {mode}）")
    return annotated
