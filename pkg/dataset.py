# dataset.py
import json
import logging
from pathlib import Path
from typing import Iterable, List, Union

from pydantic import ValidationError

from config import DATASET_HEADER
from data_models import HistoryWindow, Trajectory
from errors import DatasetFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _first_error_field(error: ValidationError) -> str:
    loc = error.errors()[0].get("loc", ())
    return ".".join(str(part) for part in loc) or "<record>"


def load_dataset(path: PathLike) -> List[Trajectory]:
    """
    读取行分隔的轨迹数据集。
    第一行必须是版本头 `pivot-dataset v1`；之后每行一条轨迹 JSON。
    空文件视为空数据集。
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text:
        return []

    lines = text.split("\n")
    if lines[0] != DATASET_HEADER:
        raise DatasetFormatError(f"缺少版本头 '{DATASET_HEADER}'", lineno=1, field="header")

    trajectories: List[Trajectory] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"JSON 解析失败: {e.msg}", lineno=lineno) from e
        try:
            trajectories.append(Trajectory.model_validate(record))
        except ValidationError as e:
            raise DatasetFormatError(e.errors()[0]["msg"], lineno=lineno, field=_first_error_field(e)) from e

    logger.info(f"✅ 从 {path} 读取 {len(trajectories)} 条轨迹")
    return trajectories


def dump_dataset(trajectories: Iterable[Trajectory]) -> str:
    lines = [DATASET_HEADER]
    lines.extend(traj.model_dump_json() for traj in trajectories)
    if len(lines) == 1:
        return ""
    return "\n".join(lines) + "\n"


def save_dataset(trajectories: Iterable[Trajectory], path: PathLike) -> None:
    """写出数据集；空列表写出空文件。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectories = list(trajectories)
    path.write_text(dump_dataset(trajectories), encoding="utf-8")
    logger.info(f"✅ 已写出 {len(trajectories)} 条轨迹到 {path}")


def history_window(trajectory: Trajectory, t: int, h: int) -> HistoryWindow:
    """
    取第 t 步及之前 h 步的观测和状态。
    t < h 时用第 0 帧在左侧补齐，窗口长度始终为 h+1。
    """
    if not (0 <= t < trajectory.length):
        raise IndexError(f"步号 t={t} 超出轨迹范围 [0, {trajectory.length})")
    if h < 0:
        raise ValueError("历史长度 h 不能为负")
    indices = tuple(max(0, i) for i in range(t - h, t + 1))
    steps = [trajectory.steps[i] for i in indices]
    return HistoryWindow(
        h=h,
        indices=indices,
        observations=tuple(s.observation for s in steps),
        states=tuple(s.state for s in steps),
    )
