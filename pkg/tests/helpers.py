# helpers.py
import numpy as np

from data_models import (Action, GripperState, Observation, Pose6, RobotState, Skill, Trajectory,
                         TrajectoryStep)


def make_observation(value: int = 0, size: int = 56, timestamp: int = 0) -> Observation:
    return Observation.from_array(np.full((size, size, 3), value, dtype=np.uint8), timestamp=timestamp)


def make_trajectory(T: int = 5, instruction: str = "pick the milk", level: int = 1,
                    targets=None) -> Trajectory:
    steps = []
    for t in range(T):
        steps.append(TrajectoryStep(
            observation=make_observation(t * 10, timestamp=t),
            state=RobotState(pose=Pose6(x=0.01 * t), gripper=GripperState.OPEN),
            action=Action(delta=Pose6(x=0.01)) if t < T - 1 else None,
            waypoint_target=None if targets is None else targets[t],
        ))
    return Trajectory(instruction=instruction, level=level, task=Skill.PICK_TARGET, steps=steps)
