# test_waypoints.py
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from config import INTERVAL_FRAMES
from data_models import (Action, GripperState, Observation, Pose6, PrimitiveAction, PrimitiveKind, RobotState, Skill,
                         Trajectory, TrajectoryStep, WaypointCause, WaypointMark)
from errors import DatasetFormatError
from waypoints import (WaypointRuleConfig, annotate_trajectory, extract_waypoints, rule_config_for_mode,
                       waypoint_target)

_TINY = Observation.from_array(np.zeros((2, 2, 3), dtype=np.uint8))
_KINDS = [PrimitiveKind.CLOSE_TO, PrimitiveKind.GRASP, PrimitiveKind.MOVE_UP]


def _trajectory(xs, labels, grippers):
    steps = []
    for t, (x, label, closed) in enumerate(zip(xs, labels, grippers)):
        steps.append(TrajectoryStep(
            observation=_TINY,
            state=RobotState(pose=Pose6(x=x), gripper=GripperState.CLOSED if closed else GripperState.OPEN),
            action=Action() if t < len(xs) - 1 else None,
            primitive_label=PrimitiveAction(kind=_KINDS[label]),
        ))
    return Trajectory(instruction="pick the milk", level=1, task=Skill.PICK_TARGET, steps=steps)


def _oracle(xs, labels, grippers, eps, w):
    T = len(xs)
    flagged = []
    for t in range(T):
        completion = t == T - 1 or labels[t] != labels[t + 1]
        slow = t >= w and np.mean([abs(xs[i + 1] - xs[i]) for i in range(t - w, t)]) < eps
        gripper = t >= 1 and grippers[t] != grippers[t - 1]
        if completion or slow or gripper:
            flagged.append(t)
    kept = []
    previous = None
    for t in flagged:
        if t == T - 1:
            continue
        if previous is None or t - previous > 1:
            kept.append(t)
        previous = t
    return kept + [T - 1]


@st.composite
def _synthetic(draw):
    T = draw(st.integers(2, 30))
    moves = draw(st.lists(st.sampled_from([0.0, 0.0, 0.03, 0.05]), min_size=T - 1, max_size=T - 1))
    xs = np.concatenate([[0.0], np.cumsum(moves)]).tolist()
    labels = sorted(draw(st.lists(st.integers(0, 2), min_size=T, max_size=T)))
    grippers = draw(st.lists(st.booleans(), min_size=T, max_size=T))
    return xs, labels, grippers


@settings(max_examples=1000, deadline=None)
@given(_synthetic())
def test_extraction_matches_brute_force(data):
    xs, labels, grippers = data
    config = WaypointRuleConfig(speed_eps=0.01, window=2)
    marks = extract_waypoints(_trajectory(xs, labels, grippers), config)
    assert [m.step for m in marks] == _oracle(xs, labels, grippers, 0.01, 2)


@settings(max_examples=100, deadline=None)
@given(_synthetic(), st.sampled_from(["waypoint", "pac", "rsc", "next", "interval", "final"]))
def test_targets_lie_ahead_and_inside_trajectory(data, mode):
    trajectory = annotate_trajectory(_trajectory(*data), mode, WaypointRuleConfig(speed_eps=0.01, window=2))
    T = trajectory.length
    marks = trajectory.waypoints
    assert marks[-1].step == T - 1
    for t, step in enumerate(trajectory.steps):
        assert t <= step.waypoint_target < T
        if t < T - 1:
            assert step.waypoint_target > t


def test_pick_example_has_completion_marks():
    xs = [0.0, 0.05, 0.1, 0.1, 0.1, 0.15, 0.2]
    labels = [0, 0, 0, 1, 1, 2, 2]
    grippers = [False, False, False, False, True, True, True]
    marks = extract_waypoints(_trajectory(xs, labels, grippers), WaypointRuleConfig(speed_eps=0.01, window=1))
    assert [m.step for m in marks] == [2, 6]
    assert marks[0].cause == WaypointCause.PRIMITIVE_COMPLETION
    assert marks[0].primitive.kind == PrimitiveKind.CLOSE_TO


def test_state_only_rules_ignore_labels():
    xs = [0.0, 0.05, 0.1, 0.15, 0.2]
    grippers = [False, False, True, True, True]
    marks = extract_waypoints(_trajectory(xs, [0, 1, 2, 0, 1], grippers), rule_config_for_mode("rsc"))
    assert [m.step for m in marks] == [2, 4]
    assert marks[0].cause == WaypointCause.ROBOT_STATE_CHANGE


def test_missing_labels_rejected_for_completion_rule():
    steps = [TrajectoryStep(observation=_TINY, state=RobotState(), action=Action()),
             TrajectoryStep(observation=_TINY, state=RobotState())]
    trajectory = Trajectory(instruction="pick", level=1, task=Skill.PICK_TARGET, steps=steps)
    with pytest.raises(DatasetFormatError):
        extract_waypoints(trajectory)
    assert [m.step for m in extract_waypoints(trajectory, rule_config_for_mode("rsc"))] == [1]


@pytest.mark.parametrize("mode, t, expected", [
    ("next", 3, 4),
    ("next", 9, 9),
    ("interval", 0, INTERVAL_FRAMES),
    ("interval", 8, 9),
    ("final", 0, 9),
    ("waypoint", 0, 4),
    ("waypoint", 4, 7),
    ("waypoint", 8, 9),
])
def test_target_modes(mode, t, expected):
    marks = [WaypointMark(step=s, cause=WaypointCause.PRIMITIVE_COMPLETION) for s in (4, 7, 9)]
    assert waypoint_target(t, 10, marks, mode) == min(expected, 9)
