# test_sim.py
import itertools

import numpy as np
import pytest

from config import MIN_OBJECT_SPACING
from data_models import Action, GripperState, Pose6, PrimitiveKind, SceneVariant, Skill, TaskSpec
from errors import InstructionError
from primitives import PrimitiveFsm
from sim import (SimEnvironment, episode_seed, gen_instruction, generate_dataset, render, reset, rollout_expert,
                 spatial_relations, step, success_check)


def _pairwise_min(world):
    xy = [np.array(o.position[:2]) for o in world.objects]
    return min((np.linalg.norm(a - b) for a, b in itertools.combinations(xy, 2)), default=np.inf)


def test_resets_respect_minimum_spacing():
    for seed in range(1000):
        world = reset(TaskSpec(skill=Skill.MOVE_A_NEAR_B, level=2, variant=SceneVariant.DISTRACTORS), seed)
        assert _pairwise_min(world) >= MIN_OBJECT_SPACING


def test_reset_is_deterministic():
    spec = TaskSpec(skill=Skill.PICK_TARGET, level=2)
    assert reset(spec, 5) == reset(spec, 5)
    assert reset(spec, 5) != reset(spec, 6)


def test_half_brightness_halves_pixels():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET), 0)
    full = render(world, brightness=1.0).array.astype(float)
    half = render(world, brightness=0.5).array.astype(float)
    assert np.all(np.abs(half - full / 2) <= 0.5)


def test_render_reflects_step_count_and_size():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET), 0)
    moved = step(world, Action(delta=Pose6(x=0.01)))
    assert moved.step_count == 1
    obs = render(moved)
    assert obs.timestamp == 1
    assert obs.array.shape == (56, 56, 3)


def test_pick_fsm_order_matches_expert_labels():
    spec = TaskSpec(skill=Skill.PICK_TARGET)
    world = reset(spec, 3)
    trajectory = rollout_expert(spec, world, "pick it", seed=3).trajectory
    labels = [s.primitive_label.kind for s in trajectory.steps]
    collapsed = [k for k, _ in itertools.groupby(labels)]
    assert collapsed == [PrimitiveKind.CLOSE_TO, PrimitiveKind.GRASP, PrimitiveKind.MOVE_UP]
    assert [p.kind for p in PrimitiveFsm(Skill.PICK_TARGET, world).sequence()] == collapsed


@pytest.mark.parametrize("skill", list(Skill))
def test_expert_solves_every_skill(skill):
    spec = TaskSpec(skill=skill)
    world = reset(spec, 11)
    result = rollout_expert(spec, world, "do it", seed=11)
    assert result.success
    assert success_check(spec, result.final_state)
    assert result.trajectory.steps[-1].action is None


@pytest.mark.slow
def test_expert_pick_succeeds_on_hundred_seeds():
    spec = TaskSpec(skill=Skill.PICK_TARGET)
    for seed in range(100):
        assert rollout_expert(spec, reset(spec, seed), "pick", seed=seed).success


def test_level_one_instruction_names_the_object():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET), 0).model_copy(update={"targets": ("milk",)})
    objects = tuple(o.model_copy(update={"label": "milk"}) if i == 0 else o for i, o in enumerate(world.objects))
    world = world.model_copy(update={"objects": objects})
    assert gen_instruction(Skill.PICK_TARGET, world, 1, seed=0) == "pick the milk"


@pytest.mark.parametrize("level", [3, 4])
def test_higher_levels_never_name_the_object(level):
    for seed in range(40):
        spec = TaskSpec(skill=Skill.PICK_TARGET, level=level)
        world = reset(spec, seed)
        text = gen_instruction(spec, world, level, seed)
        assert world.targets[0] not in text.lower()


def test_instruction_level_out_of_range():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET), 0)
    with pytest.raises(InstructionError):
        gen_instruction(Skill.PICK_TARGET, world, 5, seed=0)


def test_spatial_relations_need_a_margin():
    world = reset(TaskSpec(skill=Skill.PICK_TARGET, level=2, distractors=2), 1)
    placed = [(0.2, 0.5), (0.5, 0.3), (0.8, 0.7)]
    objects = tuple(o.model_copy(update={"position": (x, y, o.position[2])}) for o, (x, y) in zip(world.objects, placed))
    world = world.model_copy(update={"objects": objects})
    labels = [o.label for o in objects]
    assert "leftmost" in spatial_relations(world, labels[0])
    assert "frontmost" in spatial_relations(world, labels[2])
    assert "backmost" in spatial_relations(world, labels[1])
    assert spatial_relations(world, labels[0], margin=0.5) == []


def test_train_and_test_seeds_are_disjoint():
    train = {episode_seed(0, e, "train") for e in range(1000)}
    test = {episode_seed(0, e, "test") for e in range(1000)}
    assert not train & test
    with pytest.raises(ValueError):
        episode_seed(0, 0, "val")


def test_generated_dataset_is_annotated():
    data = generate_dataset([Skill.PICK_TARGET, Skill.PUSH_TARGET_FRONT], 2, seed=0, levels=(1, 2))
    assert len(data) == 4
    assert [t.level for t in data] == [1, 2, 1, 2]
    for trajectory in data:
        assert trajectory.waypoints[-1].step == trajectory.length - 1
        assert all(s.waypoint_target is not None for s in trajectory.steps)


def test_environment_counts_regrasps_and_stops_when_done():
    env = SimEnvironment(TaskSpec(skill=Skill.PICK_TARGET), seed=0, max_steps=3)
    for gripper in (GripperState.CLOSED, GripperState.OPEN, GripperState.CLOSED):
        env.apply(Action(gripper=gripper))
    assert env.regrasp_attempts == 1
    assert env.done
    before = env.world
    assert env.apply(Action(delta=Pose6(x=0.01))) is before
