# test_policy.py
import numpy as np
import pytest

from action_head import fit_discretizer
from data_models import (Action, Observation, Pose6, PrimitiveAction, PrimitiveKind, RobotState, Skill, Trajectory,
                         TrajectoryStep)
from errors import PivotError
from nn import check_gradients
from policy import FeatureStore, PivotPolicy, load_policy
from sim import generate_dataset
from tests.helpers import make_trajectory


@pytest.fixture(scope="module")
def demos():
    return generate_dataset([Skill.PICK_TARGET], 3, seed=1)


@pytest.fixture
def policy_and_store(tiny_config, demos):
    policy = PivotPolicy(tiny_config.model_copy(update={"dropout": 0.0}))
    store = FeatureStore(policy, demos)
    policy.discretizer = fit_discretizer(store.all_actions())
    return policy, store


def test_batch_shapes(policy_and_store, tiny_config):
    policy, store = policy_and_store
    batch = store.batch(store.samples[:4])
    assert batch.history.shape == (4, tiny_config.history + 1, 49, tiny_config.d_model)
    assert batch.states.shape == (4, tiny_config.history + 1, 7)
    assert batch.target_features.shape == (4, 49, tiny_config.d_model)
    assert batch.target_bins.shape == (4, 7)
    assert batch.text.shape[0] == batch.text_mask.shape[0] == 4


def _toy_trajectory(rng, T=3, size=8):
    steps = []
    for t in range(T):
        action = None
        if t < T - 1:
            action = Action.from_vector(np.append(rng.uniform(-0.01, 0.01, size=6), t % 2))
        pixels = rng.integers(0, 256, size=(size, size, 3)).astype(np.uint8)
        steps.append(TrajectoryStep(
            observation=Observation.from_array(pixels, timestamp=t),
            state=RobotState(pose=Pose6(x=0.01 * t, y=-0.02 * t)),
            action=action,
            waypoint_target=T - 1,
            primitive_label=PrimitiveAction(kind=PrimitiveKind.GRASP, target="milk"),
        ))
    return Trajectory(instruction="pick the milk", level=1, task=Skill.PICK_TARGET, steps=steps)


def test_full_model_gradients_on_every_entry(tiny_config, demos):
    # 8x8 图像、patch 8：每帧一个 token，逐个元素核对全部参数
    config = tiny_config.model_copy(update={"dropout": 0.0, "d_model": 8, "ffn_mult": 1, "image_size": 8})
    policy = PivotPolicy(config)
    policy.discretizer = fit_discretizer([s.action for t in demos for s in t.steps[:-1]])
    store = FeatureStore(policy, [_toy_trajectory(np.random.default_rng(3))])
    batch = store.batch([(0, 1)])
    assert batch.history.shape == (1, 2, 1, 8)
    policy.zero_grad()
    policy.loss_and_backward(batch)
    report = check_gradients(lambda: policy.losses(batch).total, policy.parameters(), policy.gradients())
    assert report.checked > 0.9 * policy.num_parameters()
    assert report.max_error < 1e-4


def test_unannotated_trajectories_are_rejected(tiny_config):
    with pytest.raises(PivotError):
        FeatureStore(PivotPolicy(tiny_config), [make_trajectory(4)])


def test_act_without_discretizer_fails(tiny_config, demos):
    policy = PivotPolicy(tiny_config).eval()
    steps = demos[0].steps[:tiny_config.history + 1]
    with pytest.raises(PivotError):
        policy.act("pick", PrimitiveAction(kind=PrimitiveKind.GRASP), [s.observation for s in steps],
                   np.stack([s.state.to_vector() for s in steps]))


def test_checkpoint_roundtrip_preserves_actions(tmp_path, policy_and_store, tiny_config, demos):
    policy, _ = policy_and_store
    policy.eval()
    policy.save(tmp_path / "policy.bin")
    loaded = load_policy(tmp_path / "policy.bin")
    for name, value in policy.blocks().items():
        assert loaded.blocks()[name].tobytes() == value.tobytes()
    assert loaded.encoder_digest() == policy.encoder_digest()

    steps = demos[0].steps[:tiny_config.history + 1]
    args = ("pick the milk", PrimitiveAction(kind=PrimitiveKind.CLOSE_TO), [s.observation for s in steps],
            np.stack([s.state.to_vector() for s in steps]))
    assert loaded.act(*args) == policy.act(*args)
