# conftest.py
import pytest

from config import ExperimentConfig


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig(d_model=16, heads=2, ls=1, la=1, epochs=2, batch_size=8, demos_per_task=3,
                            eval_episodes=1, max_episode_steps=40, history=1, seed=7)
