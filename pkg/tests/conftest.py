from __future__ import annotations

import numpy as np
import pytest

from reasonvla.data_model import ContinuousAction, Episode, Observation, ReasoningTrace, Step


def make_image(size: int = 8, fill: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    if rng is not None:
        return rng.integers(0, 8, size=(size, size), dtype=np.int64)
    return np.full((size, size), fill, dtype=np.int64)


def make_action(**overrides) -> ContinuousAction:
    kwargs = dict(translation=(0.0, 0.0, 0.0), rotation=(0.0, 0.0, 0.0), gripper=0.0)
    kwargs.update(overrides)
    return ContinuousAction(**kwargs)


def make_trace(**overrides) -> ReasoningTrace:
    kwargs = dict(
        observation="i see a can on the table",
        situation_analysis="the task is to pick up the can",
        spatial_reasoning="the can sits two cells left of the gripper",
        task_planning="move to the can and grasp it",
        logical_steps=("move to the can", "grasp the can"),
        sub_action="move to the can",
    )
    kwargs.update(overrides)
    return ReasoningTrace(**kwargs)


def make_step(size: int = 8, instruction: str = "pick up the can", trace: ReasoningTrace | None = None,
              action: ContinuousAction | None = None, images=None) -> Step:
    if images is None:
        images = (make_image(size),)
    obs = Observation(images=tuple(images), instruction=instruction)
    return Step(observation=obs, action=action or make_action(), trace=trace)


def make_episode(episode_id: str = "e0", n_steps: int = 2, size: int = 8,
                 instruction: str = "pick up the can", with_traces: bool = False,
                 metadata: dict[str, str] | None = None) -> Episode:
    steps = tuple(
        make_step(size=size, instruction=instruction, trace=make_trace() if with_traces else None)
        for _ in range(n_steps)
    )
    return Episode(episode_id=episode_id, task_name="pick", steps=steps,
                   metadata=metadata or {"seed": "0"})


@pytest.fixture
def episode() -> Episode:
    return make_episode()
