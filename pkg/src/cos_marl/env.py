"""Cooperative Navigation with paired occupancy (d-CN / c-CN).

``n`` landmarks and ``2n`` agents start at uniform random positions in
``[-1, 1]^2``. The team is rewarded for landmarks covered by one agent and,
more heavily, by two. An episode ends when every landmark holds two agents or
after ``max_steps`` steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence

import numpy as np

# up, down, left, right, stop
DISCRETE_MOVES = np.array(
    [[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
)
N_DISCRETE_ACTIONS = 5
STEP_PENALTY = -0.1
SINGLE_REWARD = 3.0
DOUBLE_REWARD = 10.0


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass
class WorldConfig:
    n_landmarks: int = 2
    n_agents: Optional[int] = None
    action_mode: str = "discrete"
    max_steps: int = 25
    dt: float = 0.1
    damping: float = 0.25
    force_scale: float = 5.0
    occupy_radius: float = 0.1
    world_half_extent: float = 1.0
    double_rule: str = "at_least"  # or "exactly"

    def __post_init__(self) -> None:
        if self.n_agents is None:
            self.n_agents = 2 * self.n_landmarks
        self.validate()

    def validate(self) -> None:
        if self.n_landmarks < 1:
            raise ValueError("n_landmarks must be positive")
        if self.n_agents != 2 * self.n_landmarks:
            raise ValueError(
                f"n_agents must equal 2*n_landmarks (got n_agents={self.n_agents}, "
                f"n_landmarks={self.n_landmarks})"
            )
        if self.action_mode not in ("discrete", "continuous"):
            raise ValueError(f"action_mode must be 'discrete' or 'continuous', got {self.action_mode!r}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.occupy_radius <= 0:
            raise ValueError("occupy_radius must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.double_rule not in ("at_least", "exactly"):
            raise ValueError("double_rule must be 'at_least' or 'exactly'")

    @property
    def obs_dim(self) -> int:
        return 4 + 2 * (self.n_agents - 1) + 2 * self.n_landmarks

    @property
    def state_dim(self) -> int:
        return 4 * self.n_agents + 2 * self.n_landmarks

    @property
    def action_dim(self) -> int:
        return N_DISCRETE_ACTIONS if self.action_mode == "discrete" else 2


@dataclass
class WorldState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    landmark_pos: np.ndarray
    step: int = 0
    done: bool = False
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)


@dataclass
class StepInfo:
    single: int
    double: int
    end_step: Optional[int]
    success: bool


def reset(config: WorldConfig, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    h = config.world_half_extent
    agents = rng.uniform(-h, h, size=(config.n_agents, 2))
    landmarks = rng.uniform(-h, h, size=(config.n_landmarks, 2))
    return WorldState(
        agent_pos=agents,
        agent_vel=np.zeros_like(agents),
        landmark_pos=landmarks,
        step=0,
        rng=rng,
    )


def occupancy(state: WorldState, config: WorldConfig) -> tuple[int, int]:
    """Return ``(single, double)`` landmark counts.

    A landmark is occupied by an agent iff their distance is ``<= occupy_radius``.
    """
    diff = state.agent_pos[None, :, :] - state.landmark_pos[:, None, :]
    inside = np.sqrt((diff**2).sum(-1)) <= config.occupy_radius
    counts = inside.sum(axis=1)
    single = int((counts == 1).sum())
    if config.double_rule == "exactly":
        double = int((counts == 2).sum())
    else:
        double = int((counts >= 2).sum())
    return single, double


def team_reward(single: int, double: int) -> float:
    return STEP_PENALTY + SINGLE_REWARD * single + DOUBLE_REWARD * double


def reward(state: WorldState, config: WorldConfig) -> float:
    return team_reward(*occupancy(state, config))


def action_to_force(actions, config: WorldConfig) -> np.ndarray:
    if config.action_mode == "discrete":
        idx = np.asarray(actions, dtype=np.int64).reshape(config.n_agents)
        if idx.min() < 0 or idx.max() >= N_DISCRETE_ACTIONS:
            raise ValueError(f"discrete actions must lie in [0, {N_DISCRETE_ACTIONS}), got {idx.tolist()}")
        return DISCRETE_MOVES[idx]
    u = np.asarray(actions, dtype=np.float64).reshape(config.n_agents, 2)
    return np.clip(u, -1.0, 1.0)


def step(state: WorldState, actions, config: WorldConfig) -> tuple[WorldState, float, bool, StepInfo]:
    if state.done or state.step >= config.max_steps:
        raise EpisodeFinishedError("step() called on a finished episode; call reset() first")
    accel = config.force_scale * action_to_force(actions, config)
    vel = (1.0 - config.damping) * state.agent_vel + accel * config.dt
    h = config.world_half_extent
    pos = np.clip(state.agent_pos + vel * config.dt, -h, h)
    new = WorldState(
        agent_pos=pos,
        agent_vel=vel,
        landmark_pos=state.landmark_pos,
        step=state.step + 1,
        rng=state.rng,
    )
    single, double = occupancy(new, config)
    success = double == config.n_landmarks
    done = success or new.step >= config.max_steps
    new.done = done
    info = StepInfo(single=single, double=double, end_step=new.step if done else None, success=success)
    return new, team_reward(single, double), done, info


def observe(state: WorldState, agent_index: int, config: WorldConfig) -> np.ndarray:
    if not 0 <= agent_index < config.n_agents:
        raise IndexError(f"agent_index {agent_index} out of range for {config.n_agents} agents")
    own = state.agent_pos[agent_index]
    others = np.delete(state.agent_pos, agent_index, axis=0) - own
    marks = state.landmark_pos - own
    return np.concatenate([state.agent_vel[agent_index], own, others.ravel(), marks.ravel()])


def observe_all(state: WorldState, config: WorldConfig) -> np.ndarray:
    return np.stack([observe(state, i, config) for i in range(config.n_agents)])


def global_state(state: WorldState) -> np.ndarray:
    return np.concatenate(
        [state.agent_pos.ravel(), state.agent_vel.ravel(), state.landmark_pos.ravel()]
    )


class CoopNavEnv:
    """Stateful convenience wrapper around the functional API."""

    def __init__(self, config: WorldConfig, log: Optional[IO[str]] = None):
        self.config = config
        self.state: Optional[WorldState] = None
        self.log = log

    def reset(self, seed: int) -> np.ndarray:
        self.state = reset(self.config, seed)
        return observe_all(self.state, self.config)

    def step(self, actions: Sequence) -> tuple[np.ndarray, float, bool, StepInfo]:
        assert self.state is not None, "reset() first"
        self.state, r, done, info = step(self.state, actions, self.config)
        if self.log is not None:
            write_step_record(self.log, self.state.step, actions, r, info, done)
        return observe_all(self.state, self.config), r, done, info

    def global_state(self) -> np.ndarray:
        assert self.state is not None
        return global_state(self.state)


def write_step_record(fh: IO[str], step_idx: int, actions, r: float, info: StepInfo, done: bool) -> None:
    rec = {
        "step": step_idx,
        "action": np.asarray(actions).tolist(),
        "reward": r,
        "single": info.single,
        "double": info.double,
        "done": done,
    }
    fh.write(json.dumps(rec) + "\n")
