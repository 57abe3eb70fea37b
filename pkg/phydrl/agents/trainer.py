import logging
from pathlib import Path
from typing import List, Literal, NamedTuple, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from phydrl.agents.ddpg import AgentConfig, AgentParams, act_with_exploration, save_checkpoint, update
from phydrl.agents.replay import ReplayBuffer, Transition
from phydrl.agents.rollout import actor_policy, rollout
from phydrl.core.phy_core import (
    EnvelopeGain,
    RewardConfig,
    RewardVariant,
    physics_action,
    residual_action,
    reward,
)
from phydrl.plant.cartpole import ACTION_DIM, STATE_DIM, BoxRegion, EnvelopeRegion, PlantParams, sample_initial, step
from phydrl.safety.safety_sets import SafetySpec, in_safe_set
from phydrl.util.files import EVAL_COLUMNS, TRAINING_COLUMNS, write_csv

logger = logging.getLogger(__name__)


class TrainingSection(BaseModel):
    total_steps: int = Field(200_000, ge=0)
    warmup_steps: int = Field(1_000, ge=0)
    max_episode_steps: int = Field(1_000, ge=1)
    eval_every: int = Field(5_000, ge=1)
    eval_episodes: int = Field(5, ge=1)
    eval_horizon: int = Field(1_000, ge=0)
    log_every: int = Field(1_000, ge=1)
    residual: bool = True
    init_region: Literal["box", "envelope"] = "box"
    init_low: List[float] = Field(default_factory=lambda: [-0.1, -0.1, -0.1, -0.1])
    init_high: List[float] = Field(default_factory=lambda: [0.1, 0.1, 0.1, 0.1])
    init_level: float = Field(0.5, ge=0.0)

    @model_validator(mode="after")
    def check_box(self):
        if len(self.init_low) != len(self.init_high):
            raise ValueError("init_low and init_high must have the same length")
        return self


class TrainingResult(NamedTuple):
    params: AgentParams
    training_rows: list
    eval_rows: list
    artifacts: list


class Trainer:
    """
    Seeded DDPG training loop on the friction plant.

    The data-driven action is composed with the physics action ``F s`` when
    `training.residual` is set. Episodes end when the state leaves the safe
    set (the done bit) or after `max_episode_steps` (truncation, not done).
    Evaluation always scores with the safety-and-stability reward so the
    reward variants share one scale.
    """

    def __init__(
        self,
        plant: PlantParams,
        safety: SafetySpec,
        gain: EnvelopeGain,
        agent: AgentConfig,
        reward_cfg: RewardConfig,
        training: TrainingSection,
        seed: int = 0,
    ):
        self.plant = plant
        self.safety = safety
        self.gain = gain
        self.reward_cfg = reward_cfg
        self.eval_reward_cfg = reward_cfg.model_copy(update={"reward_variant": RewardVariant.SAFETY_AND_STABILITY})
        self.training = training
        self.seed = seed
        self.agent_cfg = agent.model_copy(update={"seed": seed})

        env_seq, replay_seq, eval_seq = np.random.SeedSequence(seed).spawn(3)
        self.env_rng = np.random.default_rng(env_seq)
        self.eval_seq = eval_seq
        self.params = AgentParams(self.agent_cfg, STATE_DIM, ACTION_DIM)
        self.noise_rng = self.params.noise_generator()
        self.buffer = ReplayBuffer(self.agent_cfg.buffer_capacity, STATE_DIM, ACTION_DIM, np.random.default_rng(replay_seq))

        if training.init_region == "box":
            self.region = BoxRegion(low=training.init_low, high=training.init_high)
        else:
            self.region = EnvelopeRegion(P=gain.P, c=training.init_level)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return sample_initial(self.region, rng)

    def physics_term(self, s: np.ndarray) -> float:
        if not self.training.residual:
            return 0.0
        return float(physics_action(self.gain.F, s))

    def evaluate(self) -> tuple:
        """Mean return and the fraction of episodes that stayed in the safe set."""
        rng = np.random.default_rng(self.eval_seq)
        policy = actor_policy(self.params)
        returns, safe = [], 0
        for _ in range(self.training.eval_episodes):
            trajectory = rollout(
                policy,
                self.plant,
                self.reset(rng),
                self.training.eval_horizon,
                gain=self.gain,
                residual=self.training.residual,
                safety=self.safety,
            )
            returns.append(float(np.sum(trajectory.rewards(self.gain, self.eval_reward_cfg))))
            safe += trajectory.exit_step is None
        return float(np.mean(returns)), safe / self.training.eval_episodes

    def train(self, out_dir=None) -> TrainingResult:
        torch.set_num_threads(1)
        cfg, training = self.agent_cfg, self.training
        training_rows, eval_rows = [], []
        critic_loss = actor_loss = float("nan")
        s = self.reset(self.env_rng)
        episode, episode_return, episode_steps = 0, 0.0, 0

        for t in range(1, training.total_steps + 1):
            a_drl = float(act_with_exploration(self.params, s, self.noise_rng))
            command = residual_action(a_drl, self.physics_term(s), self.plant.force_limit)
            result = step(s, command.value, self.plant)
            r = float(reward(self.gain, self.reward_cfg, s, result.force, result.state))
            done = not in_safe_set(self.safety, result.state)
            self.buffer.push(Transition(s=s, a_drl=a_drl, reward=r, s_next=result.state, done=done))

            if t > training.warmup_steps and len(self.buffer) >= cfg.batch_size:
                critic_loss, actor_loss, _ = update(self.params, self.buffer.sample(cfg.batch_size), cfg)

            episode_return += r
            episode_steps += 1
            s = result.state
            if done or episode_steps >= training.max_episode_steps:
                training_rows.append([t, episode, episode_return, critic_loss, actor_loss])
                logger.debug(f"Episode {episode} ended at step {t} (return {episode_return:.4g}, done={done})")
                episode, episode_return, episode_steps = episode + 1, 0.0, 0
                s = self.reset(self.env_rng)

            if t % training.eval_every == 0:
                eval_return, safe_fraction = self.evaluate()
                eval_rows.append([t, eval_return, safe_fraction])
                logger.info(f"Step {t}: eval return {eval_return:.4g}, safe fraction {safe_fraction:.2f}")
            if t % training.log_every == 0:
                logger.info(
                    f"Step {t}/{training.total_steps}: episode {episode}, "
                    f"critic loss {critic_loss:.4g}, actor loss {actor_loss:.4g}"
                )

        artifacts = []
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            artifacts = [
                save_checkpoint(self.params, out_dir / "checkpoint.pt", seed=self.seed),
                write_csv(out_dir / "training_log.csv", TRAINING_COLUMNS, training_rows),
                write_csv(out_dir / "eval_log.csv", EVAL_COLUMNS, eval_rows),
            ]
        return TrainingResult(self.params, training_rows, eval_rows, artifacts)


def steps_to_threshold(eval_rows, threshold: float, require_safe: bool = True) -> Optional[int]:
    """
    First evaluation step whose return reaches `threshold`. With `require_safe`
    the evaluation must also have kept every episode in the safe set, since an
    early exit truncates the (negative) return.
    """
    for row in eval_rows:
        t, eval_return, safe_fraction = int(row[0]), float(row[1]), float(row[2])
        if eval_return >= threshold and (safe_fraction >= 1.0 or not require_safe):
            return t
    return None
