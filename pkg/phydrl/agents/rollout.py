from typing import Callable, List, NamedTuple, Optional

import numpy as np

from phydrl.agents.ddpg import AgentParams, actor_forward
from phydrl.core.phy_core import (
    EnvelopeGain,
    RewardConfig,
    lyapunov_value,
    physics_action,
    r_term,
    residual_action,
    reward,
)
from phydrl.plant.linear import Plant, advance
from phydrl.safety.safety_sets import SafetySpec, in_safe_set

Policy = Callable[[np.ndarray], float]


def zero_policy(s: np.ndarray) -> float:
    return 0.0


def constant_policy(value: float) -> Policy:
    return lambda s: float(value)


def actor_policy(params: AgentParams) -> Policy:
    return lambda s: float(actor_forward(params, s))


class Trajectory(NamedTuple):
    states: np.ndarray
    a_phy: np.ndarray
    a_drl: np.ndarray
    a_total: np.ndarray
    clamped: np.ndarray
    exit_step: Optional[int]

    @property
    def length(self) -> int:
        return self.a_total.shape[0]

    def rewards(self, gain: EnvelopeGain, cfg: RewardConfig) -> np.ndarray:
        if self.length == 0:
            return np.zeros(0)
        return np.atleast_1d(reward(gain, cfg, self.states[:-1], self.a_total, self.states[1:]))

    def rows(self, gain: EnvelopeGain, cfg: RewardConfig) -> List[list]:
        """Per-step rows in `TRAJECTORY_COLUMNS` order."""
        if self.length == 0:
            return []
        s = self.states[:-1]
        rewards = self.rewards(gain, cfg)
        values = np.atleast_1d(lyapunov_value(gain.P, s))
        terms = np.atleast_1d(r_term(gain, s, self.states[1:]))
        return [
            [k, *s[k].tolist(), self.a_phy[k], self.a_drl[k], self.a_total[k], rewards[k], values[k], terms[k]]
            for k in range(self.length)
        ]


def rollout(
    policy: Policy,
    plant: Plant,
    s0,
    horizon: int,
    gain: Optional[EnvelopeGain] = None,
    residual: bool = True,
    safety: Optional[SafetySpec] = None,
    stop_on_exit: bool = True,
) -> Trajectory:
    """
    Roll the plant for `horizon` steps under the terminal action
    ``policy(s) + F s`` (or ``policy(s)`` alone without residual or gain).

    `exit_step` is the first step whose state leaves `safety`.
    """
    s = np.asarray(s0, dtype=np.float64).copy()
    states = [s]
    a_phy, a_drl, a_total, clamped = [], [], [], []
    exit_step = None
    for k in range(horizon):
        drl = float(policy(s))
        phy = float(physics_action(gain.F, s)) if residual and gain is not None else 0.0
        command = residual_action(drl, phy, plant.force_limit)
        result = advance(plant, s, command.value)
        s = result.state
        states.append(s)
        a_phy.append(phy)
        a_drl.append(drl)
        a_total.append(result.force)
        clamped.append(command.clamped or result.clamped)
        if safety is not None and exit_step is None and not in_safe_set(safety, s):
            exit_step = k + 1
            if stop_on_exit:
                break
    return Trajectory(
        states=np.array(states),
        a_phy=np.array(a_phy),
        a_drl=np.array(a_drl),
        a_total=np.array(a_total),
        clamped=np.array(clamped, dtype=bool),
        exit_step=exit_step,
    )
