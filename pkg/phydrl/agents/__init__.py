from .ddpg import AgentConfig, AgentParams, act_with_exploration, actor_forward, critic_forward, update
from .replay import ReplayBuffer, Transition, replay_push, replay_sample
from .trainer import Trainer, TrainingSection
