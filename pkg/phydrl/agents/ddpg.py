"""
Deterministic-policy actor-critic learner producing the data-driven action.

Networks are float64 MLPs. The actor maps states to ``tanh(.) * action_scale``;
the critic consumes ``concat(s, a)``. `update` performs one critic regression
step, one actor ascent step and a soft target blend, in place.
"""

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torch.optim as optim
from pydantic import BaseModel, Field, field_validator

from phydrl.agents.replay import Batch
from phydrl.util.errors import CheckpointError, DimensionMismatch, NonFinite, NonFiniteLoss

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "phydrl-ddpg"
CHECKPOINT_VERSION = 1


class AgentConfig(BaseModel):
    gamma: float = Field(0.99, ge=0.0, le=1.0)
    tau: float = Field(0.005, gt=0.0, le=1.0)
    actor_lr: float = Field(1e-4, gt=0.0)
    critic_lr: float = Field(1e-3, gt=0.0)
    hidden_sizes: List[int] = Field(default_factory=lambda: [64, 64])
    batch_size: int = Field(128, ge=1)
    buffer_capacity: int = Field(100_000, ge=1)
    exploration_noise_std: Optional[float] = Field(
        None, ge=0.0, description="Gaussian noise std in action units; defaults to 0.1 * action_scale."
    )
    action_scale: float = Field(15.0, gt=0.0)
    final_layer_init: float = Field(3e-3, ge=0.0)
    seed: int = 0

    @field_validator("hidden_sizes")
    @classmethod
    def check_sizes(cls, v):
        if not v or any(size < 1 for size in v):
            raise ValueError("hidden_sizes must be a non-empty list of positive widths")
        return v

    @property
    def noise_std(self) -> float:
        if self.exploration_noise_std is None:
            return 0.1 * self.action_scale
        return self.exploration_noise_std

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(), sort_keys=True).encode()).hexdigest()


def mlp(in_dim: int, hidden_sizes: List[int], out_dim: int, final_layer_init: float) -> nn.Sequential:
    layers = []
    prev = in_dim
    for width in hidden_sizes:
        layers += [nn.Linear(prev, width, dtype=DTYPE), nn.ReLU()]
        prev = width
    head = nn.Linear(prev, out_dim, dtype=DTYPE)
    nn.init.uniform_(head.weight, -final_layer_init, final_layer_init)
    nn.init.uniform_(head.bias, -final_layer_init, final_layer_init)
    layers.append(head)
    return nn.Sequential(*layers)


class Actor(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, cfg: AgentConfig):
        super().__init__()
        self.net = mlp(state_dim, cfg.hidden_sizes, action_dim, cfg.final_layer_init)
        self.action_scale = cfg.action_scale

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(s)) * self.action_scale


class Critic(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, cfg: AgentConfig):
        super().__init__()
        self.net = mlp(state_dim + action_dim, cfg.hidden_sizes, 1, cfg.final_layer_init)

    def forward(self, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([s, a], dim=-1))


class AgentParams:
    """
    Online and target networks plus the optimizer state of one agent.

    Parameters:
        cfg (AgentConfig): Hyperparameters; `cfg.seed` seeds the initialization.
        state_dim (int): Dimension of the state.
        action_dim (int): Dimension of the data-driven action.
    """

    def __init__(self, cfg: AgentConfig, state_dim: int, action_dim: int = 1):
        self.cfg = cfg
        self.state_dim = state_dim
        self.action_dim = action_dim

        torch.manual_seed(cfg.seed)
        self.actor = Actor(state_dim, action_dim, cfg)
        self.critic = Critic(state_dim, action_dim, cfg)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)
        for p in list(self.actor_target.parameters()) + list(self.critic_target.parameters()):
            p.requires_grad_(False)

        self.actor_optimizer = optim.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.critic_optimizer = optim.Adam(self.critic.parameters(), lr=cfg.critic_lr)

    def noise_generator(self, seed: Optional[int] = None) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.cfg.seed + 1 if seed is None else seed)
        return generator

    def all_finite(self) -> bool:
        modules = (self.actor, self.critic, self.actor_target, self.critic_target)
        return all(bool(torch.all(torch.isfinite(p))) for m in modules for p in m.parameters())


class UpdateResult(NamedTuple):
    critic_loss: float
    actor_loss: float
    params: AgentParams


def _tensor(x, dim: int, name: str) -> torch.Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] != dim:
        raise DimensionMismatch(f"{name} must have trailing dimension {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return torch.as_tensor(arr, dtype=DTYPE)


def _output(t: torch.Tensor, single: bool) -> Union[float, np.ndarray]:
    out = t.detach().numpy().copy()
    if out.shape[-1] == 1:
        out = out[..., 0]
    if single and out.ndim <= 1 and out.size == 1:
        return float(out.reshape(-1)[0])
    return out


def actor_forward(params: AgentParams, s) -> Union[float, np.ndarray]:
    """Deterministic action; a float for one state with a scalar action."""
    x = _tensor(s, params.state_dim, "s")
    with torch.no_grad():
        a = params.actor(x)
    return _output(a, x.ndim == 1)


def critic_forward(params: AgentParams, s, a) -> Union[float, np.ndarray]:
    x = _tensor(s, params.state_dim, "s")
    u = np.asarray(a, dtype=np.float64)
    if params.action_dim == 1 and (u.ndim == 0 or u.shape[-1] != 1):
        u = u[..., None]
    u = _tensor(u, params.action_dim, "a")
    with torch.no_grad():
        q = params.critic(x, u)
    value = _output(q, x.ndim == 1)
    if not np.all(np.isfinite(value)):
        raise NonFinite("Critic output is not finite")
    return value


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """``target <- (1 - tau) * target + tau * online``, parameter by parameter."""
    with torch.no_grad():
        for t, o in zip(target.parameters(), online.parameters()):
            t.copy_((1.0 - tau) * t + tau * o)


def update(params: AgentParams, batch: Batch, cfg: AgentConfig) -> UpdateResult:
    """
    One DDPG step on `batch`: critic regression towards
    ``y = r + gamma (1 - done) Q'(s', pi'(s'))``, actor ascent on ``Q(s, pi(s))``,
    then the target blend with ``cfg.tau``.

    Raises:
        NonFiniteLoss: A loss or an updated weight is NaN or Inf; the
            exception carries batch statistics for the diagnostics dump.
    """
    if len(batch) != cfg.batch_size:
        raise DimensionMismatch(f"Batch has {len(batch)} transitions, expected {cfg.batch_size}")
    s = torch.as_tensor(batch.s, dtype=DTYPE)
    a = torch.as_tensor(batch.a, dtype=DTYPE).reshape(len(batch), params.action_dim)
    r = torch.as_tensor(batch.reward, dtype=DTYPE)
    s_next = torch.as_tensor(batch.s_next, dtype=DTYPE)
    done = torch.as_tensor(batch.done, dtype=DTYPE)

    with torch.no_grad():
        q_next = params.critic_target(s_next, params.actor_target(s_next)).squeeze(-1)
        y = r + cfg.gamma * (1.0 - done) * q_next

    q = params.critic(s, a).squeeze(-1)
    critic_loss = F.mse_loss(q, y)
    _check_loss("critic", critic_loss, batch)
    params.critic_optimizer.zero_grad()
    critic_loss.backward()
    params.critic_optimizer.step()

    actor_loss = -params.critic(s, params.actor(s)).mean()
    _check_loss("actor", actor_loss, batch)
    params.actor_optimizer.zero_grad()
    actor_loss.backward()
    params.actor_optimizer.step()

    soft_update(params.critic_target, params.critic, cfg.tau)
    soft_update(params.actor_target, params.actor, cfg.tau)

    if not params.all_finite():
        raise NonFiniteLoss("Network weights became non-finite", _diagnostics(batch))
    return UpdateResult(float(critic_loss.item()), float(actor_loss.item()), params)


def _check_loss(name: str, loss: torch.Tensor, batch: Batch) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"{name} loss is {loss.item()}", {"loss": name, **_diagnostics(batch)})


def _diagnostics(batch: Batch) -> dict:
    def stats(x):
        x = np.asarray(x, dtype=np.float64)
        finite = x[np.isfinite(x)]
        return {
            "non_finite": int(x.size - finite.size),
            "min": float(finite.min()) if finite.size else None,
            "max": float(finite.max()) if finite.size else None,
        }

    return {
        "batch_size": len(batch),
        "s": stats(batch.s),
        "a": stats(batch.a),
        "reward": stats(batch.reward),
        "s_next": stats(batch.s_next),
    }


def act_with_exploration(params: AgentParams, s, noise_rng: torch.Generator) -> Union[float, np.ndarray]:
    """Actor output plus Gaussian noise, clamped to ``+-action_scale``."""
    x = _tensor(s, params.state_dim, "s")
    with torch.no_grad():
        a = params.actor(x)
        noise = torch.randn(a.shape, generator=noise_rng, dtype=DTYPE)
        a = torch.clamp(a + params.cfg.noise_std * noise, -params.cfg.action_scale, params.cfg.action_scale)
    return _output(a, x.ndim == 1)


def save_checkpoint(params: AgentParams, path, seed: Optional[int] = None) -> Path:
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "state": params.state_dim,
            "action": params.action_dim,
            "hidden": list(params.cfg.hidden_sizes),
        },
        "seed": params.cfg.seed if seed is None else seed,
        "config_hash": params.cfg.config_hash(),
    }
    torch.save(
        {
            "header": header,
            "config": params.cfg.model_dump(),
            "actor": params.actor.state_dict(),
            "critic": params.critic.state_dict(),
            "actor_target": params.actor_target.state_dict(),
            "critic_target": params.critic_target.state_dict(),
            "actor_optimizer": params.actor_optimizer.state_dict(),
            "critic_optimizer": params.critic_optimizer.state_dict(),
        },
        path,
    )
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path, state_dim: Optional[int] = None, action_dim: Optional[int] = None) -> AgentParams:
    """
    Rebuild an agent from `path`.

    Raises:
        CheckpointError: The file is unreadable, has a foreign format or
            version, or its dimensions differ from the requested ones.
    """
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    header = payload.get("header") if isinstance(payload, dict) else None
    if not header or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {header.get('version')}")
    dims = header["dims"]
    if state_dim is not None and dims["state"] != state_dim:
        raise CheckpointError(f"Checkpoint state dimension {dims['state']} != {state_dim}")
    if action_dim is not None and dims["action"] != action_dim:
        raise CheckpointError(f"Checkpoint action dimension {dims['action']} != {action_dim}")

    cfg = AgentConfig(**payload["config"])
    if cfg.config_hash() != header["config_hash"] or list(cfg.hidden_sizes) != dims["hidden"]:
        raise CheckpointError("Checkpoint config does not match its header")
    params = AgentParams(cfg, dims["state"], dims["action"])
    try:
        for name in ("actor", "critic", "actor_target", "critic_target", "actor_optimizer", "critic_optimizer"):
            getattr(params, name).load_state_dict(payload[name])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} is incomplete: {e}") from e
    return params
