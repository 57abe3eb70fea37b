import os
import sys
import tempfile
import unittest

import numpy as np
import torch
from torch.func import functional_call

sys.path.insert(0, "..")

from phydrl.agents.ddpg import (
    AgentConfig,
    AgentParams,
    act_with_exploration,
    actor_forward,
    critic_forward,
    load_checkpoint,
    save_checkpoint,
    soft_update,
    update,
)
from phydrl.agents.replay import Batch, ReplayBuffer, Transition, replay_push, replay_sample
from phydrl.agents.trainer import Trainer, TrainingSection, steps_to_threshold
from phydrl.core.phy_core import RewardConfig
from phydrl.experiment import published
from phydrl.plant.cartpole import PlantParams
from phydrl.util.errors import CheckpointError, DimensionMismatch, EmptyBuffer, NonFinite, NonFiniteLoss
from phydrl.util.files import read_csv


def random_batch(rng: np.random.Generator, size: int, state_dim: int = 4) -> Batch:
    return Batch(
        s=rng.normal(size=(size, state_dim)),
        a=rng.normal(size=(size, 1)),
        reward=rng.normal(size=size),
        s_next=rng.normal(size=(size, state_dim)),
        done=(rng.random(size) < 0.1).astype(np.float64),
    )


class NetworkTest(unittest.TestCase):
    def test_zero_final_layer(self):
        params = AgentParams(AgentConfig(final_layer_init=0.0), 4)
        s = np.random.default_rng(0).normal(size=(10, 4))
        np.testing.assert_array_equal(actor_forward(params, s), np.zeros(10))
        np.testing.assert_array_equal(critic_forward(params, s, np.ones(10)), np.zeros(10))

    def test_action_bound(self):
        cfg = AgentConfig(action_scale=15.0, final_layer_init=1.0)
        params = AgentParams(cfg, 4)
        with torch.no_grad():
            params.actor.net[-1].weight.mul_(1e3)
        s = np.random.default_rng(1).normal(scale=100.0, size=(1000, 4))
        self.assertTrue(np.all(np.abs(actor_forward(params, s)) <= 15.0))

    def test_deterministic_initialization(self):
        s = np.array([0.1, 0.2, -0.3, 0.4])
        first = AgentParams(AgentConfig(seed=5), 4)
        second = AgentParams(AgentConfig(seed=5), 4)
        self.assertEqual(actor_forward(first, s), actor_forward(second, s))
        self.assertIsInstance(actor_forward(first, s), float)

    def test_input_validation(self):
        params = AgentParams(AgentConfig(), 4)
        with self.assertRaises(DimensionMismatch):
            actor_forward(params, np.zeros(3))
        with self.assertRaises(NonFinite):
            actor_forward(params, [0.0, float("nan"), 0.0, 0.0])

    def test_config_validation(self):
        for bad in ({"gamma": 1.5}, {"tau": 0.0}, {"hidden_sizes": []}, {"action_scale": 0.0}):
            with self.assertRaises(ValueError):
                AgentConfig(**bad)
        self.assertEqual(AgentConfig(action_scale=10.0).noise_std, 1.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        for seed in range(50):
            params = AgentParams(AgentConfig(hidden_sizes=[5, 4], final_layer_init=0.5, action_scale=2.0, seed=seed), 3)
            s = torch.as_tensor(rng.normal(size=(4, 3)), dtype=torch.float64)
            a = torch.as_tensor(rng.normal(size=(4, 1)), dtype=torch.float64)

            self.assertTrue(torch.autograd.gradcheck(params.actor, (s.clone().requires_grad_(True),)))
            self.assertTrue(
                torch.autograd.gradcheck(params.critic, (s.clone().requires_grad_(True), a.clone().requires_grad_(True)))
            )
            for name, weight in params.actor.named_parameters():
                w = weight.detach().clone().requires_grad_(True)

                def actor_loss(w, name=name):
                    action = functional_call(params.actor, {name: w}, (s,))
                    return -params.critic(s, action).mean()

                self.assertTrue(torch.autograd.gradcheck(actor_loss, (w,), eps=1e-6, atol=1e-5, rtol=1e-4))
            for name, weight in params.critic.named_parameters():
                w = weight.detach().clone().requires_grad_(True)

                def critic_out(w, name=name):
                    return functional_call(params.critic, {name: w}, (s, a))

                self.assertTrue(torch.autograd.gradcheck(critic_out, (w,), eps=1e-6, atol=1e-5, rtol=1e-4))


class UpdateTest(unittest.TestCase):
    def test_zero_discount_regresses_on_reward(self):
        cfg = AgentConfig(gamma=0.0, batch_size=32)
        params = AgentParams(cfg, 4)
        batch = random_batch(np.random.default_rng(2), 32)
        q = critic_forward(params, batch.s, batch.a)
        result = update(params, batch, cfg)
        self.assertAlmostEqual(result.critic_loss, float(np.mean((q - batch.reward) ** 2)), places=12)

    def test_full_blend_copies_online(self):
        cfg = AgentConfig(tau=1.0, batch_size=16)
        params = AgentParams(cfg, 4)
        update(params, random_batch(np.random.default_rng(3), 16), cfg)
        for target, online in ((params.actor_target, params.actor), (params.critic_target, params.critic)):
            for t, o in zip(target.parameters(), online.parameters()):
                self.assertTrue(torch.equal(t, o))

    def test_soft_blend_is_exact(self):
        cfg = AgentConfig(tau=0.3, batch_size=16)
        params = AgentParams(cfg, 4)
        old = [p.detach().clone() for p in params.critic_target.parameters()]
        update(params, random_batch(np.random.default_rng(4), 16), cfg)
        for before, t, o in zip(old, params.critic_target.parameters(), params.critic.parameters()):
            self.assertTrue(torch.equal(t, (1.0 - 0.3) * before + 0.3 * o.detach()))

    def test_soft_update_function(self):
        params = AgentParams(AgentConfig(), 4)
        other = AgentParams(AgentConfig(seed=1), 4)
        soft_update(params.actor_target, other.actor, 1.0)
        for t, o in zip(params.actor_target.parameters(), other.actor.parameters()):
            self.assertTrue(torch.equal(t, o))

    def test_bandit_converges(self):
        cfg = AgentConfig(gamma=0.0, batch_size=8, seed=0)
        params = AgentParams(cfg, 1)
        batch = Batch(
            s=np.zeros((8, 1)), a=np.zeros((8, 1)), reward=np.ones(8), s_next=np.zeros((8, 1)), done=np.zeros(8)
        )
        for _ in range(2000):
            update(params, batch, cfg)
        self.assertLess(abs(critic_forward(params, [0.0], 0.0) - 1.0), 0.05)

    def test_batch_size_checked(self):
        cfg = AgentConfig(batch_size=16)
        with self.assertRaises(DimensionMismatch):
            update(AgentParams(cfg, 4), random_batch(np.random.default_rng(5), 8), cfg)

    def test_non_finite_loss(self):
        cfg = AgentConfig(batch_size=8)
        batch = random_batch(np.random.default_rng(6), 8)._replace(reward=np.full(8, np.inf))
        with self.assertRaises(NonFiniteLoss) as ctx:
            update(AgentParams(cfg, 4), batch, cfg)
        self.assertEqual(ctx.exception.diagnostics["reward"]["non_finite"], 8)
        self.assertEqual(ctx.exception.diagnostics["loss"], "critic")


class ExplorationTest(unittest.TestCase):
    def test_zero_noise_is_deterministic_action(self):
        params = AgentParams(AgentConfig(exploration_noise_std=0.0), 4)
        s = np.array([0.1, 0.0, -0.1, 0.2])
        self.assertEqual(act_with_exploration(params, s, params.noise_generator()), actor_forward(params, s))

    def test_noise_is_reproducible_and_bounded(self):
        params = AgentParams(AgentConfig(exploration_noise_std=100.0), 4)
        s = np.zeros(4)
        first_rng, second_rng = params.noise_generator(), params.noise_generator()
        first = [act_with_exploration(params, s, first_rng) for _ in range(50)]
        second = [act_with_exploration(params, s, second_rng) for _ in range(50)]
        self.assertEqual(first, second)
        self.assertTrue(all(abs(a) <= 15.0 for a in first))


class ReplayBufferTest(unittest.TestCase):
    def transition(self, k: float) -> Transition:
        return Transition(s=np.full(4, k), a_drl=k, reward=k, s_next=np.full(4, k + 1.0), done=False)

    def test_push_and_sample(self):
        buffer = ReplayBuffer(10, 4, seed=0)
        replay_push(buffer, self.transition(1.0))
        batch = replay_sample(buffer, 3)
        self.assertEqual(len(batch), 3)
        np.testing.assert_array_equal(batch.s, np.ones((3, 4)))
        np.testing.assert_array_equal(batch.a, np.ones((3, 1)))

    def test_eviction(self):
        buffer = ReplayBuffer(3, 4, seed=0)
        for k in range(4):
            buffer.push(self.transition(float(k)))
        self.assertEqual(len(buffer), 3)
        self.assertEqual(buffer.oldest().reward, 1.0)
        self.assertNotIn(0.0, buffer.sample(200).reward)

    def test_empty_buffer(self):
        with self.assertRaises(EmptyBuffer):
            ReplayBuffer(3, 4).sample(1)
        self.assertIsNone(ReplayBuffer(3, 4).oldest())

    def test_rejects_bad_transitions(self):
        buffer = ReplayBuffer(3, 4)
        with self.assertRaises(DimensionMismatch):
            buffer.push(Transition(s=np.zeros(3), a_drl=0.0, reward=0.0, s_next=np.zeros(4), done=False))
        with self.assertRaises(NonFinite):
            buffer.push(Transition(s=np.zeros(4), a_drl=0.0, reward=float("nan"), s_next=np.zeros(4), done=False))

    def test_seeded_sampling(self):
        batches = []
        for _ in range(2):
            buffer = ReplayBuffer(50, 4, seed=9)
            for k in range(50):
                buffer.push(self.transition(float(k)))
            batches.append(buffer.sample(20).reward)
        np.testing.assert_array_equal(batches[0], batches[1])


class CheckpointTest(unittest.TestCase):
    def test_round_trip(self):
        params = AgentParams(AgentConfig(hidden_sizes=[8, 8], seed=4), 4)
        s = np.random.default_rng(0).normal(size=(5, 4))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(params, os.path.join(tmp, "checkpoint.pt"))
            loaded = load_checkpoint(path, state_dim=4, action_dim=1)
        np.testing.assert_array_equal(actor_forward(loaded, s), actor_forward(params, s))
        np.testing.assert_array_equal(critic_forward(loaded, s, np.ones(5)), critic_forward(params, s, np.ones(5)))

    def test_rejects_foreign_files(self):
        params = AgentParams(AgentConfig(hidden_sizes=[8]), 4)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(params, os.path.join(tmp, "checkpoint.pt"))
            with self.assertRaises(CheckpointError):
                load_checkpoint(path, state_dim=3)
            garbage = os.path.join(tmp, "garbage.pt")
            with open(garbage, "wb") as f:
                f.write(b"not a checkpoint")
            with self.assertRaises(CheckpointError):
                load_checkpoint(garbage)
            foreign = os.path.join(tmp, "foreign.pt")
            torch.save({"header": {"format": "other"}}, foreign)
            with self.assertRaises(CheckpointError):
                load_checkpoint(foreign)


class TrainerTest(unittest.TestCase):
    @staticmethod
    def trainer(total_steps: int, seed: int = 3) -> Trainer:
        return Trainer(
            plant=PlantParams(),
            safety=published.safety_spec(),
            gain=published.gain(),
            agent=AgentConfig(hidden_sizes=[16, 16], batch_size=16),
            reward_cfg=RewardConfig(),
            training=TrainingSection(
                total_steps=total_steps,
                warmup_steps=20,
                max_episode_steps=50,
                eval_every=100,
                eval_episodes=2,
                eval_horizon=30,
                log_every=100,
            ),
            seed=seed,
        )

    def test_1_training_is_reproducible(self):
        logs = []
        with tempfile.TemporaryDirectory() as tmp:
            for run in ("a", "b"):
                out = os.path.join(tmp, run)
                self.trainer(200).train(out)
                with open(os.path.join(out, "training_log.csv"), "rb") as f:
                    training = f.read()
                with open(os.path.join(out, "eval_log.csv"), "rb") as f:
                    evaluation = f.read()
                logs.append((training, evaluation))
            self.assertEqual(logs[0], logs[1])
            self.assertEqual(len(read_csv(os.path.join(tmp, "a", "eval_log.csv"))), 2)

    def test_2_zero_steps(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = self.trainer(0).train(tmp)
            self.assertEqual(result.training_rows, [])
            self.assertTrue(os.path.exists(os.path.join(tmp, "checkpoint.pt")))
            self.assertEqual(read_csv(os.path.join(tmp, "training_log.csv")), [])

    def test_3_steps_to_threshold(self):
        rows = [[100, -3000.0, 1.0], [200, -1500.0, 0.5], [300, -1000.0, 1.0]]
        self.assertEqual(steps_to_threshold(rows, -2000.0), 300)
        self.assertEqual(steps_to_threshold(rows, -2000.0, require_safe=False), 200)
        self.assertIsNone(steps_to_threshold(rows, 0.0))


if __name__ == "__main__":
    unittest.main()
