import json
import os
import sys
import tempfile
import unittest
from unittest import mock

sys.path.insert(0, "..")

from phydrl.agents.ddpg import AgentConfig, AgentParams, save_checkpoint
from phydrl.agents.trainer import Trainer
from phydrl.analysis.theorem import invariance_rollout
from phydrl.cli import EXIT_BAD_CONFIG, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, EXIT_TRAINING_ABORT, main
from phydrl.core.phy_core import EnvelopeGain, RewardVariant
from phydrl.experiment import commands, published
from phydrl.experiment.config import RESOLVED_CONFIG, config_for, flatten, load_config, write_resolved
from phydrl.messages.report_output import ReportOutput, console
from phydrl.util.errors import ConfigError, NonFiniteLoss
from phydrl.util.files import file_sha256, read_csv

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs")

SMALL_RUN = """
experiment.name=small
agent.hidden_sizes=[16, 16]
agent.batch_size=16
training.total_steps={steps}
training.warmup_steps=20
training.max_episode_steps=40
training.eval_every=50
training.eval_episodes=1
training.eval_horizon=20
training.log_every=50
eval.episodes=2
eval.horizon={horizon}
analysis.beta_episodes=5
analysis.beta_horizon=40
analysis.min_transitions=20
analysis.envelope_samples=500
analysis.rollout_count=3
analysis.rollout_horizon=30
analysis.workers=2
"""


def write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


class ConfigTest(unittest.TestCase):
    def test_cartpole_config(self):
        cfg = load_config(os.path.join(CONFIG_DIR, "cartpole.env"), environ={})
        self.assertEqual(cfg.plant.cart_mass, 0.94)
        self.assertEqual(cfg.safety.D, [[1, 0, 0, 0], [0, 0, 1, 0]])
        self.assertEqual(cfg.alpha, 0.8)
        self.assertEqual(cfg.reward.reward_variant, RewardVariant.SAFETY_AND_STABILITY)
        self.assertTrue(cfg.residual)
        self.assertEqual(cfg.synthesis_problem().n, 4)

    def test_robustness_config(self):
        cfg = load_config(os.path.join(CONFIG_DIR, "robustness.env"), environ={})
        self.assertEqual(cfg.plant.friction_scale, 100.0)

    def test_defaults_without_file(self):
        cfg = load_config(environ={})
        self.assertEqual(cfg.training.total_steps, 200_000)
        self.assertEqual(cfg.agent.gamma, 0.99)

    def test_invalid_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            for text in ("plant.bogus=1\n", "nosuchsection.key=1\n", "synthesis.alpha=1.5\n", "alpha=0.5\n"):
                path = write_text(os.path.join(tmp, "bad.env"), text)
                with self.assertRaises(ConfigError, msg=text):
                    load_config(path, environ={})
        with self.assertRaises(ConfigError):
            load_config(os.path.join(CONFIG_DIR, "missing.env"), environ={})

    def test_wrong_safety_dimension(self):
        with self.assertRaises(ConfigError):
            load_config(environ={"PHYDRL_SAFETY__D": "[[1, 0], [0, 1]]"})

    def test_environment_overrides(self):
        environ = {
            "PHYDRL_PLANT__FRICTION_SCALE": "3",
            "PHYDRL_SAFETY__V_UPPER": "[0.5, 0.3]",
            "PHYDRL_TRAINING__RESIDUAL": "false",
            "PHYDRL_SLOW_TESTS": "1",
        }
        cfg = load_config(os.path.join(CONFIG_DIR, "cartpole.env"), environ=environ, seed=7)
        self.assertEqual(cfg.plant.friction_scale, 3.0)
        self.assertEqual(cfg.safety.v_upper, [0.5, 0.3])
        self.assertFalse(cfg.residual)
        self.assertEqual(cfg.experiment.seed, 7)
        with self.assertRaises(ConfigError):
            load_config(environ={"PHYDRL_PLANT__BOGUS": "1"})

    def test_resolved_config_round_trip(self):
        cfg = load_config(os.path.join(CONFIG_DIR, "cartpole.env"), environ={"PHYDRL_AGENT__TAU": "0.01"})
        with tempfile.TemporaryDirectory() as tmp:
            path = write_resolved(cfg, tmp)
            self.assertEqual(os.path.basename(path), RESOLVED_CONFIG)
            self.assertEqual(flatten(load_config(path, environ={})), flatten(cfg))

            changed = config_for(cfg, plant={"friction_scale": 2.0})
            with self.assertLogs("phydrl.experiment.config", level="WARNING") as logs:
                write_resolved(changed, tmp)
            self.assertIn("friction_scale", "\n".join(logs.output))

    def test_action_scale_follows_force_limit(self):
        cfg = load_config(environ={"PHYDRL_PLANT__FORCE_LIMIT": "10"})
        self.assertEqual(cfg.agent.action_scale, 10.0)
        self.assertEqual(config_for(cfg, plant={"force_limit": 12.0}).agent.action_scale, 12.0)
        same = {"PHYDRL_PLANT__FORCE_LIMIT": "10", "PHYDRL_AGENT__ACTION_SCALE": "10"}
        self.assertEqual(load_config(environ=same).agent.action_scale, 10.0)
        with self.assertRaises(ConfigError):
            load_config(environ={"PHYDRL_PLANT__FORCE_LIMIT": "10", "PHYDRL_AGENT__ACTION_SCALE": "15"})

    def test_config_for_revalidates(self):
        cfg = load_config(environ={})
        self.assertEqual(config_for(cfg, experiment={"seed": 3}).experiment.seed, 3)
        with self.assertRaises(ValueError):
            config_for(cfg, synthesis={"alpha": 2.0})


class ReportOutputTest(unittest.TestCase):
    def test_status_colors_and_table(self):
        lines = ["verdict: holds", "lmis: infeasible", "steps: 3"]
        report = ReportOutput("analysis", "Check", lines, ["name", "value"], [["beta", 1.5], ["bound", None]])
        self.assertEqual([report.status_color(line) for line in report.lines], ["green", "red", "default"])
        self.assertEqual(ReportOutput("system", "Error", ["error: boom"]).status_color("error: boom"), "red")
        with console.capture() as capture:
            report.cprint()
        text = capture.get()
        self.assertIn("ANALYSIS | Check", text)
        self.assertIn("verdict: holds", text)
        self.assertIn("1.5", text)


class CliTest(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name
        self.gain_dir = os.path.join(self.tmp, "published_gain")
        published.gain().save(self.gain_dir)

    def tearDown(self):
        self._tmp.cleanup()

    def small_config(self, steps: int = 0, horizon: int = 0) -> str:
        return write_text(os.path.join(self.tmp, "small.env"), SMALL_RUN.format(steps=steps, horizon=horizon))

    def checkpoint(self) -> str:
        return str(save_checkpoint(AgentParams(AgentConfig(hidden_sizes=[8, 8]), 4), os.path.join(self.tmp, "ckpt.pt")))

    def test_verify_published(self):
        out = os.path.join(self.tmp, "verify")
        self.assertEqual(main(["synth", "--verify-only", "--out", out]), EXIT_INFEASIBLE)
        with open(os.path.join(out, "lmi_report.json"), encoding="utf-8") as f:
            report = json.load(f)
        self.assertFalse(report["lmi"]["feasible"])
        self.assertAlmostEqual(report["lmi"]["schur_margin"], -0.0556, delta=1e-3)
        self.assertEqual(report["source"], "published")

        with open(os.path.join(out, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["command"], "verify")
        for entry in manifest["artifacts"]:
            self.assertEqual(entry["sha256"], file_sha256(os.path.join(out, entry["path"])))

    def test_synth_then_verify(self):
        out = os.path.join(self.tmp, "synth")
        self.assertEqual(main(["synth", "--out", out]), EXIT_OK)
        with open(os.path.join(out, "lmi_report.json"), encoding="utf-8") as f:
            report = json.load(f)
        self.assertTrue(report["lmi"]["feasible"])
        self.assertLessEqual(report["spectral_radius"], 0.8**0.5 + 1e-6)
        checked = os.path.join(self.tmp, "synth_verify")
        self.assertEqual(main(["verify", "--gain-dir", os.path.join(out, "gain"), "--out", checked]), EXIT_OK)

    def test_verify_rejects_bad_gain(self):
        bad = os.path.join(self.tmp, "bad_gain")
        EnvelopeGain(P=[[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]],
                     F=[[0.0, 0.0, 0.0, 0.0]], alpha=0.8, A=published.A, B=published.B).save(bad)
        out = os.path.join(self.tmp, "verify_bad")
        self.assertEqual(main(["verify", "--gain-dir", bad, "--out", out]), EXIT_INFEASIBLE)
        self.assertTrue(os.path.exists(os.path.join(out, "lmi_report.json")))

    def test_bad_config_exit_code(self):
        path = write_text(os.path.join(self.tmp, "bad.env"), "synthesis.alpha=1.5\n")
        self.assertEqual(main(["synth", "--config", path, "--out", self.tmp]), EXIT_BAD_CONFIG)

    def test_missing_gain_exit_code(self):
        out = os.path.join(self.tmp, "no_gain")
        self.assertEqual(main(["train", "--config", self.small_config(), "--out", out]), EXIT_BAD_CONFIG)

    def test_missing_checkpoint_exit_code(self):
        missing = os.path.join(self.tmp, "nothing.pt")
        args = ["eval", "--checkpoint", missing, "--gain-dir", self.gain_dir, "--out", self.tmp]
        self.assertEqual(main(args), EXIT_ERROR)

    def test_train_zero_steps(self):
        out = os.path.join(self.tmp, "train")
        args = ["train", "--config", self.small_config(), "--gain-dir", self.gain_dir, "--out", out]
        self.assertEqual(main(args), EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(out, "checkpoint.pt")))
        self.assertEqual(read_csv(os.path.join(out, "training_log.csv")), [])
        self.assertTrue(os.path.exists(os.path.join(out, RESOLVED_CONFIG)))

    def test_train_is_reproducible(self):
        logs = []
        for run in ("a", "b"):
            out = os.path.join(self.tmp, run)
            args = ["train", "--config", self.small_config(steps=150), "--gain-dir", self.gain_dir, "--out", out]
            self.assertEqual(main(args + ["--seed", "4"]), EXIT_OK)
            with open(os.path.join(out, "training_log.csv"), "rb") as f:
                logs.append(f.read())
        self.assertEqual(logs[0], logs[1])

    def test_train_abort_writes_diagnostics(self):
        out = os.path.join(self.tmp, "abort")
        args = ["train", "--config", self.small_config(steps=10), "--gain-dir", self.gain_dir, "--out", out]
        failure = NonFiniteLoss("critic loss is inf", {"loss": "critic"})
        with mock.patch.object(Trainer, "train", side_effect=failure):
            self.assertEqual(main(args), EXIT_TRAINING_ABORT)
        with open(os.path.join(out, "diagnostics.json"), encoding="utf-8") as f:
            diagnostics = json.load(f)
        self.assertEqual(diagnostics["loss"], "critic")
        self.assertEqual(diagnostics["seed"], 0)

    def test_eval_zero_horizon(self):
        out = os.path.join(self.tmp, "eval")
        args = ["eval", "--config", self.small_config(), "--checkpoint", self.checkpoint()]
        self.assertEqual(main(args + ["--gain-dir", self.gain_dir, "--out", out]), EXIT_OK)
        for name in ("model_based_000", "model_based_001", "phydrl_000", "phydrl_001"):
            self.assertEqual(read_csv(os.path.join(out, "trajectories", f"{name}.csv")), [])
        metrics = read_csv(os.path.join(out, "eval_metrics.csv"))
        self.assertEqual(len(metrics), 4)
        self.assertTrue(all(row["steps"] == "0" and row["safety_exit"] == "0" for row in metrics))

    def test_eval_trajectories(self):
        out = os.path.join(self.tmp, "eval_short")
        args = ["eval", "--config", self.small_config(horizon=25), "--checkpoint", self.checkpoint()]
        self.assertEqual(main(args + ["--gain-dir", self.gain_dir, "--out", out]), EXIT_OK)
        rows = read_csv(os.path.join(out, "trajectories", "model_based_000.csv"))
        self.assertGreater(len(rows), 0)
        self.assertEqual(float(rows[0]["a_drl"]), 0.0)
        self.assertEqual(list(rows[0]), ["step", "x", "v", "theta", "omega", "a_phy", "a_drl", "a_total", "reward", "V", "r_term"])

    def test_analyze_rollouts_follow_residual_setting(self):
        text = SMALL_RUN.format(steps=0, horizon=0) + "training.residual=false\nanalysis.min_transitions=1\n"
        path = write_text(os.path.join(self.tmp, "no_residual.env"), text)
        out = os.path.join(self.tmp, "analyze_no_residual")
        args = ["analyze", "--config", path, "--checkpoint", self.checkpoint(), "--gain-dir", self.gain_dir, "--out", out]
        with mock.patch.object(commands, "invariance_rollout", wraps=invariance_rollout) as rollouts:
            self.assertEqual(main(args), EXIT_OK)
        self.assertIs(rollouts.call_args.kwargs["residual"], False)

    def test_analyze(self):
        out = os.path.join(self.tmp, "analyze")
        args = ["analyze", "--config", self.small_config(), "--checkpoint", self.checkpoint()]
        self.assertEqual(main(args + ["--gain-dir", self.gain_dir, "--out", out]), EXIT_OK)
        self.assertEqual(len(read_csv(os.path.join(out, "analysis.csv"))), 3)
        with open(os.path.join(out, "analysis_summary.txt"), encoding="utf-8") as f:
            summary = f.read()
        self.assertIn("verdict: ", summary)
        self.assertIn("audit_max_residual: ", summary)


if __name__ == "__main__":
    unittest.main()
