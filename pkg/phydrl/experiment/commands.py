"""
Experiment commands. Each one writes its artifacts, `resolved_config.env`
and `manifest.json` under the output directory and returns a
`CommandResult` for the console.
"""

import json
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from phydrl.agents.ddpg import load_checkpoint
from phydrl.agents.rollout import actor_policy, rollout, zero_policy
from phydrl.agents.trainer import Trainer, TrainingResult, steps_to_threshold
from phydrl.analysis.theorem import (
    AuditReport,
    check_theorem,
    estimate_beta,
    invariance_rollout,
    lyapunov_audit,
    sample_envelope_states,
    summary_lines,
    write_report,
)
from phydrl.core.phy_core import EnvelopeGain, RewardVariant, contraction_margin
from phydrl.experiment import published
from phydrl.experiment.config import ExperimentConfig, config_for, write_resolved
from phydrl.plant.calibrate import FITTED_FIELDS, calibrate
from phydrl.plant.cartpole import ACTION_DIM, STATE_DIM, BoxRegion, EnvelopeRegion, sample_initial
from phydrl.safety.safety_sets import Envelope, build_normalized, envelope_in_safe_set
from phydrl.synthesis.lmi import SynthesisProblem, solution_from_gain, solve, verify
from phydrl.util.errors import ConfigError, Infeasible, NonFiniteLoss
from phydrl.util.files import COMPARE_COLUMNS, METRICS_COLUMNS, TRAJECTORY_COLUMNS, write_csv, write_manifest

logger = logging.getLogger(__name__)

PUBLISHED_TOL = 1e-3
GAIN_DIR = "gain"
CONFIGURATIONS = (
    ("ss_residual", RewardVariant.SAFETY_AND_STABILITY, True),
    ("s_residual", RewardVariant.STABILITY_ONLY, True),
    ("ss_no_residual", RewardVariant.SAFETY_AND_STABILITY, False),
    ("s_no_residual", RewardVariant.STABILITY_ONLY, False),
)


class CommandResult(NamedTuple):
    title: str
    lines: List[str]
    artifacts: List[Path]
    columns: Sequence[str] = ()
    rows: Sequence[Sequence] = ()


def _finish(out_dir: Path, command: str, artifacts: list) -> list:
    artifacts = [Path(a) for a in artifacts]
    return artifacts + [write_manifest(out_dir, command, artifacts)]


def _report_lines(report, envelope=None, radius: Optional[float] = None) -> List[str]:
    lines = [
        f"lmis: {'feasible' if report.feasible else 'infeasible'}",
        f"tolerance: {report.tol!r}",
        f"min_margin: {report.min_margin!r}",
        f"contraction_margin: {report.schur_margin!r}",
        f"box_margin: {report.box_margin!r}",
        f"q_margin: {report.q_margin!r}",
        f"diag_slacks: {report.diag_slacks}",
    ]
    if envelope is not None:
        lines.append(f"envelope_in_safe_set: {'holds' if envelope.holds else 'fails'}")
    if radius is not None:
        lines.append(f"spectral_radius: {radius!r}")
    return lines


def _write_json(path: Path, payload: dict) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=4)
    return path


def cmd_verify(cfg: ExperimentConfig, out_dir, gain_dir=None, verify_only: bool = False) -> CommandResult:
    """
    Evaluate the LMIs and the envelope-in-safe-set condition for a gain
    directory, or for the published envelope and gain with `verify_only`.

    Raises:
        Infeasible: An LMI is violated beyond the tolerance.
    """
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    ns = build_normalized(cfg.safety.spec())
    if verify_only or gain_dir is None:
        gain = published.gain()
        source = "published"
    else:
        gain = EnvelopeGain.load(gain_dir)
        source = str(gain_dir)
    problem = SynthesisProblem(A=gain.A, B=gain.B, alpha=gain.alpha, ns=ns)
    solution = solution_from_gain(gain.P, gain.F)
    report = verify(problem, solution.Q, solution.R, tol=PUBLISHED_TOL)
    envelope = envelope_in_safe_set(Envelope(P=gain.P), ns)

    payload = {"source": source, "lmi": report.model_dump(), "envelope": envelope.model_dump()}
    artifacts.append(_write_json(out_dir / "lmi_report.json", payload))
    artifacts = _finish(out_dir, "verify", artifacts)
    lines = _report_lines(report, envelope, solution.spectral_radius(problem))
    if not report.feasible:
        raise Infeasible(f"Gain from {source} violates the LMIs (min margin {report.min_margin:.3e})")
    return CommandResult(f"Verification of {source} gain", lines, artifacts)


def cmd_synth(cfg: ExperimentConfig, out_dir, verify_only: bool = False) -> CommandResult:
    """
    Solve the LMIs for the configured nominal model and safe set and write
    the gain files plus `lmi_report.json`.

    Raises:
        Infeasible: The solver found no point with the requested margin.
    """
    if verify_only:
        return cmd_verify(cfg, out_dir, verify_only=True)
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    problem = cfg.synthesis_problem()
    solution = solve(problem, cfg.synthesis)
    gain = EnvelopeGain.from_solution(problem, solution)
    artifacts += gain.save(out_dir / GAIN_DIR)

    report = verify(problem, solution.Q, solution.R)
    envelope = envelope_in_safe_set(Envelope(P=solution.P), problem.ns)
    radius = solution.spectral_radius(problem)
    payload = {
        "source": cfg.synthesis.model,
        "lmi": report.model_dump(),
        "envelope": envelope.model_dump(),
        "spectral_radius": radius,
        "contraction_margin": contraction_margin(gain),
    }
    artifacts.append(_write_json(out_dir / "lmi_report.json", payload))
    lines = _report_lines(report, envelope, radius) + [f"F: {solution.F.tolist()}"]
    return CommandResult(f"Synthesis at alpha={problem.alpha}", lines, _finish(out_dir, "synth", artifacts))


def resolve_gain(cfg: ExperimentConfig, out_dir, gain_dir=None, allow_synthesis: bool = False) -> EnvelopeGain:
    """
    The gain of a run: `gain_dir` if given, else a previous synthesis in
    ``out_dir/gain``, else (when allowed) a fresh in-process synthesis.
    """
    if gain_dir is not None:
        return EnvelopeGain.load(gain_dir)
    local = Path(out_dir) / GAIN_DIR
    if (local / "P.txt").exists():
        return EnvelopeGain.load(local)
    if not allow_synthesis:
        raise ConfigError("No gain files found; run `phydrl synth` first or pass --gain-dir")
    logger.info("No gain files given; synthesizing in-process")
    problem = cfg.synthesis_problem()
    gain = EnvelopeGain.from_solution(problem, solve(problem, cfg.synthesis))
    gain.save(local)
    return gain


def _train(cfg: ExperimentConfig, out_dir: Path, gain: EnvelopeGain) -> TrainingResult:
    trainer = Trainer(
        cfg.plant,
        cfg.safety.spec(),
        gain,
        cfg.agent,
        cfg.reward,
        cfg.training,
        seed=cfg.experiment.seed,
    )
    try:
        return trainer.train(out_dir)
    except NonFiniteLoss as e:
        diagnostics = {"error": str(e), "seed": cfg.experiment.seed, **e.diagnostics}
        _write_json(out_dir / "diagnostics.json", diagnostics)
        raise


def cmd_train(cfg: ExperimentConfig, out_dir, gain_dir=None) -> CommandResult:
    """
    Train the data-driven controller and write `checkpoint.pt`,
    `training_log.csv` and `eval_log.csv`.

    Raises:
        NonFiniteLoss: Training diverged; `diagnostics.json` is written first.
    """
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    allow = not cfg.residual and cfg.reward.reward_variant == RewardVariant.STABILITY_ONLY
    gain = resolve_gain(cfg, out_dir, gain_dir, allow_synthesis=allow)
    result = _train(cfg, out_dir, gain)
    artifacts += result.artifacts

    lines = [
        f"steps: {cfg.training.total_steps}",
        f"episodes: {len(result.training_rows)}",
        f"reward: {cfg.reward.reward_variant.value}",
        f"residual: {str(cfg.residual).lower()}",
    ]
    if result.eval_rows:
        last = result.eval_rows[-1]
        lines += [f"final_eval_return: {last[1]!r}", f"final_eval_safe_fraction: {last[2]!r}"]
    return CommandResult(f"Training with seed {cfg.experiment.seed}", lines, _finish(out_dir, "train", artifacts))


def _initial_states(cfg: ExperimentConfig, gain: EnvelopeGain, count: int, seed: int) -> List[np.ndarray]:
    if cfg.training.init_region == "box":
        region = BoxRegion(low=cfg.training.init_low, high=cfg.training.init_high)
    else:
        region = EnvelopeRegion(P=gain.P, c=cfg.training.init_level)
    rng = np.random.default_rng(seed)
    return [sample_initial(region, rng) for _ in range(count)]


def cmd_eval(cfg: ExperimentConfig, out_dir, checkpoint, gain_dir=None) -> CommandResult:
    """
    Roll the model-based controller and the trained policy from matched
    initial states on the friction plant and write per-step trajectories and
    terminal metrics.
    """
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    params = load_checkpoint(checkpoint, STATE_DIM, ACTION_DIM)
    gain = resolve_gain(cfg, out_dir, gain_dir)
    spec = cfg.safety.spec()
    reward_cfg = cfg.reward.model_copy(update={"reward_variant": RewardVariant.SAFETY_AND_STABILITY})
    trajectory_dir = out_dir / "trajectories"
    trajectory_dir.mkdir(parents=True, exist_ok=True)

    controllers = (
        ("model_based", zero_policy, True),
        ("phydrl", actor_policy(params), cfg.residual),
    )
    metrics, exits = [], {name: 0 for name, _, _ in controllers}
    for episode, s0 in enumerate(_initial_states(cfg, gain, cfg.eval.episodes, cfg.eval.seed)):
        for name, policy, residual in controllers:
            trajectory = rollout(policy, cfg.plant, s0, cfg.eval.horizon, gain=gain, residual=residual, safety=spec)
            path = trajectory_dir / f"{name}_{episode:03d}.csv"
            artifacts.append(write_csv(path, TRAJECTORY_COLUMNS, trajectory.rows(gain, reward_cfg)))
            final = trajectory.states[-1]
            exited = trajectory.exit_step is not None
            exits[name] += exited
            metrics.append(
                [
                    name,
                    episode,
                    trajectory.length,
                    exited,
                    "" if trajectory.exit_step is None else trajectory.exit_step,
                    abs(float(final[0])),
                    abs(float(final[2])),
                    float(np.sum(trajectory.rewards(gain, reward_cfg))),
                ]
            )
    artifacts.append(write_csv(out_dir / "eval_metrics.csv", METRICS_COLUMNS, metrics))
    lines = [f"{name}_safety_exits: {count}/{cfg.eval.episodes}" for name, count in exits.items()]
    return CommandResult(
        "Evaluation on the friction plant",
        lines,
        _finish(out_dir, "eval", artifacts),
        METRICS_COLUMNS,
        metrics,
    )


def _merge_audits(audits: List[AuditReport]) -> AuditReport:
    audits = [audit for audit in audits if audit.steps]
    if not audits:
        return AuditReport(max_residual=0.0, slack_min=0.0, slack_max=0.0, steps=0)
    return AuditReport(
        max_residual=max(audit.max_residual for audit in audits),
        slack_min=min(audit.slack_min for audit in audits),
        slack_max=max(audit.slack_max for audit in audits),
        steps=sum(audit.steps for audit in audits),
    )


def cmd_analyze(cfg: ExperimentConfig, out_dir, checkpoint, gain_dir=None) -> CommandResult:
    """
    Estimate beta from rollouts of the trained policy, check both theorem
    conditions over an envelope sample, roll invariance trajectories and
    audit the Lyapunov accounting. Condition failures are reported, not raised.

    Raises:
        InsufficientData: The rollouts produced too few transitions for beta.
    """
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    params = load_checkpoint(checkpoint, STATE_DIM, ACTION_DIM)
    gain = resolve_gain(cfg, out_dir, gain_dir)
    section = cfg.analysis
    seed = cfg.experiment.seed
    policy = actor_policy(params)
    spec = cfg.safety.spec()

    starts = sample_envelope_states(gain, section.beta_episodes, seed)
    trajectories = [
        rollout(policy, cfg.plant, s0, section.beta_horizon, gain=gain, residual=cfg.residual, safety=spec)
        for s0 in starts
    ]
    beta = estimate_beta(trajectories, gain, section.beta_kind, section.headroom, section.min_transitions)
    theorem = check_theorem(beta, gain, sample_envelope_states(gain, section.envelope_samples, seed + 1))
    invariance = invariance_rollout(
        policy,
        gain,
        cfg.plant,
        section.rollout_count,
        section.rollout_horizon,
        seed=seed + 2,
        boundary_starts=section.boundary_starts,
        workers=section.workers,
        theorem=theorem,
        residual=cfg.residual,
    )
    audit = _merge_audits([lyapunov_audit(trajectory, gain) for trajectory in trajectories])
    artifacts += write_report(out_dir, beta, theorem, invariance, audit)
    return CommandResult(
        "Safety and stability analysis",
        summary_lines(beta, theorem, invariance, audit),
        _finish(out_dir, "analyze", artifacts),
    )


def cmd_compare(cfg: ExperimentConfig, out_dir, gain_dir=None) -> CommandResult:
    """
    Train the four reward/residual configurations over the configured seeds
    and compare the steps each needs to reach the evaluation threshold.
    """
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    gain = resolve_gain(cfg, out_dir, gain_dir, allow_synthesis=True)
    rows, medians = [], {}
    for name, variant, residual in CONFIGURATIONS:
        steps = []
        for seed in cfg.experiment.seeds:
            run_cfg = config_for(
                cfg,
                reward={"reward_variant": variant},
                training={"residual": residual},
                experiment={"seed": seed},
            )
            run_dir = out_dir / name / f"seed_{seed}"
            artifacts.append(write_resolved(run_cfg, run_dir))
            result = _train(run_cfg, run_dir, gain)
            reached = steps_to_threshold(result.eval_rows, cfg.compare.threshold)
            steps.append(np.inf if reached is None else reached)
            rows.append([name, seed, "" if reached is None else reached])
            artifacts += result.artifacts
        medians[name] = float(np.median(steps)) if steps else np.inf
    artifacts.append(write_csv(out_dir / "compare.csv", COMPARE_COLUMNS, rows))

    ordering = sorted(medians, key=lambda name: medians[name])
    lines = [f"threshold: {cfg.compare.threshold!r}"]
    lines += [f"median_steps_{name}: {medians[name]!r}" for name in ordering]
    lines.append(f"ordering: {' < '.join(ordering)}")
    lines.append(
        "ss_residual_faster_than_s_no_residual: "
        + str(medians["ss_residual"] < medians["s_no_residual"]).lower()
    )
    return CommandResult("Training-speed comparison", lines, _finish(out_dir, "compare", artifacts), COMPARE_COLUMNS, rows)


def cmd_calibrate(cfg: ExperimentConfig, out_dir) -> CommandResult:
    """Fit plant masses and pole length to the published nominal model and write `calibrated_plant.env`."""
    out_dir = Path(out_dir)
    artifacts = [write_resolved(cfg, out_dir)]
    result = calibrate(published.A, published.B, cfg.plant)
    path = out_dir / "calibrated_plant.env"
    path.write_text(
        "".join(f"plant.{name}={getattr(result.params, name)!r}\n" for name in FITTED_FIELDS),
        encoding="utf-8",
    )
    artifacts.append(path)
    lines = [f"{name}: {getattr(result.params, name)!r}" for name in FITTED_FIELDS]
    lines.append(f"max_relative_error: {result.max_relative_error!r}")
    rows = [[entry, error] for entry, error in result.relative_errors.items()]
    return CommandResult(
        "Plant calibration",
        lines,
        _finish(out_dir, "calibrate", artifacts),
        ["entry", "relative_error"],
        rows,
    )
