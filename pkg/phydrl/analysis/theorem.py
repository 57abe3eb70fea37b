"""
Empirical checks of the perturbation bound and of the two conditions that
certify envelope invariance and asymptotic stability of a trained policy.

For a bound ``beta(s)`` on the data-driven term ``r(s, a)``:

* safety holds when ``beta(s) / (1 - alpha) < 1`` on every sampled state,
* stability holds when ``beta(s) + (alpha - 1) V(s) < 0`` on every sampled state.

Both are evaluated over a dense sample of the envelope. Because `beta` is
estimated from finite data, the reports carry the sample count and headroom
rather than claiming soundness.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from phydrl.agents.rollout import Policy, Trajectory, rollout
from phydrl.core.phy_core import EnvelopeGain, contraction_slack, lyapunov_value, r_term
from phydrl.plant.linear import Plant
from phydrl.safety.safety_sets import Envelope, sample_in_envelope
from phydrl.util.errors import InsufficientData
from phydrl.util.files import write_csv
from phydrl.util.validators import Matrix, as_state

logger = logging.getLogger(__name__)

MIN_TRANSITIONS = 100
ENVELOPE_TOL = 1e-9


class BetaKind(str, Enum):
    CONSTANT = "constant"
    QUADRATIC = "quadratic"


class BetaEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: BetaKind
    const_bound: float = 0.0
    quad_matrix: Optional[Matrix] = None
    sample_count: int
    max_observed_r: float
    headroom: float
    excluded_zero_states: int = 0

    def bound(self, states) -> np.ndarray:
        """``beta(s)`` for each row of `states`."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.kind == BetaKind.CONSTANT:
            return np.full(states.shape[0], self.const_bound)
        return np.einsum("ki,ij,kj->k", states, self.quad_matrix, states)


class TheoremReport(BaseModel):
    safety_condition_holds: bool
    stability_condition_holds: bool
    worst_safety_ratio: float
    worst_stability_margin: float
    violating_states: List[List[float]]
    sample_count: int

    @property
    def verdict(self) -> str:
        if self.safety_condition_holds and self.stability_condition_holds:
            return "safety_and_stability"
        if self.safety_condition_holds:
            return "safety_only"
        if self.stability_condition_holds:
            return "stability_only"
        return "none"


class TrajectoryRecord(BaseModel):
    index: int
    initial_value: float
    boundary_start: bool
    max_value: float
    exit_step: Optional[int]
    v_decreasing: bool


class InvarianceReport(BaseModel):
    records: List[TrajectoryRecord]
    horizon: int
    beta_underestimate: bool = False

    @property
    def exits(self) -> int:
        return sum(record.exit_step is not None for record in self.records)

    @property
    def boundary_starts(self) -> int:
        return sum(record.boundary_start for record in self.records)


class AuditReport(BaseModel):
    max_residual: float
    slack_min: float
    slack_max: float
    steps: int


class AnalysisSection(BaseModel):
    beta_kind: BetaKind = BetaKind.CONSTANT
    headroom: float = Field(0.05, ge=0.0)
    min_transitions: int = Field(MIN_TRANSITIONS, ge=1)
    beta_episodes: int = Field(20, ge=1)
    beta_horizon: int = Field(200, ge=1)
    envelope_samples: int = Field(10_000, ge=1)
    rollout_count: int = Field(20, ge=1)
    rollout_horizon: int = Field(1_000, ge=0)
    boundary_starts: int = Field(1, ge=0)
    workers: int = Field(4, ge=1)


def _state_pairs(trajectories: Sequence) -> tuple:
    current, following = [], []
    for trajectory in trajectories:
        states = trajectory.states if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=np.float64)
        if states.shape[0] >= 2:
            current.append(states[:-1])
            following.append(states[1:])
    if not current:
        return np.zeros((0, 0)), np.zeros((0, 0))
    return np.concatenate(current), np.concatenate(following)


def _vech_features(s: np.ndarray) -> np.ndarray:
    n = s.shape[1]
    rows, cols = np.triu_indices(n)
    weights = np.where(rows == cols, 1.0, 2.0)
    return s[:, rows] * s[:, cols] * weights


def _unvech(m: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    M[np.triu_indices(n)] = m
    return M + np.triu(M, 1).T


def estimate_beta(
    trajectories: Sequence,
    gain: EnvelopeGain,
    kind: BetaKind = BetaKind.CONSTANT,
    headroom: float = 0.05,
    min_transitions: int = MIN_TRANSITIONS,
) -> BetaEstimate:
    """
    Bound the data-driven term ``r`` observed along `trajectories`.

    The constant bound is ``max r + headroom |max r|`` (plus a tiny epsilon so
    the bound is strict). The quadratic bound fits ``r ~ s^T M s`` by least
    squares on ``vech(M)``, clips `M` to PSD and scales it until it dominates
    every sample with ``r > 0``; zero states cannot be dominated by a
    quadratic form and are excluded and counted.

    Raises:
        InsufficientData: Fewer than `min_transitions` transitions.
    """
    s, s_next = _state_pairs(trajectories)
    count = s.shape[0]
    if count < min_transitions:
        raise InsufficientData(f"{count} transitions, at least {min_transitions} required")
    r = np.atleast_1d(r_term(gain, s, s_next))
    max_r = float(np.max(r))

    if kind == BetaKind.CONSTANT:
        estimate = BetaEstimate(
            kind=kind,
            const_bound=max_r + headroom * abs(max_r) + 1e-12,
            sample_count=count,
            max_observed_r=max_r,
            headroom=headroom,
        )
    else:
        n = gain.n
        nonzero = np.any(s != 0.0, axis=1)
        m, *_ = np.linalg.lstsq(_vech_features(s[nonzero]), r[nonzero], rcond=None)
        w, V = np.linalg.eigh(_unvech(m, n))
        M = (V * np.clip(w, 0.0, None)) @ V.T
        M = 0.5 * (M + M.T) + 1e-12 * max(1.0, float(np.trace(M))) * np.eye(n)
        positive = nonzero & (r > 0.0)
        if np.any(positive):
            q = np.einsum("ki,ij,kj->k", s[positive], M, s[positive])
            M = (1.0 + headroom) * float(np.max(r[positive] / q)) * M
        else:
            M = np.zeros((n, n))
        estimate = BetaEstimate(
            kind=kind,
            quad_matrix=M,
            sample_count=count,
            max_observed_r=max_r,
            headroom=headroom,
            excluded_zero_states=int(np.sum(~nonzero)),
        )
    logger.info(f"Estimated {kind.value} beta from {count} transitions (max observed r {max_r:.6g})")
    return estimate


def check_theorem(
    beta: BetaEstimate,
    gain: EnvelopeGain,
    states,
    max_violations: int = 100,
) -> TheoremReport:
    states = np.atleast_2d(as_state(states, gain.n))
    bound = beta.bound(states)
    ratio = bound / (1.0 - gain.alpha)
    margin = bound + (gain.alpha - 1.0) * np.atleast_1d(lyapunov_value(gain.P, states))
    violating = (ratio >= 1.0) | (margin >= 0.0)
    return TheoremReport(
        safety_condition_holds=bool(np.all(ratio < 1.0)),
        stability_condition_holds=bool(np.all(margin < 0.0)),
        worst_safety_ratio=float(np.max(ratio)),
        worst_stability_margin=float(np.max(margin)),
        violating_states=states[violating][:max_violations].tolist(),
        sample_count=states.shape[0],
    )


def sample_envelope_states(
    gain: EnvelopeGain,
    count: int,
    seed: int = 0,
    boundary_starts: int = 0,
) -> np.ndarray:
    """`count` states inside the envelope, the first `boundary_starts` on its surface."""
    on_boundary = np.arange(count) < boundary_starts
    return sample_in_envelope(Envelope(P=gain.P), count, np.random.default_rng(seed), on_boundary=on_boundary)


def _record(index: int, trajectory: Trajectory, gain: EnvelopeGain, boundary_start: bool) -> TrajectoryRecord:
    values = np.atleast_1d(lyapunov_value(gain.P, trajectory.states))
    outside = np.flatnonzero(values > 1.0 + ENVELOPE_TOL)
    steps = np.diff(values)
    return TrajectoryRecord(
        index=index,
        initial_value=float(values[0]),
        boundary_start=boundary_start,
        max_value=float(np.max(values)),
        exit_step=int(outside[0]) if outside.size else None,
        v_decreasing=bool(np.all(steps <= ENVELOPE_TOL * max(1.0, float(values[0])))),
    )


def invariance_rollout(
    policy: Policy,
    gain: EnvelopeGain,
    plant: Plant,
    init_count: int,
    horizon: int,
    seed: int = 0,
    boundary_starts: int = 1,
    workers: int = 4,
    theorem: Optional[TheoremReport] = None,
    residual: bool = True,
) -> InvarianceReport:
    """
    Roll `init_count` trajectories from states sampled in the envelope under
    ``policy(s) + F s`` (or `policy` alone without `residual`) and record
    the largest ``s^T P s`` and the first exit of each. Pass the same
    `residual` the beta rollouts used so both describe one controller.

    Trajectories run on a thread pool; each worker owns its state and the
    reduction follows submission order. When `theorem` reports the safety
    condition holding and a trajectory still exits, the report is flagged as a
    beta underestimate.
    """
    starts = sample_envelope_states(gain, init_count, seed, boundary_starts)

    def run(index: int) -> TrajectoryRecord:
        trajectory = rollout(policy, plant, starts[index], horizon, gain=gain, residual=residual, stop_on_exit=False)
        return _record(index, trajectory, gain, index < boundary_starts)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(run, index) for index in range(init_count)]
        records = [future.result() for future in futures]

    report = InvarianceReport(records=records, horizon=horizon)
    if theorem is not None and theorem.safety_condition_holds and report.exits > 0:
        logger.warning(f"{report.exits} trajectories left the envelope although the safety condition holds")
        report = report.model_copy(update={"beta_underestimate": True})
    return report


def lyapunov_audit(trajectory, gain: EnvelopeGain) -> AuditReport:
    """
    Check ``V(s') - V(s) = r + (alpha - 1) V(s) + slack(s)`` along a logged
    trajectory, where ``slack(s) = s^T A_bar^T P A_bar s - alpha s^T P s``.
    """
    s, s_next = _state_pairs([trajectory])
    if s.shape[0] == 0:
        return AuditReport(max_residual=0.0, slack_min=0.0, slack_max=0.0, steps=0)
    V = np.atleast_1d(lyapunov_value(gain.P, s))
    V_next = np.atleast_1d(lyapunov_value(gain.P, s_next))
    slack = np.atleast_1d(contraction_slack(gain, s))
    term = np.atleast_1d(r_term(gain, s, s_next))
    residual = np.abs(V_next - V - term - (gain.alpha - 1.0) * V - slack)
    return AuditReport(
        max_residual=float(np.max(residual)),
        slack_min=float(np.min(slack)),
        slack_max=float(np.max(slack)),
        steps=s.shape[0],
    )


INVARIANCE_COLUMNS = ["trajectory", "initial_V", "boundary_start", "max_V", "exit_step", "V_decreasing"]


def summary_lines(
    beta: BetaEstimate,
    theorem: TheoremReport,
    invariance: Optional[InvarianceReport] = None,
    audit: Optional[AuditReport] = None,
) -> List[str]:
    lines = [
        f"beta_kind: {beta.kind.value}",
        f"beta_sample_count: {beta.sample_count}",
        f"beta_headroom: {beta.headroom!r}",
        f"max_observed_r: {beta.max_observed_r!r}",
    ]
    if beta.kind == BetaKind.CONSTANT:
        lines.append(f"beta_bound: {beta.const_bound!r}")
    else:
        lines.append(f"beta_excluded_zero_states: {beta.excluded_zero_states}")
    lines += [
        f"envelope_samples: {theorem.sample_count}",
        f"safety_condition: {'holds' if theorem.safety_condition_holds else 'fails'}",
        f"stability_condition: {'holds' if theorem.stability_condition_holds else 'fails'}",
        f"worst_safety_ratio: {theorem.worst_safety_ratio!r}",
        f"worst_stability_margin: {theorem.worst_stability_margin!r}",
        f"verdict: {theorem.verdict}",
    ]
    if invariance is not None:
        lines += [
            f"invariance_trajectories: {len(invariance.records)}",
            f"invariance_horizon: {invariance.horizon}",
            f"envelope_exits: {invariance.exits}",
            f"beta_underestimate: {str(invariance.beta_underestimate).lower()}",
        ]
    if audit is not None:
        lines += [
            f"audit_steps: {audit.steps}",
            f"audit_max_residual: {audit.max_residual!r}",
            f"audit_slack_min: {audit.slack_min!r}",
            f"audit_slack_max: {audit.slack_max!r}",
        ]
    return lines


def write_report(
    out_dir,
    beta: BetaEstimate,
    theorem: TheoremReport,
    invariance: Optional[InvarianceReport] = None,
    audit: Optional[AuditReport] = None,
) -> List[Path]:
    """Write `analysis.csv` (one row per invariance trajectory) and `analysis_summary.txt`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    if invariance is not None:
        rows = [
            [
                record.index,
                record.initial_value,
                record.boundary_start,
                record.max_value,
                "" if record.exit_step is None else record.exit_step,
                record.v_decreasing,
            ]
            for record in invariance.records
        ]
    csv_path = write_csv(out_dir / "analysis.csv", INVARIANCE_COLUMNS, rows)
    summary_path = out_dir / "analysis_summary.txt"
    summary_path.write_text("\n".join(summary_lines(beta, theorem, invariance, audit)) + "\n", encoding="utf-8")
    return [csv_path, summary_path]
