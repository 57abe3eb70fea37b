"""
Closed-loop matrix, physics action, residual composition, Lyapunov value and
the physics-regulated reward.

With ``A_bar = A + B F`` and ``V(s) = s^T P s`` the reward of a transition
``(s, a, s_next)`` is

    s^T A_bar^T P A_bar s - s_next^T P s_next + w * g(s, a),    g(s, a) = -a^2

and the data-driven term ``r = s_next^T P s_next - s^T A_bar^T P A_bar s`` is
what the learned action can influence.
"""

from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from phydrl.util.errors import DimensionMismatch, NonFinite
from phydrl.util.files import load_matrix, save_matrix
from phydrl.util.validators import Matrix, as_state

GAIN_FILES = ("P", "F", "Q", "R", "A", "B", "alpha")


class EnvelopeGain(BaseModel):
    """
    Synthesized envelope ``P``, feedback gain ``F`` and nominal model ``(A, B)``.

    ``A_bar`` is derived as ``A + B F`` when not given.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    P: Matrix
    F: Matrix
    alpha: float = Field(..., gt=0.0, lt=1.0)
    A: Matrix
    B: Matrix
    A_bar: Matrix

    @model_validator(mode="before")
    @classmethod
    def derive_closed_loop(cls, data):
        if isinstance(data, dict) and data.get("A_bar") is None:
            A = np.atleast_2d(np.asarray(data["A"], dtype=np.float64))
            B = np.atleast_2d(np.asarray(data["B"], dtype=np.float64))
            F = np.atleast_2d(np.asarray(data["F"], dtype=np.float64))
            data = {**data, "A_bar": A + B @ F}
        return data

    @model_validator(mode="after")
    def check_shapes(self):
        n = self.P.shape[0]
        if self.P.shape != (n, n) or self.A.shape != (n, n) or self.A_bar.shape != (n, n):
            raise DimensionMismatch("P, A and A_bar must be square and of equal size")
        if self.B.shape[0] != n or self.F.shape != (self.B.shape[1], n):
            raise DimensionMismatch(f"B must be {n}xm and F mx{n}")
        if np.max(np.abs(self.P - self.P.T)) > 1e-9 * max(1.0, float(np.max(np.abs(self.P)))):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(self.P)[0] <= 0.0:
            raise ValueError("P must be positive definite")
        return self

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def Q(self) -> np.ndarray:
        return np.linalg.inv(self.P)

    @property
    def R(self) -> np.ndarray:
        return self.F @ self.Q

    @classmethod
    def from_solution(cls, problem, solution) -> "EnvelopeGain":
        return cls(P=solution.P, F=solution.F, alpha=problem.alpha, A=problem.A, B=problem.B)

    def check_lmis(self, ns, tol: float = 1e-3):
        """Evaluate the synthesis LMIs at ``(P^-1, F P^-1)``."""
        from phydrl.synthesis.lmi import SynthesisProblem, verify

        problem = SynthesisProblem(A=self.A, B=self.B, alpha=self.alpha, ns=ns)
        return verify(problem, 0.5 * (self.Q + self.Q.T), self.R, tol=tol)

    def save(self, directory) -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        values = {"P": self.P, "F": self.F, "Q": self.Q, "R": self.R, "A": self.A, "B": self.B}
        paths = [save_matrix(directory / f"{name}.txt", value) for name, value in values.items()]
        paths.append(save_matrix(directory / "alpha.txt", [[self.alpha]]))
        return paths

    @classmethod
    def load(cls, directory) -> "EnvelopeGain":
        directory = Path(directory)
        missing = [name for name in ("P", "F", "A", "B", "alpha") if not (directory / f"{name}.txt").exists()]
        if missing:
            raise FileNotFoundError(f"Gain directory {directory} lacks {', '.join(missing)}")
        P = load_matrix(directory / "P.txt")
        return cls(
            P=0.5 * (P + P.T),
            F=load_matrix(directory / "F.txt"),
            alpha=float(load_matrix(directory / "alpha.txt")[0, 0]),
            A=load_matrix(directory / "A.txt"),
            B=load_matrix(directory / "B.txt").reshape(P.shape[0], -1),
        )


class RewardVariant(str, Enum):
    SAFETY_AND_STABILITY = "safety_and_stability"
    STABILITY_ONLY = "stability_only"


class RewardConfig(BaseModel):
    performance_weight: float = Field(1.0, ge=0.0)
    reward_variant: RewardVariant = RewardVariant.SAFETY_AND_STABILITY


class ResidualAction(NamedTuple):
    value: float
    clamped: bool


def _quad(P: np.ndarray, s: np.ndarray) -> np.ndarray | float:
    value = np.einsum("...i,ij,...j->...", s, P, s)
    return float(value) if np.ndim(value) == 0 else value


def physics_action(F, s) -> float | np.ndarray:
    """Model-based command ``F s``."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    s = as_state(s, F.shape[1])
    a = s @ F.T
    if F.shape[0] == 1:
        a = a[..., 0]
    return float(a) if np.ndim(a) == 0 else a


def residual_action(a_drl: float, a_phy: float, force_limit: float) -> ResidualAction:
    """
    Terminal command ``a_drl + a_phy`` saturated at ``force_limit``.

    Raises:
        NonFinite: Either term is NaN or infinite.
    """
    if not (np.isfinite(a_drl) and np.isfinite(a_phy)):
        raise NonFinite(f"Non-finite action terms: a_drl={a_drl}, a_phy={a_phy}")
    total = float(a_drl) + float(a_phy)
    if abs(total) > force_limit:
        return ResidualAction(value=float(np.clip(total, -force_limit, force_limit)), clamped=True)
    return ResidualAction(value=total, clamped=False)


def lyapunov_value(P, s) -> float | np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    return _quad(P, as_state(s, P.shape[0]))


def performance(a) -> float | np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    value = -np.square(a)
    if value.ndim > 0 and value.shape[-1:] == (1,):
        value = value[..., 0]
    return float(value) if np.ndim(value) == 0 else value


def closed_loop_value(gain: EnvelopeGain, s) -> float | np.ndarray:
    """``s^T A_bar^T P A_bar s``."""
    s = as_state(s, gain.n)
    return _quad(gain.P, s @ gain.A_bar.T)


def r_term(gain: EnvelopeGain, s, s_next) -> float | np.ndarray:
    """Data-driven term ``s_next^T P s_next - s^T A_bar^T P A_bar s``."""
    s = as_state(s, gain.n, "s")
    s_next = as_state(s_next, gain.n, "s_next")
    return lyapunov_value(gain.P, s_next) - closed_loop_value(gain, s)


def r_term_direct(gain: EnvelopeGain, s, a_drl, f) -> float | np.ndarray:
    """
    The same term from the mismatch `f` and the learned action:
    ``delta^T P delta + 2 (A_bar s)^T P delta`` with ``delta = B a_drl + f``.
    """
    s = as_state(s, gain.n, "s")
    f = as_state(f, gain.n, "f")
    a_drl = np.asarray(a_drl, dtype=np.float64)
    if gain.B.shape[1] == 1 and (a_drl.ndim == 0 or a_drl.shape[-1] != 1):
        a_drl = a_drl[..., None]
    delta = a_drl @ gain.B.T + f
    cross = np.einsum("...i,ij,...j->...", s @ gain.A_bar.T, gain.P, delta)
    value = _quad(gain.P, delta) + 2.0 * cross
    return float(value) if np.ndim(value) == 0 else value


def reward(gain: EnvelopeGain, cfg: RewardConfig, s, a, s_next) -> float | np.ndarray:
    """
    Physics-regulated reward of the transition ``(s, a, s_next)``.

    ``safety_and_stability``: ``s^T A_bar^T P A_bar s - s_next^T P s_next + w g(s, a)``.
    ``stability_only``: ``alpha s^T P s - s_next^T P s_next + w g(s, a)``, a
    Lyapunov-decrease surrogate on the same scale.
    """
    s = as_state(s, gain.n, "s")
    s_next = as_state(s_next, gain.n, "s_next")
    g = cfg.performance_weight * performance(a)
    if cfg.reward_variant == RewardVariant.STABILITY_ONLY:
        return gain.alpha * lyapunov_value(gain.P, s) - lyapunov_value(gain.P, s_next) + g
    return -r_term(gain, s, s_next) + g


def contraction_slack(gain: EnvelopeGain, s) -> float | np.ndarray:
    """``s^T A_bar^T P A_bar s - alpha s^T P s``; non-positive for an LMI-feasible gain."""
    return closed_loop_value(gain, s) - gain.alpha * lyapunov_value(gain.P, s)


def contraction_margin(gain: EnvelopeGain) -> float:
    """Smallest eigenvalue of ``alpha P - A_bar^T P A_bar``."""
    M = gain.alpha * gain.P - gain.A_bar.T @ gain.P @ gain.A_bar
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
