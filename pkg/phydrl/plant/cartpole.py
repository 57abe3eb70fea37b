"""
Friction cart-pole.

State ordering is ``s = [x, v, theta, omega]``: cart position, cart velocity,
pole angle from the upright vertical and pole angular velocity. A positive
force pushes the cart towards positive ``x`` and tips the pole towards
negative ``theta``.

The equations are those of a uniform pole of half-length ``l`` hinged on a
cart, with Coulomb friction between cart and track (whose sign follows the
normal force) and viscous friction at the pivot.
"""

import logging
from typing import Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from phydrl.safety.safety_sets import Envelope, sample_in_envelope
from phydrl.util.errors import DimensionMismatch, EmptyRegion, NonFiniteState
from phydrl.util.validators import Matrix, Vector, as_state

logger = logging.getLogger(__name__)

STATE_DIM = 4
ACTION_DIM = 1


class PlantState(NamedTuple):
    x: float
    v: float
    theta: float
    omega: float

    def to_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @classmethod
    def from_array(cls, s) -> "PlantState":
        s = as_state(s, STATE_DIM)
        return cls(*(float(value) for value in s))


class PlantParams(BaseModel):
    """
    Physical constants of the cart-pole.

    The masses and pole length default to values calibrated so that the
    frictionless linearization reproduces the published nominal model.
    """

    model_config = ConfigDict(frozen=True)

    cart_mass: float = Field(0.94, gt=0.0)
    pole_mass: float = Field(0.23, gt=0.0)
    pole_half_length: float = Field(0.32, gt=0.0)
    gravity: float = Field(9.8, gt=0.0)
    cart_friction_coeff: float = Field(5e-4, ge=0.0)
    pole_friction_coeff: float = Field(2e-6, ge=0.0)
    friction_scale: float = Field(1.0, ge=0.0)
    dt: float = Field(0.0333, gt=0.0)
    force_limit: float = Field(15.0, gt=0.0)
    integrator: Literal["euler", "semi_implicit_euler"] = "euler"

    @property
    def total_mass(self) -> float:
        return self.cart_mass + self.pole_mass

    def frictionless(self) -> "PlantParams":
        return self.model_copy(update={"cart_friction_coeff": 0.0, "pole_friction_coeff": 0.0})


class StepResult(NamedTuple):
    state: np.ndarray
    force: float
    clamped: bool


def clamp_force(force: float, p: PlantParams) -> Tuple[float, bool]:
    force = float(force)
    if abs(force) > p.force_limit:
        return float(np.clip(force, -p.force_limit, p.force_limit)), True
    return force, False


def accelerations(s: np.ndarray, force: float, p: PlantParams) -> Tuple[float, float]:
    """Cart and pole accelerations ``(x_ddot, theta_ddot)`` at state `s`."""
    _, v, theta, omega = s
    mt = p.total_mass
    mp, l, g = p.pole_mass, p.pole_half_length, p.gravity
    mu_c = p.cart_friction_coeff * p.friction_scale
    mu_p = p.pole_friction_coeff * p.friction_scale
    sin, cos = np.sin(theta), np.cos(theta)

    # the Coulomb term depends on the sign of the normal force, which depends on theta_ddot
    normal_sign = 1.0
    for _ in range(2):
        fric = mu_c * np.sign(normal_sign * v)
        num = (
            g * sin
            + cos * ((-force - mp * l * omega**2 * (sin + fric * cos)) / mt + fric * g)
            - mu_p * omega / (mp * l)
        )
        den = l * (4.0 / 3.0 - mp * cos / mt * (cos - fric))
        theta_acc = num / den
        normal = mt * g - mp * l * (theta_acc * sin + omega**2 * cos)
        if normal == 0.0 or np.sign(normal) == normal_sign:
            break
        normal_sign = np.sign(normal)

    x_acc = (force + mp * l * (omega**2 * sin - theta_acc * cos) - mu_c * normal * np.sign(normal * v)) / mt
    return float(x_acc), float(theta_acc)


def step(s, force: float, p: PlantParams) -> StepResult:
    """
    Advance the nonlinear dynamics by one period ``p.dt``.

    Forces beyond ``p.force_limit`` are clamped and flagged in the result.

    Raises:
        NonFiniteState: The integration produced NaN or Inf.
    """
    s = as_state(s, STATE_DIM)
    if s.ndim != 1:
        raise DimensionMismatch("step takes a single state")
    force, clamped = clamp_force(force, p)
    x, v, theta, omega = s
    x_acc, theta_acc = accelerations(s, force, p)
    dt = p.dt
    if p.integrator == "euler":
        nxt = np.array([x + dt * v, v + dt * x_acc, theta + dt * omega, omega + dt * theta_acc])
    else:
        v_next = v + dt * x_acc
        omega_next = omega + dt * theta_acc
        nxt = np.array([x + dt * v_next, v_next, theta + dt * omega_next, omega_next])
    if not np.all(np.isfinite(nxt)):
        raise NonFiniteState(f"Integration from {s.tolist()} with force {force} is not finite")
    return StepResult(state=nxt, force=force, clamped=clamped)


def linearize(p: PlantParams, eps: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discrete-time ``(A, B)`` of the frictionless plant at the upright equilibrium,
    by central finite differences of `step`.
    """
    p = p.frictionless()
    origin = np.zeros(STATE_DIM)
    A = np.zeros((STATE_DIM, STATE_DIM))
    for j in range(STATE_DIM):
        e = np.zeros(STATE_DIM)
        e[j] = eps
        A[:, j] = (step(origin + e, 0.0, p).state - step(origin - e, 0.0, p).state) / (2.0 * eps)
    B = ((step(origin, eps, p).state - step(origin, -eps, p).state) / (2.0 * eps)).reshape(STATE_DIM, ACTION_DIM)
    return A, B


def model_mismatch(s, a, s_next, A, B) -> np.ndarray:
    """Mismatch ``f = s_next - A s - B a`` between the plant and the linear model."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    n = A.shape[0]
    s = as_state(s, n, "s")
    s_next = as_state(s_next, n, "s_next")
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if B.shape != (n, a.shape[-1]):
        raise DimensionMismatch(f"B must be {n}x{a.shape[-1]}, got {B.shape}")
    return s_next - s @ A.T - a @ B.T


def mechanical_energy(s, p: PlantParams) -> float:
    _, v, theta, omega = as_state(s, STATE_DIM)
    mp, l = p.pole_mass, p.pole_half_length
    kinetic = (
        0.5 * p.total_mass * v**2
        + mp * l * v * omega * np.cos(theta)
        + 0.5 * (4.0 / 3.0) * mp * l**2 * omega**2
    )
    return float(kinetic + mp * p.gravity * l * np.cos(theta))


class BoxRegion(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    low: Vector
    high: Vector


class EnvelopeRegion(BaseModel):
    """The sublevel set ``{s | s^T P s <= c}``."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    P: Matrix
    c: float = 1.0


Region = Union[BoxRegion, EnvelopeRegion]


def sample_initial(region: Region, rng_seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """
    Draw a uniform initial state from `region`.

    Raises:
        EmptyRegion: The box has a lower bound above its upper bound, or ``c < 0``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if isinstance(region, BoxRegion):
        if region.low.shape != region.high.shape:
            raise DimensionMismatch("Box bounds must have the same shape")
        if np.any(region.low > region.high):
            raise EmptyRegion("Box lower bound exceeds upper bound")
        return region.low + (region.high - region.low) * rng.random(region.low.shape)
    if region.c < 0.0:
        raise EmptyRegion(f"Envelope level {region.c} is negative")
    if region.c == 0.0:
        return np.zeros(region.P.shape[0])
    return sample_in_envelope(Envelope(P=region.P), 1, rng, scale=region.c)[0]
