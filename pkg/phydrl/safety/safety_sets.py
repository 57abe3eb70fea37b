"""
Safe set, its normalized variant, the ellipsoidal safety envelope and the
envelope-inside-safe-set condition.

The safe set is the polytope ``{s | v_lower <= D s - v <= v_upper}``. The
normalized variant rescales every constraint row so that the set reads
``d_i <= [D_lower s]_i`` and ``[D_upper s]_i <= 1``.
"""

from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from phydrl.util.errors import DegenerateRow, DimensionMismatch, SingularP
from phydrl.util.validators import Matrix, Vector, as_state

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9


class SafetySpec(BaseModel):
    """
    Raw constraint data ``(D, v, v_upper, v_lower)`` of the safe set.

    Parameters:
        D: h x n constraint directions.
        v: h offsets.
        v_upper: h upper bounds.
        v_lower: h lower bounds.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    D: Matrix
    v: Vector
    v_upper: Vector
    v_lower: Vector

    @model_validator(mode="after")
    def check_rows(self):
        h = self.D.shape[0]
        for name in ("v", "v_upper", "v_lower"):
            if getattr(self, name).shape != (h,):
                raise DimensionMismatch(f"{name} must have {h} entries")
        if np.any(self.v_lower >= self.v_upper):
            raise ValueError("v_lower must be strictly below v_upper on every row")
        if np.any(np.all(self.D == 0.0, axis=1)):
            raise ValueError("D must not contain an all-zero row")
        low = self.v_lower + self.v
        high = self.v_upper + self.v
        bad = np.flatnonzero((low == 0.0) | (high == 0.0))
        if bad.size:
            raise DegenerateRow(
                f"Rows {bad.tolist()} have a zero bound after offset; the scaling would be singular"
            )
        return self

    @property
    def h(self) -> int:
        return self.D.shape[0]

    @property
    def n(self) -> int:
        return self.D.shape[1]

    @classmethod
    def from_box(
        cls,
        lower: Sequence[float],
        upper: Sequence[float],
        indices: Sequence[int],
        n: int,
    ) -> "SafetySpec":
        """Axis-aligned bounds ``lower[i] <= s[indices[i]] <= upper[i]``."""
        D = np.zeros((len(indices), n))
        for row, idx in enumerate(indices):
            D[row, idx] = 1.0
        return cls(D=D, v=np.zeros(len(indices)), v_upper=upper, v_lower=lower)


class NormalizedSafety(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    D_upper: Matrix
    D_lower: Matrix
    d: Vector
    lambda_upper: Matrix
    lambda_lower: Matrix

    @model_validator(mode="after")
    def check_scaling(self):
        for name in ("lambda_upper", "lambda_lower"):
            lam = getattr(self, name)
            if not np.array_equal(lam, np.diag(np.diag(lam))):
                raise ValueError(f"{name} must be diagonal")
            if np.any(np.diag(lam) == 0.0):
                raise DegenerateRow(f"{name} has a zero diagonal entry")
        if not np.all(np.isin(self.d, (-1.0, 1.0))):
            raise ValueError("d entries must be -1 or +1")
        return self

    @property
    def h(self) -> int:
        return self.D_upper.shape[0]

    @property
    def n(self) -> int:
        return self.D_upper.shape[1]


class Envelope(BaseModel):
    """Ellipsoid ``{s | s^T P s <= 1}``; ``P`` is symmetrized on construction."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    P: Matrix

    @model_validator(mode="before")
    @classmethod
    def symmetrize(cls, data):
        if isinstance(data, dict) and "P" in data:
            P = np.array(data["P"], dtype=np.float64)
            if P.ndim == 2 and P.shape[0] == P.shape[1]:
                scale = max(1.0, float(np.max(np.abs(P)))) if P.size else 1.0
                if np.max(np.abs(P - P.T)) > SYMMETRY_TOL * scale:
                    raise ValueError("P must be symmetric")
                data = {**data, "P": 0.5 * (P + P.T)}
        return data

    @model_validator(mode="after")
    def check_positive(self):
        if self.P.shape[0] != self.P.shape[1]:
            raise DimensionMismatch(f"P must be square, got {self.P.shape}")
        if np.linalg.eigvalsh(self.P)[0] <= 0.0:
            raise ValueError("P must be positive definite")
        return self

    @property
    def n(self) -> int:
        return self.P.shape[0]


class EnvelopeReport(BaseModel):
    holds: bool
    box_margin: float
    diag_slacks: list


def build_normalized(spec: SafetySpec) -> NormalizedSafety:
    """
    Build the normalized safe set of `spec`.

    Each row falls in one of three sign patterns of ``lo = v_lower + v`` and
    ``hi = v_upper + v``:

    * ``lo > 0``: both bounds positive, ``d = +1``, scales ``(hi, lo)``.
    * ``hi < 0``: both bounds negative, ``d = +1``, scales ``(lo, hi)``.
    * ``hi > 0 > lo``: the origin is inside, ``d = -1``, scales ``(hi, -lo)``.
    """
    lo = spec.v_lower + spec.v
    hi = spec.v_upper + spec.v
    upper = np.empty(spec.h)
    lower = np.empty(spec.h)
    d = np.empty(spec.h)
    for i in range(spec.h):
        if lo[i] == 0.0 or hi[i] == 0.0:
            raise DegenerateRow(f"Row {i} has a zero bound after offset")
        if lo[i] > 0.0:
            upper[i], lower[i], d[i] = hi[i], lo[i], 1.0
        elif hi[i] < 0.0:
            upper[i], lower[i], d[i] = lo[i], hi[i], 1.0
        else:
            upper[i], lower[i], d[i] = hi[i], -lo[i], -1.0
    return NormalizedSafety(
        D_upper=spec.D / upper[:, None],
        D_lower=spec.D / lower[:, None],
        d=d,
        lambda_upper=np.diag(upper),
        lambda_lower=np.diag(lower),
    )


def in_safe_set(spec: SafetySpec, s) -> np.ndarray | bool:
    s = as_state(s, spec.n)
    y = s @ spec.D.T - spec.v
    inside = np.all((spec.v_lower <= y) & (y <= spec.v_upper), axis=-1)
    return bool(inside) if s.ndim == 1 else inside


def in_normalized_set(ns: NormalizedSafety, s) -> np.ndarray | bool:
    """
    Membership in the normalized set: ``[D_upper s]_i <= 1`` and
    ``[D_lower s]_i >= d_i`` on every row.
    """
    s = as_state(s, ns.n)
    upper = s @ ns.D_upper.T
    lower = s @ ns.D_lower.T
    inside = np.all((upper <= 1.0) & (lower >= ns.d), axis=-1)
    return bool(inside) if s.ndim == 1 else inside


def in_envelope(env: Envelope, s) -> np.ndarray | bool:
    s = as_state(s, env.n)
    value = np.einsum("...i,ij,...j->...", s, env.P, s)
    inside = value <= 1.0
    return bool(inside) if s.ndim == 1 else inside


def envelope_in_safe_set(env: Envelope, ns: NormalizedSafety) -> EnvelopeReport:
    """
    Sufficient condition for the envelope to lie inside the normalized set:
    ``D_upper P^-1 D_upper^T <= I`` and, per row, ``[D_lower P^-1 D_lower^T]_ii``
    at least 1 when ``d_i = +1`` and at most 1 when ``d_i = -1``.

    The report carries the eigenvalue margin of ``I - D_upper P^-1 D_upper^T``
    and per-row slacks signed so that non-negative means satisfied.
    """
    if env.n != ns.n:
        raise DimensionMismatch(f"Envelope has dimension {env.n}, safe set {ns.n}")
    try:
        Q = np.linalg.inv(env.P)
    except np.linalg.LinAlgError as e:
        raise SingularP(str(e)) from e
    box = np.eye(ns.h) - ns.D_upper @ Q @ ns.D_upper.T
    box_margin = float(np.linalg.eigvalsh(0.5 * (box + box.T))[0])
    diag = np.diag(ns.D_lower @ Q @ ns.D_lower.T)
    slacks = np.where(ns.d > 0, diag - 1.0, 1.0 - diag)
    scale = max(1.0, float(np.max(np.abs(box))))
    holds = box_margin >= -PSD_TOL * scale and bool(np.all(slacks >= -PSD_TOL))
    return EnvelopeReport(holds=holds, box_margin=box_margin, diag_slacks=slacks.tolist())


def inverse_sqrt(P: np.ndarray) -> np.ndarray:
    """Symmetric ``P^(-1/2)`` via eigendecomposition."""
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    if w[0] <= 0.0:
        raise SingularP("P must be positive definite")
    return (V / np.sqrt(w)) @ V.T


def sample_in_envelope(
    env: Envelope,
    count: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    on_boundary: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Uniform samples in ``{s | s^T P s <= scale}``.

    Points are drawn uniformly in the unit ball (gaussian direction, radius
    ``u^(1/n)``) and mapped through ``sqrt(scale) P^(-1/2)``. Rows flagged in
    `on_boundary` are pushed to the surface ``s^T P s = scale``.
    """
    n = env.n
    directions = rng.standard_normal((count, n))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    directions /= norms
    radii = rng.random((count, 1)) ** (1.0 / n)
    if on_boundary is not None:
        radii[np.asarray(on_boundary, dtype=bool)] = 1.0
    ball = directions * radii
    return np.sqrt(scale) * ball @ inverse_sqrt(env.P)
