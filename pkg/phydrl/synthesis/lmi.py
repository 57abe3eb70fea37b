import logging
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import (
    LinAlgError,
    cho_factor,
    cho_solve,
    solve_discrete_are,
    solve_discrete_lyapunov,
)

from phydrl.safety.safety_sets import NormalizedSafety
from phydrl.util.errors import (
    DimensionMismatch,
    Infeasible,
    NotSymmetric,
    NumericalFailure,
)
from phydrl.util.validators import Matrix

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
# The warm-start LQR gain contracts at sqrt(WARM_START_RATE * alpha).
WARM_START_RATE = 0.9
# Warm-start envelopes reach this fraction of the normalized box bounds.
WARM_START_FILL = 0.5


class SynthesisProblem(BaseModel):
    """
    Data of the three synthesis LMIs.

    Parameters:
        A (np.ndarray): n x n system matrix of the nominal model.
        B (np.ndarray): n x m control structure matrix.
        alpha (float): Contraction rate, strictly between 0 and 1.
        ns (NormalizedSafety): Normalized safe set the envelope must fit in.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    A: Matrix
    B: Matrix
    alpha: float = Field(..., gt=0.0, lt=1.0)
    ns: NormalizedSafety

    @model_validator(mode="after")
    def check_dimensions(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionMismatch(f"B must have {n} rows, got {self.B.shape}")
        if self.ns.n != n:
            raise DimensionMismatch(f"Safe set has dimension {self.ns.n}, A has {n}")
        return self

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


class SynthesisOptions(BaseModel):
    min_margin: float = Field(1e-6, gt=0.0)
    max_iterations: int = Field(50_000, ge=1)
    seed: int = 0
    center_steps: int = Field(50, ge=0)
    shifts: Tuple[float, ...] = (1e-2, 1e-3, 1e-4, 1e-5, 2e-6)
    warm_start: bool = True


class SynthesisSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    Q: Matrix
    R: Matrix
    P: Matrix
    F: Matrix

    @model_validator(mode="after")
    def check_consistency(self):
        n = self.Q.shape[0]
        if np.linalg.eigvalsh(self.Q)[0] <= 0.0:
            raise ValueError("Q must be positive definite")
        if np.max(np.abs(self.P @ self.Q - np.eye(n))) > 1e-8:
            raise ValueError("P must be the inverse of Q")
        scale = max(1.0, float(np.max(np.abs(self.R))))
        if np.max(np.abs(self.F @ self.Q - self.R)) > 1e-8 * scale:
            raise ValueError("F must equal R Q^-1")
        return self

    @classmethod
    def from_qr(cls, Q: np.ndarray, R: np.ndarray) -> "SynthesisSolution":
        Q = 0.5 * (Q + Q.T)
        P = np.linalg.inv(Q)
        P = 0.5 * (P + P.T)
        return cls(Q=Q, R=R, P=P, F=R @ P)

    def closed_loop(self, problem: SynthesisProblem) -> np.ndarray:
        return problem.A + problem.B @ self.F

    def spectral_radius(self, problem: SynthesisProblem) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.closed_loop(problem)))))


class LmiReport(BaseModel):
    schur_margin: float
    box_margin: float
    diag_slacks: List[float]
    q_margin: float
    feasible: bool
    tol: float

    @property
    def min_margin(self) -> float:
        return min([self.schur_margin, self.box_margin, self.q_margin] + self.diag_slacks)


def psd_margin(M) -> float:
    """Smallest eigenvalue of the symmetric matrix `M`."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"Matrix must be square, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetric("Matrix is not symmetric within tolerance")
    try:
        return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"Eigendecomposition failed: {e}") from e


def schur_block(problem: SynthesisProblem, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    AQBR = problem.A @ Q + problem.B @ R
    return np.block([[problem.alpha * Q, AQBR.T], [AQBR, Q]])


def _check_shapes(problem: SynthesisProblem, Q: np.ndarray, R: np.ndarray):
    n, m = problem.n, problem.m
    if Q.shape != (n, n):
        raise DimensionMismatch(f"Q must be {n}x{n}, got {Q.shape}")
    if R.shape != (m, n):
        raise DimensionMismatch(f"R must be {m}x{n}, got {R.shape}")


def verify(problem: SynthesisProblem, Q, R, tol: float = 1e-6) -> LmiReport:
    """
    Evaluate the synthesis LMIs at ``(Q, R)``.

    Parameters:
        problem (SynthesisProblem): The LMI data.
        Q (np.ndarray): Candidate n x n symmetric matrix.
        R (np.ndarray): Candidate m x n matrix.
        tol (float): A constraint counts as satisfied when its margin is at least ``-tol``.

    Returns:
        LmiReport: Minimum eigenvalue of the contraction block, of ``I - D_upper Q D_upper^T``,
        of ``Q``, and the per-row diagonal slacks signed by ``d``.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    _check_shapes(problem, Q, R)
    ns = problem.ns

    schur_margin = psd_margin(schur_block(problem, Q, R))
    box_margin = psd_margin(np.eye(ns.h) - ns.D_upper @ Q @ ns.D_upper.T)
    q_margin = psd_margin(Q)
    diag = np.diag(ns.D_lower @ Q @ ns.D_lower.T)
    slacks = (ns.d * (diag - 1.0)).tolist()

    feasible = min([schur_margin, box_margin, q_margin] + slacks) >= -tol
    return LmiReport(
        schur_margin=schur_margin,
        box_margin=box_margin,
        diag_slacks=slacks,
        q_margin=q_margin,
        feasible=feasible,
        tol=tol,
    )


def schur_margin_check(problem: SynthesisProblem, solution: SynthesisSolution) -> float:
    """Smallest eigenvalue of ``alpha Q - (AQ+BR)^T Q^-1 (AQ+BR)``."""
    AQBR = problem.A @ solution.Q + problem.B @ solution.R
    S = problem.alpha * solution.Q - AQBR.T @ solution.P @ AQBR
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


def solution_from_gain(P, F) -> SynthesisSolution:
    """Recover ``(Q, R)`` from a published envelope ``P`` and gain ``F``."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    Q = np.linalg.inv(0.5 * (P + P.T))
    Q = 0.5 * (Q + Q.T)
    return SynthesisSolution.from_qr(Q, F @ Q)


class _AffineBlocks:
    """
    The LMI constraints as affine symmetric-matrix functions ``M_j(x) = C_j + G_j x``
    of the packed variable ``x = (upper triangle of Q, R row-major)``.
    """

    def __init__(self, problem: SynthesisProblem):
        self.problem = problem
        n, m = problem.n, problem.m
        self.iu = np.triu_indices(n)
        self.nq = len(self.iu[0])
        self.p = self.nq + m * n

        funcs = self._block_functions()
        zero_q, zero_r = self.unpack(np.zeros(self.p))
        self.C = [f(zero_q, zero_r) for f in funcs]
        self.sizes = [c.shape[0] for c in self.C]
        self.G = []
        for f, c in zip(funcs, self.C):
            cols = []
            for k in range(self.p):
                e = np.zeros(self.p)
                e[k] = 1.0
                Qk, Rk = self.unpack(e)
                cols.append((f(Qk, Rk) - c).ravel())
            self.G.append(np.stack(cols, axis=1))

    def _block_functions(self) -> List[Callable[[np.ndarray, np.ndarray], np.ndarray]]:
        problem = self.problem
        ns = problem.ns
        funcs = [
            lambda Q, R: Q,
            lambda Q, R: schur_block(problem, Q, R),
            lambda Q, R: np.eye(ns.h) - ns.D_upper @ Q @ ns.D_upper.T,
        ]
        for i in range(ns.h):
            row = ns.D_lower[i]
            sign = ns.d[i]
            funcs.append(lambda Q, R, row=row, sign=sign: np.array([[sign * (row @ Q @ row - 1.0)]]))
        return funcs

    def unpack(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n, m = self.problem.n, self.problem.m
        upper = np.zeros((n, n))
        upper[self.iu] = x[: self.nq]
        Q = upper + upper.T - np.diag(np.diag(upper))
        R = x[self.nq :].reshape(m, n)
        return Q, R

    def pack(self, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
        return np.concatenate([Q[self.iu], R.ravel()])

    def evaluate(self, x: np.ndarray) -> List[np.ndarray]:
        blocks = []
        for c, g, size in zip(self.C, self.G, self.sizes):
            M = c + (g @ x).reshape(size, size)
            blocks.append(0.5 * (M + M.T))
        return blocks


def _min_eig(blocks: List[np.ndarray]) -> float:
    try:
        return min(float(np.linalg.eigvalsh(M)[0]) for M in blocks)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"Eigendecomposition failed: {e}") from e


def _clip(M: np.ndarray, floor: float) -> np.ndarray:
    try:
        w, V = np.linalg.eigh(M)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"Eigendecomposition failed: {e}") from e
    return (V * np.maximum(w, floor)) @ V.T


def _shift_budgets(total: int, count: int) -> List[int]:
    """Half of the projections go to the first shift, the rest are split evenly."""
    if count <= 1:
        return [total] * count
    rest = total // (2 * (count - 1))
    return [total - rest * (count - 1)] + [rest] * (count - 1)


def _lyapunov_start(problem: SynthesisProblem) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Candidate ``(Q, R)`` built from a discounted LQR gain ``F``.

    ``Q`` solves ``alpha Q - (A+BF) Q (A+BF)^T = alpha I``, which makes the
    contraction block positive definite, and is then scaled so the envelope
    fills ``WARM_START_FILL`` of the box bounds. Returns None when no such
    gain exists (an unstabilizable mode at the requested rate).
    """
    n, m = problem.n, problem.m
    rate = np.sqrt(WARM_START_RATE * problem.alpha)
    a, b = problem.A / rate, problem.B / rate
    try:
        X = solve_discrete_are(a, b, np.eye(n), np.eye(m))
        F = -np.linalg.solve(np.eye(m) + b.T @ X @ b, b.T @ X @ a)
    except (LinAlgError, ValueError) as e:
        logger.debug(f"No discounted LQR gain: {e}")
        return None
    if not np.all(np.isfinite(F)):
        return None
    A_bar = problem.A + problem.B @ F
    if np.max(np.abs(np.linalg.eigvals(A_bar))) >= np.sqrt(problem.alpha):
        return None

    Q = solve_discrete_lyapunov(A_bar / np.sqrt(problem.alpha), np.eye(n))
    Q = 0.5 * (Q + Q.T)
    ns = problem.ns
    extents = [float(np.linalg.eigvalsh(ns.D_upper @ Q @ ns.D_upper.T)[-1])] if ns.h else []
    lower_diag = np.diag(ns.D_lower @ Q @ ns.D_lower.T)
    extents += lower_diag[ns.d < 0].tolist()
    extent = max(extents, default=0.0)
    if extent > 0.0:
        Q = (WARM_START_FILL / extent) * Q
    return Q, F @ Q


def _project_feasible(
    blocks: _AffineBlocks, x: np.ndarray, opts: SynthesisOptions
) -> Tuple[np.ndarray, int]:
    """
    Alternating projections between the graph ``{(x, X) | X_j = M_j(x)}`` and the
    shifted cones ``{X_j >= shift I}`` until every block is positive definite.
    """
    H = np.eye(blocks.p) + sum(g.T @ g for g in blocks.G)
    try:
        factor = cho_factor(H)
    except LinAlgError as e:
        raise NumericalFailure(f"Projection system is singular: {e}") from e

    used = 0
    for shift, budget in zip(opts.shifts, _shift_budgets(opts.max_iterations, len(opts.shifts))):
        for _ in range(budget):
            current = blocks.evaluate(x)
            if _min_eig(current) > 0.0:
                logger.debug(f"Strictly feasible after {used} projections (shift {shift:g})")
                return x, used
            rhs = x.copy()
            for c, g, M in zip(blocks.C, blocks.G, current):
                rhs += g.T @ (_clip(M, shift) - c).ravel()
            x_new = cho_solve(factor, rhs)
            used += 1
            step = np.linalg.norm(x_new - x)
            x = x_new
            if step <= 1e-14 * (1.0 + np.linalg.norm(x)):
                logger.debug(f"Projections stalled at shift {shift:g} after {used} steps")
                break
    if _min_eig(blocks.evaluate(x)) > 0.0:
        return x, used
    raise Infeasible(
        f"No strictly feasible point found within {opts.max_iterations} projections"
    )


def _barrier(blocks: List[np.ndarray]) -> float:
    total = 0.0
    for M in blocks:
        sign, logdet = np.linalg.slogdet(M)
        if sign <= 0:
            return -np.inf
        total += logdet
    return total


def _is_positive_definite(blocks: List[np.ndarray]) -> bool:
    try:
        for M in blocks:
            np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def _center(blocks: _AffineBlocks, x: np.ndarray, steps: int) -> np.ndarray:
    """Damped Newton ascent of ``sum_j log det M_j(x)`` from a strictly feasible `x`."""
    for it in range(steps):
        current = blocks.evaluate(x)
        grad = np.zeros(blocks.p)
        hess = np.zeros((blocks.p, blocks.p))
        for g, M in zip(blocks.G, current):
            W = np.linalg.inv(M)
            W = 0.5 * (W + W.T)
            grad += g.T @ W.ravel()
            hess += g.T @ np.kron(W, W) @ g
        hess += 1e-12 * max(1.0, float(np.trace(hess))) * np.eye(blocks.p)
        try:
            direction = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as e:
            raise NumericalFailure(f"Centering step failed: {e}") from e
        decrement = float(grad @ direction)
        if decrement / 2.0 < 1e-10:
            break
        value = _barrier(current)
        t = 1.0
        while t > 1e-10:
            trial = x + t * direction
            trial_blocks = blocks.evaluate(trial)
            if _is_positive_definite(trial_blocks) and _barrier(trial_blocks) >= value + 0.25 * t * decrement:
                x = trial
                break
            t *= 0.5
        else:
            break
    return x


def solve(problem: SynthesisProblem, opts: SynthesisOptions = None) -> SynthesisSolution:
    """
    Find ``(Q, R)`` satisfying the synthesis LMIs with margin at least ``opts.min_margin``
    and return it with ``P = Q^-1`` and ``F = R Q^-1``.

    Raises:
        Infeasible: No strictly feasible point was found, or the centered point
            does not reach the requested margin.
        NumericalFailure: An eigendecomposition or linear solve broke down.
    """
    opts = opts or SynthesisOptions()
    blocks = _AffineBlocks(problem)
    ns = problem.ns

    start = _lyapunov_start(problem) if opts.warm_start else None
    if start is not None:
        x = blocks.pack(*start)
    else:
        rows = np.vstack([ns.D_upper, ns.D_lower])
        q0 = 0.5 / max(1.0, float(np.max(np.sum(rows**2, axis=1))))
        rng = np.random.default_rng(opts.seed)
        R0 = rng.normal(scale=1e-3 * q0, size=(problem.m, problem.n))
        x = blocks.pack(q0 * np.eye(problem.n), R0)

    x, used = _project_feasible(blocks, x, opts)
    x = _center(blocks, x, opts.center_steps)

    Q, R = blocks.unpack(x)
    try:
        solution = SynthesisSolution.from_qr(Q, R)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise NumericalFailure(f"Could not derive P and F: {e}") from e
    report = verify(problem, Q, R, tol=1e-6)
    if not report.feasible or report.min_margin < opts.min_margin:
        raise Infeasible(
            f"Best point has margin {report.min_margin:.3e} below required {opts.min_margin:.1e}"
        )
    logger.info(
        f"LMIs solved after {used} projections: min margin {report.min_margin:.3e}, "
        f"spectral radius {solution.spectral_radius(problem):.4f}"
    )
    return solution
