import logging
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel
from scipy.optimize import least_squares

from phydrl.plant.cartpole import PlantParams, linearize

logger = logging.getLogger(__name__)

FITTED_FIELDS = ("cart_mass", "pole_mass", "pole_half_length")


class CalibrationResult(BaseModel):
    params: PlantParams
    max_relative_error: float
    relative_errors: Dict[str, float]


def relative_errors(p: PlantParams, target_A: np.ndarray, target_B: np.ndarray) -> Dict[str, float]:
    """Relative error of every nonzero entry of the target ``(A, B)``."""
    A, B = linearize(p)
    errors = {}
    for name, got, want in (("A", A, target_A), ("B", B, target_B)):
        for (i, j), value in np.ndenumerate(want):
            if value != 0.0:
                errors[f"{name}[{i},{j}]"] = float(abs(got[i, j] - value) / abs(value))
    return errors


def calibrate(
    target_A,
    target_B,
    initial: Optional[PlantParams] = None,
) -> CalibrationResult:
    """
    Fit cart mass, pole mass and pole half-length so that the frictionless
    linearization matches ``(target_A, target_B)``.

    Gravity, ``dt`` and the friction coefficients are taken from `initial`
    unchanged.
    """
    target_A = np.atleast_2d(np.asarray(target_A, dtype=np.float64))
    target_B = np.asarray(target_B, dtype=np.float64).reshape(-1, 1)
    initial = initial or PlantParams()

    def with_values(values) -> PlantParams:
        return initial.model_copy(update=dict(zip(FITTED_FIELDS, (float(v) for v in values))))

    def residuals(values):
        return np.array(list(relative_errors(with_values(values), target_A, target_B).values()))

    x0 = np.array([getattr(initial, name) for name in FITTED_FIELDS])
    fit = least_squares(residuals, x0, bounds=(1e-3, np.inf), xtol=1e-12, ftol=1e-12)
    params = with_values(fit.x)
    errors = relative_errors(params, target_A, target_B)
    result = CalibrationResult(
        params=params,
        max_relative_error=max(errors.values()),
        relative_errors=errors,
    )
    logger.info(
        "Calibrated "
        + ", ".join(f"{name}={getattr(params, name):.6g}" for name in FITTED_FIELDS)
        + f" (max relative error {result.max_relative_error:.3%})"
    )
    return result
