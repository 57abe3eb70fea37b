from typing import Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from phydrl.plant.cartpole import PlantParams, StepResult, clamp_force
from phydrl.plant.cartpole import step as cartpole_step
from phydrl.util.errors import DimensionMismatch, NonFiniteState
from phydrl.util.validators import Matrix, as_state


class LinearPlant(BaseModel):
    """Nominal model ``s' = A s + B a`` used as a mismatch-free test plant."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    A: Matrix
    B: Matrix
    force_limit: float = Field(float("inf"), gt=0.0)

    @model_validator(mode="after")
    def check_shapes(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, 1):
            raise DimensionMismatch(f"A must be square and B {n}x1")
        return self

    def step(self, s, force: float) -> StepResult:
        s = as_state(s, self.A.shape[0])
        force, clamped = clamp_force(force, self)
        nxt = self.A @ s + self.B[:, 0] * force
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteState(f"Linear step from {s.tolist()} is not finite")
        return StepResult(state=nxt, force=force, clamped=clamped)


Plant = Union[PlantParams, LinearPlant]


def advance(plant: Plant, s, force: float) -> StepResult:
    if isinstance(plant, LinearPlant):
        return plant.step(s, force)
    return cartpole_step(s, force, plant)
