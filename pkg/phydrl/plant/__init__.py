from .cartpole import (
    BoxRegion,
    EnvelopeRegion,
    PlantParams,
    PlantState,
    linearize,
    model_mismatch,
    sample_initial,
    step,
)
from .linear import LinearPlant
