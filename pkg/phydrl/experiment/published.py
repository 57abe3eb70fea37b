"""Published nominal cart-pole model, envelope and gain (four-decimal values)."""

import numpy as np

from phydrl.core.phy_core import EnvelopeGain
from phydrl.safety.safety_sets import SafetySpec, build_normalized
from phydrl.synthesis.lmi import SynthesisProblem

A = np.array(
    [
        [1.0, 0.0333, 0.0, 0.0],
        [0.0, 1.0, -0.0565, 0.0],
        [0.0, 0.0, 1.0, 0.0333],
        [0.0, 0.0, 0.8980, 1.0],
    ]
)
B = np.array([[0.0], [0.0334], [0.0], [-0.0783]])
P = np.array(
    [
        [2.0120, 0.2701, 1.4192, 0.2765],
        [0.2701, 2.2738, 5.1795, 1.0674],
        [1.4192, 5.1795, 31.9812, 4.9798],
        [0.2765, 1.0674, 4.9798, 1.0298],
    ]
)
F = np.array([[0.7400, 3.6033, 35.3534, 6.9982]])
ALPHA = 0.8

POSITION_BOUND = 0.6
ANGLE_BOUND = 0.4


def safety_spec() -> SafetySpec:
    """``|x| <= 0.6`` and ``|theta| <= 0.4``."""
    return SafetySpec.from_box(
        lower=[-POSITION_BOUND, -ANGLE_BOUND],
        upper=[POSITION_BOUND, ANGLE_BOUND],
        indices=[0, 2],
        n=4,
    )


def problem(alpha: float = ALPHA) -> SynthesisProblem:
    return SynthesisProblem(A=A, B=B, alpha=alpha, ns=build_normalized(safety_spec()))


def gain() -> EnvelopeGain:
    return EnvelopeGain(P=P, F=F, alpha=ALPHA, A=A, B=B)
