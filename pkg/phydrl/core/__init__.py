from .phy_core import (
    EnvelopeGain,
    ResidualAction,
    RewardConfig,
    RewardVariant,
    lyapunov_value,
    physics_action,
    r_term,
    residual_action,
    reward,
)
