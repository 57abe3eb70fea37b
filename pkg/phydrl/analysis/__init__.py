from .theorem import (
    BetaEstimate,
    BetaKind,
    TheoremReport,
    check_theorem,
    estimate_beta,
    invariance_rollout,
    lyapunov_audit,
)
