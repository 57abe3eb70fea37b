from .lmi import (
    LmiReport,
    SynthesisOptions,
    SynthesisProblem,
    SynthesisSolution,
    psd_margin,
    solution_from_gain,
    solve,
    verify,
)
