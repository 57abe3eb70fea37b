from .safety_sets import (
    Envelope,
    EnvelopeReport,
    NormalizedSafety,
    SafetySpec,
    build_normalized,
    envelope_in_safe_set,
    in_envelope,
    in_normalized_set,
    in_safe_set,
    sample_in_envelope,
)
